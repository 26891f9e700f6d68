"""Head-entity extraction and rule-based coreference.

The head of a query is taken from a dependency tree when one is supplied
(gold trees ship with synthetic data) and from a closed-lexicon scan
otherwise. Mentions of the head's object in the knowledge text are found by
a small set of surface rules over ownership, profession and relation
sentences. ``RULES_VERSION`` names the rule set.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .lexicon import ADJECTIVES, NOUNS
from .text import Prompt, tokenize

RULES_VERSION = "v1"

NOMINAL_POS = {"NOUN", "PROPN"}
# dependents kept inside the head span
SPAN_LABELS = {"amod", "compound"}


class UnparseableQueryError(ValueError):
    pass


@dataclass(frozen=True)
class TreeToken:
    text: str
    pos: str
    start: int
    end: int


@dataclass
class DependencyTree:
    """Tokens with POS tags and ``(head, dep, label)`` arcs; the root arc has head -1."""

    tokens: list
    arcs: list

    def __post_init__(self):
        self.tokens = [t if isinstance(t, TreeToken) else TreeToken(*t) for t in self.tokens]
        self.arcs = [tuple(a) for a in self.arcs]
        n = len(self.tokens)
        heads = {}
        for h, d, _ in self.arcs:
            if not (0 <= d < n) or not (-1 <= h < n):
                raise ValueError(f"arc ({h}, {d}) out of range for {n} tokens")
            if d in heads:
                raise ValueError(f"token {d} has two heads")
            heads[d] = h
        if len(heads) != n:
            raise ValueError("every token needs exactly one head")
        roots = [d for d, h in heads.items() if h == -1]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root, found {len(roots)}")
        for d in range(n):
            seen, cur = set(), d
            while cur != -1:
                if cur in seen:
                    raise ValueError("arcs contain a cycle")
                seen.add(cur)
                cur = heads[cur]
        self._heads = heads

    @property
    def root(self) -> int:
        return next(d for d, h in self._heads.items() if h == -1)

    def head_of(self, i: int) -> int:
        return self._heads[i]

    def children(self, i: int, label: Optional[str] = None) -> list[int]:
        return sorted(d for h, d, lab in self.arcs
                      if h == i and (label is None or lab == label or lab.startswith(label + ":")))

    def label_of(self, i: int) -> str:
        return next(lab for _, d, lab in self.arcs if d == i)

    def to_json(self) -> dict:
        return {"tokens": [[t.text, t.pos, t.start, t.end] for t in self.tokens],
                "arcs": [list(a) for a in self.arcs]}

    @classmethod
    def from_json(cls, data: dict) -> "DependencyTree":
        return cls(tokens=[TreeToken(*t) for t in data["tokens"]], arcs=data["arcs"])


@dataclass
class HeadEntity:
    """Head-entity span of a query plus the cues later used for coreference.

    ``owner_chain`` lists a possessor chain innermost first, e.g.
    ``["jake", "colleague"]`` for "Jake's colleague's item".
    """

    text: str
    start: int
    end: int
    noun: str
    attributes: list = field(default_factory=list)
    owner_chain: list = field(default_factory=list)

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end


# -- head extraction -------------------------------------------------------


def _possessor_chain(tree: DependencyTree, i: int) -> list[str]:
    poss = tree.children(i, "poss")
    if not poss:
        return []
    p = poss[0]
    return _possessor_chain(tree, p) + [tree.tokens[p].text.lower()]


def _head_from_tree(query: str, tree: DependencyTree) -> HeadEntity:
    head = tree.root
    if tree.tokens[head].pos not in NOMINAL_POS:
        # verbal root: fall back to its nominal subject or object
        for label in ("nsubj", "obj"):
            nominal = [c for c in tree.children(head, label) if tree.tokens[c].pos in NOMINAL_POS]
            if nominal:
                head = nominal[0]
                break
        else:
            raise UnparseableQueryError(f"no nominal head in {query!r}")

    keep = {head}
    frontier = [head]
    while frontier:
        i = frontier.pop()
        for c in tree.children(i):
            if tree.label_of(c) in SPAN_LABELS:
                keep.add(c)
                frontier.append(c)
    lo, hi = min(keep), max(keep)
    start, end = tree.tokens[lo].start, tree.tokens[hi].end

    attributes = [tree.tokens[c].text.lower() for c in tree.children(head, "amod")]
    for c in tree.children(head, "nmod"):
        cases = [tree.tokens[k].text.lower() for k in tree.children(c, "case")]
        if cases == ["in"]:
            attributes.append(tree.tokens[c].text.lower())

    chain = _possessor_chain(tree, head)
    if not chain:
        for c in tree.children(head, "nmod"):
            cases = [tree.tokens[k].text.lower() for k in tree.children(c, "case")]
            if cases == ["of"]:
                chain = _possessor_chain(tree, c) + [tree.tokens[c].text.lower()]
    if not chain:
        for c in tree.children(head, "acl"):
            agents = tree.children(c, "nsubj") + tree.children(c, "obl")
            if agents:
                a = agents[0]
                chain = _possessor_chain(tree, a) + [tree.tokens[a].text.lower()]
    return HeadEntity(query[start:end], start, end, tree.tokens[head].text.lower(),
                      attributes, chain)


_FUNCTION_WORDS = {"the", "a", "an", "'s", "of", "in", "that", "who", "which", "by",
                   "owned", "owns", "is", "with", "on", "at", ",", "."}


def _head_from_lexicon(query: str) -> HeadEntity:
    toks = tokenize(query)
    texts = [t.text for t in toks]
    n = len(toks)
    head = None
    for i, w in enumerate(texts):
        possessor = i + 1 < n and texts[i + 1] == "'s"
        if w in NOUNS and not possessor:
            head = i
            break
    if head is None:
        raise UnparseableQueryError(f"no nominal head in {query!r}")

    lo = head
    while lo > 0 and texts[lo - 1] not in _FUNCTION_WORDS:
        lo -= 1
    attributes = [w for w in texts[lo:head] if w in ADJECTIVES]

    # possessor chain directly before the head span: X 's Y 's <head>
    chain = []
    j = lo - 1
    while j >= 1 and texts[j] == "'s":
        chain.insert(0, texts[j - 1])
        j -= 2
    rest = texts[head + 1:]
    if rest[:1] == ["in"] and len(rest) > 1:
        attributes.append(rest[1])
    elif not chain and rest[:1] == ["of"]:
        words_after = [w for w in rest[1:] if w not in ("the", "a", "an", ".")]
        chain = [w for w in words_after if w != "'s"]
    elif not chain and rest[:1] in (["that"], ["which"]) and rest[2:3] == ["owns"]:
        chain = rest[1:2]
    elif not chain and rest[:2] == ["owned", "by"]:
        chain = [w for w in rest[2:] if w not in ("the", "a", "an", ".", "'s")]
    start, end = toks[lo].start, toks[head].end
    return HeadEntity(query[start:end], start, end, texts[head], attributes, chain)


def extract_head(query: str, tree: Optional[DependencyTree] = None) -> HeadEntity:
    """Head entity of ``query``: the nominal head with its adjectival and
    compound modifiers, excluding determiners, possessors and clauses."""
    if not query.strip():
        raise UnparseableQueryError("empty query")
    if tree is not None:
        return _head_from_tree(query, tree)
    return _head_from_lexicon(query)


# -- coreference -------------------------------------------------------------

_NAME = r"[A-Z][a-z]+"
_OWNS = [
    re.compile(rf"\b(?P<owner>{_NAME}) (?:owns|brought|carries) the (?P<obj>[a-z]+ [a-z]+)\."),
    re.compile(rf"\b[Tt]he (?P<obj>[a-z]+ [a-z]+) belongs to (?P<owner>{_NAME})\."),
]
_PROFESSION = re.compile(rf"\b(?P<name>{_NAME}) (?:is an?|works as an?) (?P<prof>[a-z]+)\.")
_RELATION = re.compile(rf"\b(?P<a>{_NAME}) is (?P<b>{_NAME})'s (?P<rel>[a-z]+)\.")


@dataclass
class KnowledgeFacts:
    owned: list  # (object phrase, owner)
    professions: dict  # name -> profession
    relations: list  # (a, relation, b): a is b's relation

    @classmethod
    def parse(cls, knowledge: str) -> "KnowledgeFacts":
        owned = []
        for pat in _OWNS:
            owned += [(m["obj"], m["owner"].lower()) for m in pat.finditer(knowledge)]
        profs = {m["name"].lower(): m["prof"] for m in _PROFESSION.finditer(knowledge)}
        rels = [(m["a"].lower(), m["rel"], m["b"].lower()) for m in _RELATION.finditer(knowledge)]
        return cls(owned, profs, rels)

    def people(self) -> set:
        names = {o for _, o in self.owned} | set(self.professions)
        for a, _, b in self.relations:
            names |= {a, b}
        return names


def _resolve_owner_chain(chain: Sequence[str], facts: KnowledgeFacts) -> set:
    base, hops = chain[0], chain[1:]
    if base in facts.people():
        current = {base}
    else:
        current = {n for n, p in facts.professions.items() if p == base}
    for rel in hops:
        current = {a for a, r, b in facts.relations if r == rel and b in current}
    return current


def _find_all(text: str, phrase: str) -> list[tuple[int, int]]:
    pat = re.compile(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", re.IGNORECASE)
    return [(m.start(), m.end()) for m in pat.finditer(text)]


def _target_forms(head: HeadEntity, knowledge: str, aliases: Optional[dict]) -> list[str]:
    if aliases:
        for forms in aliases.values():
            if any(f.lower() == head.text.lower() for f in forms):
                return list(forms)
    facts = KnowledgeFacts.parse(knowledge)
    if not head.owner_chain and head.text.lower() in facts.people():
        return [head.text]
    candidates = facts.owned
    nouns = {obj.split()[-1] for obj, _ in candidates}
    if head.noun in nouns:
        candidates = [c for c in candidates if c[0].split()[-1] == head.noun]
    for attr in head.attributes:
        candidates = [c for c in candidates if attr in c[0].split()]
    if head.owner_chain:
        owners = _resolve_owner_chain(head.owner_chain, facts)
        candidates = [c for c in candidates if c[1] in owners]
    phrases = sorted({obj for obj, _ in candidates})
    if len(phrases) != 1:
        return []
    forms = [phrases[0]]
    if aliases:
        for entity_forms in aliases.values():
            if phrases[0] in entity_forms:
                forms = list(entity_forms)
    return forms


def resolve_corefs(head: HeadEntity, knowledge: str,
                   aliases: Optional[dict] = None) -> list[tuple[int, int]]:
    """Character spans in ``knowledge`` that refer to the head's object.

    Combines exact surface matching, an optional alias table
    (entity id -> surface forms) and possessor propagation through
    ownership/profession/relation sentences. Spans come back in text order;
    an empty list is a valid answer.
    """
    spans = set()
    for form in _target_forms(head, knowledge, aliases):
        spans.update(_find_all(knowledge, form))
    ordered = sorted(spans, key=lambda s: (s[0], -s[1]))
    out = []
    for s in ordered:
        if out and s[0] < out[-1][1]:
            continue
        out.append(s)
    return out


def spans_to_tokens(spans, prompt: Prompt, source: str = "knowledge") -> list:
    """Map character spans of the query/knowledge onto prompt token ranges.

    Spans lost to truncation map to ``None``.
    """
    return [prompt.token_range(source, s, e) for s, e in spans]
