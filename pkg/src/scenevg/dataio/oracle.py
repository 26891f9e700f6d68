"""Exhaustive query interpreter over a sample's scene graph.

The oracle reads the query text with a small grammar (attribute filters,
possessor chains, relation hops) and enumerates every scene entity against
it. It shares no code with the linguistic module, so it can serve as the
reference for both the generator and the extractors.
"""

from __future__ import annotations

from ..geometry import Box
from ..text import words


class OracleError(RuntimeError):
    """Zero or several entities satisfy a query: a generator bug."""


_DETS = {"the", "a", "an"}


def _parse(query: str, colors, categories):
    toks = [w for w in words(query) if w != "."]
    chain = []
    # leading possessives: X 's Y 's ... head
    while "'s" in toks:
        i = toks.index("'s")
        owner = [w for w in toks[:i] if w not in _DETS]
        if len(owner) != 1:
            raise OracleError(f"cannot parse possessor in {query!r}")
        chain.append(owner[0])
        toks = toks[i + 1:]
    toks = [w for w in toks if w not in _DETS]
    if not toks:
        raise OracleError(f"no head noun in {query!r}")
    attrs, noun, post = [], None, []
    for j, w in enumerate(toks):
        if w in colors:
            attrs.append(w)
            continue
        noun, post = w, toks[j + 1:]
        break
    if noun is None:
        raise OracleError(f"no head noun in {query!r}")
    if post[:1] == ["in"] and len(post) == 2 and post[1] in colors:
        attrs.append(post[1])
    elif post[:1] == ["that"] and post[2:] == ["owns"] and not chain:
        chain = [post[1]]
    elif post[:2] == ["owned", "by"] and len(post) == 3 and not chain:
        chain = [post[2]]
    elif post[:1] == ["of"] and not chain:
        # "of X 's Y" was already split at the possessive; the remainder is [of, X] + [Y]
        raise OracleError(f"unsupported postmodifier in {query!r}")
    elif post:
        raise OracleError(f"unsupported postmodifier {post} in {query!r}")
    category = noun if noun in categories else None
    return attrs, category, noun, chain


def _split_of(query: str):
    """Rewrite "the item of X's Y" as "X's Y's item"."""
    toks = [w for w in words(query) if w != "."]
    if "of" in toks:
        i = toks.index("of")
        head = [w for w in toks[:i] if w not in _DETS]
        tail = toks[i + 1:]
        return " ".join(tail + ["'s"] + head)
    return query


def candidates(sample, use_knowledge: bool = True) -> list[dict]:
    """All scene entities satisfying the sample's query."""
    scene = sample.scene
    if scene is None:
        raise OracleError(f"sample {sample.sample_id} carries no scene graph")
    entities = scene["entities"]
    colors = {e["color"] for e in entities} | set(scene.get("color_vocab", ()))
    categories = {e["category"] for e in entities} | set(scene.get("category_vocab", ()))
    attrs, category, noun, chain = _parse(_split_of(sample.query), colors, categories)

    people = scene["people"]
    names = {n.lower(): n for n in people}

    def owners_of(chain):
        base, hops = chain[0], chain[1:]
        if base in names:
            current = {names[base]}
        else:
            current = {n for n, info in people.items() if info.get("profession") == base}
            if not current:
                raise OracleError(f"unknown person or profession {base!r}")
        for rel in hops:
            current = {a for a, r, b in scene["relations"] if r == rel and b in current}
        return current

    owners = owners_of(chain) if chain and use_knowledge else None
    out = []
    for e in entities:
        if category is not None and e["category"] != category:
            continue
        if any(e["color"] != a for a in attrs):
            continue
        if owners is not None and e["owner"] not in owners:
            continue
        out.append(e)
    return out


def oracle_solve(sample, use_knowledge: bool = True) -> Box:
    found = candidates(sample, use_knowledge)
    if len(found) != 1:
        raise OracleError(f"query {sample.query!r} has {len(found)} satisfiers")
    return Box(*found[0]["box"], sample.bbox.image_size)
