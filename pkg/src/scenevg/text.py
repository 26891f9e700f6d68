"""Word tokenizer and vocabulary shared by both models."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, NamedTuple, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

PAD = "<pad>"
UNK = "<unk>"

_TOKEN_RE = re.compile(r"'s\b|\w+|[^\w\s]")


class Token(NamedTuple):
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Lowercased word/punctuation tokens with character offsets into ``text``.

    Possessive ``'s`` is split off as its own token.
    """
    return [Token(m.group().lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def words(text: str) -> list[str]:
    return [t.text for t in tokenize(text)]


class Vocabulary(BaseEstimator, TransformerMixin):
    """Maps token strings to integer ids.

    ``fit`` takes an iterable of texts; id 0 is ``<pad>`` and id 1 is ``<unk>``.
    """

    def __init__(self, min_count: int = 1, extra_tokens: Sequence[str] = ()):
        self.min_count = min_count
        self.extra_tokens = extra_tokens

    def fit(self, texts: Iterable[str], y=None):
        counts = Counter()
        for text in texts:
            counts.update(words(text))
        itos = [PAD, UNK]
        for tok in self.extra_tokens:
            if tok not in itos:
                itos.append(tok)
        seen = set(itos)
        for tok in sorted(counts):
            if counts[tok] >= self.min_count and tok not in seen:
                itos.append(tok)
                seen.add(tok)
        self.itos_ = itos
        self.stoi_ = {t: i for i, t in enumerate(itos)}
        return self

    def _check_fitted(self):
        if not hasattr(self, "stoi_"):
            raise NotFittedError("Vocabulary is not fitted")

    def __len__(self) -> int:
        self._check_fitted()
        return len(self.itos_)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        self._check_fitted()
        unk = self.stoi_[UNK]
        return [self.stoi_.get(t, unk) for t in tokens]

    def transform(self, texts: Iterable[str]) -> list[list[int]]:
        return [self.encode(words(t)) for t in texts]

    @classmethod
    def from_tokens(cls, itos: Sequence[str]) -> "Vocabulary":
        vocab = cls()
        vocab.itos_ = list(itos)
        vocab.stoi_ = {t: i for i, t in enumerate(vocab.itos_)}
        return vocab


class TruncationError(ValueError):
    pass


class Prompt:
    """Prompt text ``"Query: T. Knowledge: K."`` with a map from prompt tokens
    back to character ranges of the query and knowledge sources.

    ``sources[i]`` is ``(name, start, end)`` for prompt token ``i`` or ``None``
    for template tokens. ``knowledge_kept`` is the number of leading
    knowledge characters that survived truncation.
    """

    def __init__(self, text, tokens, sources, query, knowledge, knowledge_kept):
        self.text = text
        self.tokens = tokens
        self.sources = sources
        self.query = query
        self.knowledge = knowledge
        self.knowledge_kept = knowledge_kept

    def __len__(self):
        return len(self.tokens)

    def __repr__(self):
        return f"Prompt({self.text!r})"

    def token_range(self, source: str, start: int, end: int):
        """Prompt token range ``[a, b)`` covering ``source[start:end]``.

        Returns ``None`` when the span was dropped by truncation.
        """
        if source not in ("query", "knowledge"):
            raise ValueError(f"unknown prompt source {source!r}")
        text = self.query if source == "query" else self.knowledge
        if not (0 <= start < end <= len(text)):
            raise ValueError(f"span ({start}, {end}) lies outside the {source} text")
        if source == "knowledge" and end > self.knowledge_kept:
            return None
        hits = [i for i, src in enumerate(self.sources)
                if src is not None and src[0] == source and src[1] < end and src[2] > start]
        if not hits:
            return None
        return hits[0], hits[-1] + 1


def _sentence_ends(text: str) -> list[int]:
    return [m.end() for m in re.finditer(r"[.!?](?=\s|$)", text)]


def shuffle_sentences(text: str, spans, rng) -> tuple[str, list]:
    """Reorder the sentences of ``text`` by a random permutation.

    Character ``spans`` lying inside a sentence move with it. Returns the new
    text and the remapped spans in their original order.
    """
    ends = _sentence_ends(text)
    if not ends or ends[-1] < len(text.rstrip()):
        ends.append(len(text.rstrip()))
    starts = [0] + ends[:-1]
    sentences = []
    for a, b in zip(starts, ends):
        lead = len(text[a:b]) - len(text[a:b].lstrip())
        sentences.append((a + lead, b))
    order = rng.permutation(len(sentences))
    out, moved = "", {}
    for i in order:
        a, b = sentences[i]
        if out:
            out += " "
        moved[i] = len(out) - a
        out += text[a:b]
    remapped = []
    for x, y in spans:
        i = next(k for k, (a, b) in enumerate(sentences) if a <= x and y <= b)
        remapped.append((x + moved[i], y + moved[i]))
    return out, remapped


def _with_period(segment: str) -> str:
    return segment if segment.endswith((".", "!", "?")) else segment + "."


def build_prompt(query: str, knowledge: str = "", variant: str = "Q+K",
                 max_tokens: int | None = None) -> Prompt:
    """Instantiate the grounding prompt; only the knowledge part is truncated.

    Knowledge is cut at sentence boundaries from the tail until the prompt
    fits ``max_tokens``. A terminal period is not doubled when a segment
    already ends with sentence punctuation.
    """
    query = query.strip()
    if not query:
        raise ValueError("empty query text")
    if variant not in ("Q", "Q+K"):
        raise ValueError(f"unknown prompt variant {variant!r}")
    knowledge = knowledge.strip() if variant == "Q+K" else ""
    if variant == "Q+K" and not knowledge:
        raise ValueError("variant Q+K needs non-empty knowledge")

    head = "Query: "
    q_text = _with_period(query)
    cuts = [len(knowledge)] + sorted(_sentence_ends(knowledge)[:-1], reverse=True) + [0]
    for kept in cuts:
        k_part = knowledge[:kept].rstrip()
        text = head + q_text
        if k_part:
            k_prefix = text + " Knowledge: "
            text = k_prefix + _with_period(k_part)
        tokens = tokenize(text)
        if max_tokens is None or len(tokens) <= max_tokens:
            break
    else:
        raise TruncationError(f"query alone needs {len(tokens)} > {max_tokens} tokens")

    q_off = len(head)
    k_off = len(k_prefix) if k_part else None
    sources = []
    for tok in tokens:
        if q_off <= tok.start and tok.end <= q_off + len(query):
            sources.append(("query", tok.start - q_off, tok.end - q_off))
        elif k_off is not None and k_off <= tok.start and tok.end <= k_off + len(k_part):
            sources.append(("knowledge", tok.start - k_off, tok.end - k_off))
        else:
            sources.append(None)
    return Prompt(text, tokens, sources, query, knowledge, len(k_part))
