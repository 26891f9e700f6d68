"""Synthetic (image, scene knowledge, query) generator.

Each image holds a few flat-colored objects. Every story binds the objects
to owners and adds professions, relations and filler facts; queries refer to
one object at three difficulty levels:

* easy: visual attributes only ("the red cup");
* medium: one knowledge fact plus an ambiguous category cue ("Mia's cup",
  where several cups are visible);
* hard: no visual attribute of the target; usually a chain of two
  knowledge facts ("Jake's colleague's item", "the pilot's thing"), or with
  ``one_hop_rate`` a single ownership fact ("Mia's item").

Gold dependency trees, head spans and coreference chains are emitted from
the templates that realize the text, and each query is checked against the
exhaustive oracle.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .. import lexicon
from ..geometry import Box, anchor_grid, area_bin, iou
from ..linguistic import DependencyTree, TreeToken
from .oracle import OracleError, candidates
from .records import DIFFICULTIES, GroundingSample

MEDIUM_DEFINITION = (
    "medium = owner name (one knowledge fact) + object category shared by at least "
    "two visible objects (weak, ambiguous visual cue)"
)

# side-length ranges per area bin; the medium bin is split around the point
# where the 1x and 2x anchors tie (side ~90.5 px for 64 px cells)
_SIZE_RANGES = {
    "small": [(44, 62)],
    "medium": [(66, 86), (96, 126)],
    "large": [(130, 170)],
}


class GeneratorConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    image_size: int = 256
    cell_size: int = 64
    anchor_scales: tuple = (1, 2)
    min_entities: int = 3
    max_entities: int = 4
    colors: tuple = tuple(lexicon.COLORS)
    categories: tuple = tuple(lexicon.CATEGORIES)
    names: tuple = lexicon.NAMES
    professions: tuple = lexicon.PROFESSIONS
    relations: tuple = lexicon.RELATIONS
    stories_per_image: int = 2
    queries_per_story: int = 5
    difficulty_mix: tuple = (0.3, 0.3, 0.4)
    size_mix: tuple = (0.3, 0.4, 0.3)
    min_anchor_iou: float = 0.55
    # chance of a non-visual filler sentence per person / a remark per object
    filler_rate: float = 1.0
    remark_rate: float = 0.4
    # share of hard queries that need a single ownership fact ("Mia's item")
    one_hop_rate: float = 0.0
    seed: int = 0

    def validate(self):
        if self.min_entities < 2:
            raise GeneratorConfigError("at least two entities are needed for uniqueness pressure")
        if self.max_entities < self.min_entities:
            raise GeneratorConfigError("max_entities < min_entities")
        if len(self.colors) < self.max_entities:
            raise GeneratorConfigError(
                f"{len(self.colors)} colors cannot keep {self.max_entities} objects distinguishable")
        if len(self.categories) < 1 or len(self.categories) > len(lexicon.CATEGORIES):
            raise GeneratorConfigError("categories must be a non-empty subset of the lexicon")
        if len(self.names) < self.max_entities or len(self.professions) < self.max_entities:
            raise GeneratorConfigError("name/profession pools are too small for unique owners")
        if any(c not in lexicon.COLORS for c in self.colors):
            raise GeneratorConfigError("unknown color in config")
        if any(c not in lexicon.CATEGORIES for c in self.categories):
            raise GeneratorConfigError("unknown category in config")
        for mix in (self.difficulty_mix, self.size_mix):
            if len(mix) != 3 or min(mix) < 0 or not math.isclose(sum(mix), 1.0):
                raise GeneratorConfigError(f"mixture {mix} must be 3 non-negative weights summing to 1")
        if self.image_size % self.cell_size:
            raise GeneratorConfigError("image_size must be a multiple of cell_size")
        if not all(0 <= r <= 1 for r in (self.filler_rate, self.remark_rate, self.one_hop_rate)):
            raise GeneratorConfigError("filler_rate, remark_rate and one_hop_rate must lie in [0, 1]")
        if self.stories_per_image < 1 or self.queries_per_story < 1:
            raise GeneratorConfigError("need at least one story and one query")


def corpus_preset(**overrides) -> GeneratorConfig:
    """Two stories with five queries per image, as in the annotated corpus."""
    return GeneratorConfig(**{"stories_per_image": 2, "queries_per_story": 5, **overrides})


# -- text realization ----------------------------------------------------------


class _Phrase:
    """Token list with dependency arcs, joined into text with char offsets."""

    def __init__(self, items):
        # items: (word, pos, head index or -1, label)
        self.items = items

    def realize(self):
        text, tokens = "", []
        for word, pos, _, _ in self.items:
            if text and word not in ("'s", ".", ","):
                text += " "
            start = len(text)
            text += word
            tokens.append(TreeToken(word, pos, start, len(text)))
        arcs = [(h, d, lab) for d, (_, _, h, lab) in enumerate(self.items)]
        return text, DependencyTree(tokens, arcs)


def _query_phrase(template: str, slots: dict):
    """Build the query tokens for ``template``; returns (phrase, head token range)."""
    s = slots
    if template == "E1":  # the red cup
        items = [("the", "DET", 2, "det"), (s["color"], "ADJ", 2, "amod"),
                 (s["cat"], "NOUN", -1, "root")]
        return _Phrase(items), (1, 3)
    if template == "E2":  # the cup in red
        items = [("the", "DET", 1, "det"), (s["cat"], "NOUN", -1, "root"),
                 ("in", "ADP", 3, "case"), (s["color"], "NOUN", 1, "nmod")]
        return _Phrase(items), (1, 2)
    if template == "M1":  # Mia's cup
        items = [(s["name"], "PROPN", 2, "poss"), ("'s", "PART", 0, "case"),
                 (s["cat"], "NOUN", -1, "root")]
        return _Phrase(items), (2, 3)
    if template == "M2":  # the cup that Mia owns
        items = [("the", "DET", 1, "det"), (s["cat"], "NOUN", -1, "root"),
                 ("that", "PRON", 4, "obj"), (s["name"], "PROPN", 4, "nsubj"),
                 ("owns", "VERB", 1, "acl:relcl")]
        return _Phrase(items), (1, 2)
    if template == "H5":  # Mia's item
        items = [(s["name"], "PROPN", 2, "poss"), ("'s", "PART", 0, "case"),
                 (s["generic"], "NOUN", -1, "root")]
        return _Phrase(items), (2, 3)
    if template == "H6":  # the item that Mia owns
        items = [("the", "DET", 1, "det"), (s["generic"], "NOUN", -1, "root"),
                 ("that", "PRON", 4, "obj"), (s["name"], "PROPN", 4, "nsubj"),
                 ("owns", "VERB", 1, "acl:relcl")]
        return _Phrase(items), (1, 2)
    if template == "H1":  # Jake's colleague's item
        items = [(s["name"], "PROPN", 2, "poss"), ("'s", "PART", 0, "case"),
                 (s["rel"], "NOUN", 4, "poss"), ("'s", "PART", 2, "case"),
                 (s["generic"], "NOUN", -1, "root")]
        return _Phrase(items), (4, 5)
    if template == "H2":  # the item of Jake's colleague
        items = [("the", "DET", 1, "det"), (s["generic"], "NOUN", -1, "root"),
                 ("of", "ADP", 5, "case"), (s["name"], "PROPN", 5, "poss"),
                 ("'s", "PART", 3, "case"), (s["rel"], "NOUN", 1, "nmod")]
        return _Phrase(items), (1, 2)
    if template == "H3":  # the pilot's item
        items = [("the", "DET", 1, "det"), (s["prof"], "NOUN", 3, "poss"),
                 ("'s", "PART", 1, "case"), (s["generic"], "NOUN", -1, "root")]
        return _Phrase(items), (3, 4)
    if template == "H4":  # the item owned by the pilot
        items = [("the", "DET", 1, "det"), (s["generic"], "NOUN", -1, "root"),
                 ("owned", "VERB", 1, "acl"), ("by", "ADP", 5, "case"),
                 ("the", "DET", 5, "det"), (s["prof"], "NOUN", 2, "obl")]
        return _Phrase(items), (1, 2)
    raise ValueError(f"unknown query template {template!r}")


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


class _Story:
    """Accumulates sentences and records where each object phrase lands."""

    def __init__(self):
        self.sentences = []  # (text, [(entity id, offset in sentence, length)])

    def add(self, text, mentions=()):
        self.sentences.append((text, list(mentions)))

    def realize(self):
        text, spans = "", {}
        for sent, mentions in self.sentences:
            if text:
                text += " "
            base = len(text)
            text += sent
            for eid, off, length in mentions:
                spans.setdefault(eid, []).append((base + off, base + off + length))
        return text, spans


# -- generator -----------------------------------------------------------------


class SceneGenerator:
    """Seeded generator; ``manifest_`` tallies what the last ``generate`` call produced."""

    def __init__(self, config: GeneratorConfig | None = None):
        self.config = config or GeneratorConfig()
        self.config.validate()
        self.anchors = anchor_grid(self.config.image_size, self.config.cell_size,
                                    self.config.anchor_scales)

    # scene layout ---------------------------------------------------------

    def _place(self, rng, bins):
        cfg = self.config
        size = cfg.image_size
        n_cells = size // cfg.cell_size
        boxes = []
        for b in bins:
            for _ in range(400):
                lo, hi = _SIZE_RANGES[b][rng.integers(len(_SIZE_RANGES[b]))]
                side = 2 * int(rng.integers(lo // 2, hi // 2 + 1))
                r, c = rng.integers(n_cells, size=2)
                cx = int((c + 0.5) * cfg.cell_size) + int(rng.integers(-4, 5))
                cy = int((r + 0.5) * cfg.cell_size) + int(rng.integers(-4, 5))
                raw = (cx - side // 2, cy - side // 2, cx + side // 2, cy + side // 2)
                clipped = (max(0, raw[0]), max(0, raw[1]), min(size, raw[2]), min(size, raw[3]))
                box = Box(*map(float, clipped), (size, size))
                if area_bin(box) != b:
                    continue
                if max(iou(box, a) for a in self.anchors) < cfg.min_anchor_iou:
                    continue
                padded = Box(box.x1 - 4, box.y1 - 4, box.x2 + 4, box.y2 + 4)
                if any(iou(padded, o) > 0 for o, _ in boxes):
                    continue
                boxes.append((box, raw))
                break
            else:
                return None
        return boxes

    def _scene(self, rng):
        cfg = self.config
        k = int(rng.integers(cfg.min_entities, cfg.max_entities + 1))
        colors = list(rng.choice(cfg.colors, size=k, replace=False))
        cats = [str(rng.choice(cfg.categories))]
        cats.append(cats[0])  # at least one ambiguous category per image
        cats += [str(rng.choice(cfg.categories)) for _ in range(k - 2)]
        cats = [cats[i] for i in rng.permutation(k)]
        while True:
            bins = [("small", "medium", "large")[rng.choice(3, p=cfg.size_mix)] for _ in range(k)]
            # large objects first: they are the hardest to fit
            order = sorted(range(k), key=lambda i: ("large", "medium", "small").index(bins[i]))
            placed = self._place(rng, [bins[i] for i in order])
            if placed is not None:
                break
        boxes = [None] * k
        for slot, i in enumerate(order):
            boxes[i] = placed[slot]
        entities = []
        for i in range(k):
            box, raw = boxes[i]
            entities.append({"id": f"obj{i}", "category": cats[i], "color": str(colors[i]),
                             "box": box.as_list(), "raw": list(raw), "bin": bins[i]})
        return entities

    def render(self, entities) -> np.ndarray:
        size = self.config.image_size
        img = Image.new("RGB", (size, size), (236, 236, 236))
        draw = ImageDraw.Draw(img)
        for e in entities:
            x1, y1, x2, y2 = e["raw"]
            fill = lexicon.COLORS[e["color"]]
            shape = lexicon.CATEGORIES[e["category"]]
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            if shape == "circle":
                draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=fill)
            elif shape == "square":
                draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=fill)
            elif shape == "triangle":
                draw.polygon([(x1, y2 - 1), (cx, y1), (x2 - 1, y2 - 1)], fill=fill)
            else:
                draw.polygon([(cx, y1), (x2 - 1, cy), (cx, y2 - 1), (x1, cy)], fill=fill)
        return np.asarray(img)

    # stories --------------------------------------------------------------

    def _story(self, rng, entities):
        cfg = self.config
        k = len(entities)
        names = [str(n) for n in rng.choice(cfg.names, size=k, replace=False)]
        profs = [str(p) for p in rng.choice(cfg.professions, size=k, replace=False)]
        owners = {e["id"]: names[i] for i, e in enumerate(entities)}
        people = {names[i]: {"profession": profs[i]} for i in range(k)}

        relations, used = [], set()
        for _ in range(k + 1):
            a, b = (str(x) for x in rng.choice(names, size=2, replace=False))
            rel = str(rng.choice(cfg.relations))
            if (b, rel) in used or any({a, b} == {x, y} for x, _, y in relations):
                continue
            used.add((b, rel))
            relations.append((a, rel, b))

        story = _Story()
        bindings = []
        for e in entities:
            owner, phrase = owners[e["id"]], f"{e['color']} {e['category']}"
            form = int(rng.integers(3))
            if form == 0:
                sent = f"{owner} owns the {phrase}."
                off = len(owner) + len(" owns the ")
            elif form == 1:
                sent = f"{owner} brought the {phrase}."
                off = len(owner) + len(" brought the ")
            else:
                sent = f"The {phrase} belongs to {owner}."
                off = len("The ")
            bindings.append((sent, [(e["id"], off, len(phrase))]))
        rest = []
        for name in names:
            prof = people[name]["profession"]
            if rng.random() < 0.5:
                rest.append((f"{name} is {_article(prof)} {prof}.", []))
            else:
                rest.append((f"{name} works as {_article(prof)} {prof}.", []))
            if cfg.filler_rate < 1 and rng.random() >= cfg.filler_rate:
                continue
            kind = int(rng.integers(3))
            if kind == 0:
                rest.append((f"{name} feels {rng.choice(lexicon.EMOTIONS)} today.", []))
            elif kind == 1:
                rest.append((f"{name} loves {rng.choice(lexicon.HOBBIES)}.", []))
            else:
                rest.append((f"{name} grew up in {rng.choice(lexicon.CITIES)}.", []))
        for a, rel, b in relations:
            rest.append((f"{a} is {b}'s {rel}.", []))
        for e in entities:
            if rng.random() < cfg.remark_rate:
                phrase = f"{e['color']} {e['category']}"
                rest.append((f"The {phrase} {rng.choice(lexicon.REMARKS)}.",
                             [(e["id"], len("The "), len(phrase))]))
        for i in rng.permutation(len(bindings)):
            story.add(*bindings[i])
        for i in rng.permutation(len(rest)):
            story.add(*rest[i])
        text, spans = story.realize()
        aliases = {e["id"]: [f"{e['color']} {e['category']}"] for e in entities}
        aliases.update({f"person:{n}": [n] for n in names})
        scene = {
            "entities": [{"id": e["id"], "category": e["category"], "color": e["color"],
                          "box": e["box"], "owner": owners[e["id"]]} for e in entities],
            "people": people,
            "relations": [list(r) for r in relations],
        }
        return text, spans, aliases, scene

    # queries --------------------------------------------------------------

    def _query(self, rng, difficulty, scene):
        cfg = self.config
        ents = scene["entities"]
        counts = Counter(e["category"] for e in ents)
        if difficulty == "easy":
            target = ents[rng.integers(len(ents))]
            template = ("E1", "E2")[rng.integers(2)]
            slots = {"color": target["color"], "cat": target["category"]}
        elif difficulty == "medium":
            pool = [e for e in ents if counts[e["category"]] > 1]
            target = pool[rng.integers(len(pool))]
            template = ("M1", "M2")[rng.integers(2)]
            slots = {"name": target["owner"], "cat": target["category"]}
        else:
            target = ents[rng.integers(len(ents))]
            owner = target["owner"]
            hops = [(b, r) for a, r, b in scene["relations"] if a == owner]
            generic = str(rng.choice(lexicon.GENERIC_NOUNS))
            if cfg.one_hop_rate > 0 and rng.random() < cfg.one_hop_rate:
                template = ("H5", "H6")[rng.integers(2)]
                slots = {"name": owner, "generic": generic}
            elif hops and rng.random() < 0.6:
                b, rel = hops[rng.integers(len(hops))]
                template = ("H1", "H2")[rng.integers(2)]
                slots = {"name": b, "rel": rel, "generic": generic}
            else:
                template = ("H3", "H4")[rng.integers(2)]
                slots = {"prof": scene["people"][owner]["profession"], "generic": generic}
        phrase, head_tokens = _query_phrase(template, slots)
        text, tree = phrase.realize()
        head_span = (tree.tokens[head_tokens[0]].start, tree.tokens[head_tokens[1] - 1].end)
        return target, text, tree, head_span, template

    def generate(self, n: int) -> list[GroundingSample]:
        cfg = self.config
        per_image = cfg.stories_per_image * cfg.queries_per_story
        n_images = -(-n // per_image)
        samples = []
        diff_counts, bin_counts, template_counts = Counter(), Counter(), Counter()
        for idx in range(n_images):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, idx]))
            entities = self._scene(rng)
            pixels = self.render(entities)
            image_id = f"img{idx:05d}"
            by_id = {e["id"]: e for e in entities}
            for s in range(cfg.stories_per_image):
                knowledge, spans, aliases, scene = self._story(rng, entities)
                scene["color_vocab"] = list(cfg.colors)
                scene["category_vocab"] = list(cfg.categories)
                for q in range(cfg.queries_per_story):
                    if len(samples) == n:
                        break
                    difficulty = DIFFICULTIES[rng.choice(3, p=cfg.difficulty_mix)]
                    target, text, tree, head_span, template = self._query(rng, difficulty, scene)
                    sample = GroundingSample(
                        sample_id=f"{image_id}-s{s}-q{q}",
                        image_id=image_id,
                        knowledge=knowledge,
                        query=text,
                        bbox=Box(*target["box"], (cfg.image_size, cfg.image_size)),
                        difficulty=difficulty,
                        image_path=f"images/{image_id}.png",
                        tree=tree,
                        head_span=head_span,
                        coref=list(spans.get(target["id"], [])),
                        aliases=aliases,
                        scene=scene,
                        image=pixels,
                    )
                    found = candidates(sample)
                    if len(found) != 1 or found[0]["id"] != target["id"]:
                        raise OracleError(f"generated query {text!r} is not unique")
                    samples.append(sample)
                    diff_counts[difficulty] += 1
                    bin_counts[by_id[target["id"]]["bin"]] += 1
                    template_counts[template] += 1
        self.manifest_ = {
            "n_samples": len(samples),
            "n_images": n_images,
            "difficulty_counts": {d: diff_counts[d] for d in DIFFICULTIES},
            "area_bin_counts": {b: bin_counts[b] for b in ("small", "medium", "large")},
            "template_counts": dict(sorted(template_counts.items())),
            "medium_definition": MEDIUM_DEFINITION,
            "config": _jsonable(asdict(cfg)),
        }
        return samples


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def generate(config: GeneratorConfig, n: int) -> list[GroundingSample]:
    return SceneGenerator(config).generate(n)
