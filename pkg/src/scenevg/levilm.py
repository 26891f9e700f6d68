"""Two-stage grounding: fuse image and prompt features, propose anchor
regions, score region-entity alignment and pick a box.

The prompt joins the query and the scene knowledge. Entity rows are pooled
from the fused prompt features over the head entity of the query and, for
the ``Q+K+S`` variant, over its co-referent mentions in the knowledge.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .attention import LayerParams, cross_layer, self_layer
from .encoders import PatchEncoder, TokenEncoder, pad_ids, prepare_image
from .geometry import Box, anchor_grid, iou, pairwise_iou
from .linguistic import extract_head, resolve_corefs, spans_to_tokens
from .optim import check_finite, make_optimizer, milestone_factor, set_lr_factor
from .text import Vocabulary, build_prompt, shuffle_sentences
from .validation import REGIMES, STRATEGIES, VARIANTS, check_choice, check_samples

POSITIVE_IOU = 0.5


@dataclass
class LeViLMConfig:
    image_size: int = 64
    patch_size: int = 16
    d: int = 64
    heads: int = 4
    layers: int = 2
    scales: tuple = (1, 2)
    max_prompt_tokens: int = 128
    text_layers: int = 2
    positions: str = "learned"

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


# -- pure scoring pieces -----------------------------------------------------


def region_anchors(config: LeViLMConfig) -> torch.Tensor:
    """Normalized corner anchors ``(N, 4)``, N = len(scales) * grid**2."""
    return torch.tensor(anchor_grid(1.0, 1.0 / config.grid, config.scales), dtype=torch.float64)


def entity_features(z_prompt: torch.Tensor, spans) -> torch.Tensor:
    """Mean-pool prompt rows over each ``[start, end)`` span; row 0 is the head entity."""
    rows = []
    for a, b in spans:
        if b <= a:
            raise ValueError(f"empty entity span ({a}, {b})")
        if a < 0 or b > z_prompt.shape[-2]:
            raise ValueError(f"span ({a}, {b}) outside prompt of length {z_prompt.shape[-2]}")
        rows.append(z_prompt[..., a:b, :].mean(dim=-2))
    return torch.stack(rows, dim=-2)


def alignment_scores(z_regions: torch.Tensor, z_entities: torch.Tensor) -> torch.Tensor:
    """Region-entity logits ``Z_I Z_E^T`` of shape ``(N, E+1)``."""
    if z_regions.shape[-1] != z_entities.shape[-1]:
        raise ValueError(f"width mismatch {z_regions.shape[-1]} vs {z_entities.shape[-1]}")
    return z_regions @ z_entities.transpose(-1, -2)


def build_target(anchors, gt: Box, mentions: int) -> torch.Tensor:
    """Binary ``(N, E+1)`` target; every entity column marks the same anchors.

    An anchor is positive when its IoU with ``gt`` reaches 0.5. If none does,
    the best-overlapping anchor (lowest index on ties) is forced positive.
    """
    anchors = torch.as_tensor(anchors, dtype=torch.float64)
    gt_t = torch.tensor([gt.as_list()], dtype=torch.float64)
    ious = pairwise_iou(anchors, gt_t)[:, 0]
    positive = ious >= POSITIVE_IOU
    if not positive.any():
        positive[int(torch.argmax(ious))] = True  # argmax returns the first maximum
    return positive.to(torch.float64).unsqueeze(1).repeat(1, mentions + 1)


def matching_loss(scores: torch.Tensor, targets: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean binary cross-entropy with logits over the (valid) score entries."""
    if scores.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(scores.shape)} vs {tuple(targets.shape)}")
    losses = F.binary_cross_entropy_with_logits(scores, targets, reduction="none")
    if mask is None:
        return losses.mean()
    mask = mask.to(losses.dtype)
    return (losses * mask).sum() / mask.sum()


def select_prediction(regions, scores, strategy: str = "H", gt: Box | None = None, rng=0):
    """Pick a region from the head-entity column of ``scores``.

    Candidates are regions whose sigmoid score exceeds 0.5. ``H`` takes the
    highest-scoring candidate, ``R`` a uniformly drawn one, and ``U`` the
    candidate overlapping ``gt`` most, provided that overlap reaches 0.5.
    Returns ``None`` when nothing qualifies. ``rng`` is a seed or a numpy
    Generator.
    """
    check_choice(strategy, STRATEGIES, "strategy")
    if strategy == "U" and gt is None:
        raise ValueError("strategy U needs the ground-truth box")
    scores = np.asarray(scores, dtype=np.float64)
    column = scores[:, 0] if scores.ndim == 2 else scores
    prob = 1.0 / (1.0 + np.exp(-column))
    cand = np.flatnonzero(prob > 0.5)
    if cand.size == 0:
        return None
    if strategy == "H":
        return regions[int(cand[np.argmax(column[cand])])]
    if strategy == "R":
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return regions[int(gen.choice(cand))]
    overlaps = [iou(regions[i], gt) for i in cand]
    best = int(np.argmax(overlaps))
    return regions[int(cand[best])] if overlaps[best] >= POSITIVE_IOU else None


# -- network -------------------------------------------------------------------


class FusionLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.text_self = LayerParams(d, heads)
        # image self-update: plain spatial self-attention
        self.image_self = LayerParams(d, heads)
        self.text_from_image = LayerParams(d, heads)
        self.image_from_text = LayerParams(d, heads)


class LeViLMNet(nn.Module):
    def __init__(self, config: LeViLMConfig, vocab_size: int):
        super().__init__()
        self.config = config
        d = config.d
        self.image_encoder = PatchEncoder(config.image_size, config.patch_size, d)
        self.text_encoder = TokenEncoder(vocab_size, config.max_prompt_tokens, d, config.positions)
        self.text_layers = nn.ModuleList(LayerParams(d, config.heads)
                                         for _ in range(config.text_layers))
        self.fusion = nn.ModuleList(FusionLayer(d, config.heads) for _ in range(config.layers))
        self.image_norm = nn.LayerNorm(d)
        self.text_norm = nn.LayerNorm(d)
        self.region_proj = nn.ModuleList(nn.Linear(d, d) for _ in config.scales)
        self.entity_proj = nn.Linear(d, d)
        self.register_buffer("anchors", region_anchors(config), persistent=False)

    def scoring_parameters(self):
        return list(self.region_proj.parameters()) + list(self.entity_proj.parameters())

    def text_parameters(self):
        return list(self.text_encoder.parameters()) + list(self.text_layers.parameters())

    def fuse(self, h_img, h_txt, txt_mask=None, layers=None):
        """Run ``layers`` fusion blocks (all by default); returns (image, prompt) features."""
        blocks = self.fusion if layers is None else self.fusion[:layers]
        for blk in blocks:
            h_txt = self_layer(blk.text_self, h_txt, txt_mask)
            h_img = self_layer(blk.image_self, h_img)
            h_txt = cross_layer(blk.text_from_image, h_txt, h_img)
            h_img = cross_layer(blk.image_from_text, h_img, h_txt, txt_mask)
        return h_img, h_txt

    def propose_regions(self, z_img):
        """Region features ``(..., N, d)``: each patch projected once per anchor scale."""
        z_img = self.image_norm(z_img)
        return torch.cat([proj(z_img) for proj in self.region_proj], dim=-2)

    def forward(self, images, ids, mask, pool):
        """Logits ``(B, N, E+1)``; ``pool`` ``(B, E+1, M)`` averages prompt rows into entities."""
        h_img = self.image_encoder(images)
        h_txt = self.text_encoder(ids)
        for layer in self.text_layers:
            h_txt = self_layer(layer, h_txt, mask)
        z_img, z_txt = self.fuse(h_img, h_txt, mask)
        regions = self.propose_regions(z_img)
        z_ent = self.entity_proj(pool @ self.text_norm(z_txt))
        return alignment_scores(regions, z_ent)


# -- estimator -----------------------------------------------------------------


PRESETS = {
    "toy": dict(image_size=64, patch_size=16, d=64, heads=4, layers=2, text_layers=2,
                max_prompt_tokens=128, batch_size=32, lr=1e-3, text_lr=1e-3),
    "paper": dict(image_size=640, patch_size=32, d=256, heads=8, layers=6, text_layers=12,
                  max_prompt_tokens=288, batch_size=32, lr=1e-4, text_lr=1e-5),
}


@dataclass
class _Encoded:
    image_id: str
    ids: list
    spans: list  # prompt token ranges, head first
    gt: Box = field(repr=False)


class LeViLM(BaseEstimator):
    """Two-stage region-entity matching grounder.

    ``variant`` selects the text input: ``Q`` (query only), ``Q+K`` (query and
    knowledge, head-entity supervision) or ``Q+K+S`` (additionally supervises
    co-referent mention columns). ``regime`` is ``ZS`` (no training), ``LP``
    (only scoring projections train) or ``FT`` (everything trains).
    """

    def __init__(self, variant="Q+K+S", regime="FT", image_size=64, patch_size=16, d=64,
                 heads=4, layers=2, text_layers=2, scales=(1, 2), max_prompt_tokens=128,
                 positions="learned", epochs=40, batch_size=32, lr=1e-3, text_lr=1e-3, weight_decay=1e-4,
                 decay_milestones=(0.67, 0.89), swap_groups=(), shuffle_knowledge=False,
                 init_checkpoint=None,
                 random_state=0, verbose=False):
        self.variant = variant
        self.regime = regime
        self.image_size = image_size
        self.patch_size = patch_size
        self.d = d
        self.heads = heads
        self.layers = layers
        self.text_layers = text_layers
        self.scales = scales
        self.max_prompt_tokens = max_prompt_tokens
        self.positions = positions
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.text_lr = text_lr
        self.weight_decay = weight_decay
        self.decay_milestones = decay_milestones
        self.swap_groups = swap_groups
        self.shuffle_knowledge = shuffle_knowledge
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state
        self.verbose = verbose

    # preprocessing ----------------------------------------------------------

    def _config(self) -> LeViLMConfig:
        return LeViLMConfig(self.image_size, self.patch_size, self.d, self.heads, self.layers,
                            tuple(self.scales), self.max_prompt_tokens, self.text_layers,
                            self.positions)

    def _prompt_variant(self):
        return "Q" if self.variant == "Q" else "Q+K"

    def _encode(self, sample, use_mentions: bool) -> _Encoded:
        prompt = build_prompt(sample.query, sample.knowledge, self._prompt_variant(),
                              self.max_prompt_tokens)
        if sample.head_span is not None:
            head_span = tuple(sample.head_span)
            head = None
        else:
            head = extract_head(sample.query, sample.tree)
            head_span = head.span
        spans = [prompt.token_range("query", *head_span)]
        if use_mentions:
            if sample.coref is not None:
                mentions = sample.coref
            else:
                head = head or extract_head(sample.query, sample.tree)
                mentions = resolve_corefs(head, sample.knowledge, sample.aliases)
            spans += [r for r in spans_to_tokens(mentions, prompt) if r is not None]
        ids = self.vocab_.encode([t.text for t in prompt.tokens])
        return _Encoded(sample.image_id, ids, spans, sample.bbox)

    def _image(self, sample):
        cache = self._image_cache
        if sample.image_id not in cache:
            cache[sample.image_id] = prepare_image(sample.load_image(), self.image_size)
        return cache[sample.image_id]

    def _batch(self, samples, encoded, with_targets: bool):
        images = torch.stack([self._image(s) for s in samples])
        ids, mask = pad_ids([e.ids for e in encoded], max(len(e.ids) for e in encoded))
        e_max = max(len(e.spans) for e in encoded)
        pool = torch.zeros(len(encoded), e_max, ids.shape[1], dtype=torch.float64)
        col_mask = torch.zeros(len(encoded), e_max, dtype=torch.bool)
        for i, e in enumerate(encoded):
            for j, (a, b) in enumerate(e.spans):
                pool[i, j, a:b] = 1.0 / (b - a)
                col_mask[i, j] = True
        batch = {"images": images, "ids": ids, "mask": mask, "pool": pool, "col_mask": col_mask}
        if with_targets:
            anchors = self.net_.anchors
            targets = torch.zeros(len(encoded), anchors.shape[0], e_max, dtype=torch.float64)
            for i, e in enumerate(encoded):
                t = build_target(anchors, e.gt.normalized(), len(e.spans) - 1)
                targets[i, :, : t.shape[1]] = t
            batch["targets"] = targets
        return batch

    def _loss(self, batch):
        scores = self.net_(batch["images"], batch["ids"], batch["mask"], batch["pool"])
        mask = batch["col_mask"].unsqueeze(1).expand_as(scores)
        per_sample = []
        for i in range(scores.shape[0]):
            per_sample.append(matching_loss(scores[i][mask[i]], batch["targets"][i][mask[i]]))
        return torch.stack(per_sample).mean()

    def _swap_tables(self):
        """Id arrays of each interchangeable token group present in the vocabulary."""
        tables = []
        for group in self.swap_groups:
            ids = sorted({self.vocab_.stoi_[t.lower()] for t in group if t.lower() in self.vocab_.stoi_})
            if len(ids) > 1:
                tables.append(np.array(ids))
        return tables

    def _augment(self, sample, encoded, tables, rng):
        """Training view of ``sample``: knowledge sentences reordered when
        ``shuffle_knowledge`` is set, and each swap group consistently permuted."""
        if self.shuffle_knowledge and self.variant != "Q" and sample.coref is not None:
            knowledge, coref = shuffle_sentences(sample.knowledge, sample.coref, rng)
            encoded = self._encode(replace(sample, knowledge=knowledge, coref=coref),
                                   self.variant == "Q+K+S")
        if not tables:
            return encoded
        lookup = np.arange(len(self.vocab_))
        for ids in tables:
            lookup[ids] = ids[rng.permutation(len(ids))]
        return replace(encoded, ids=lookup[encoded.ids].tolist())

    # fitting ------------------------------------------------------------------

    def _init_model(self, X):
        check_choice(self.variant, VARIANTS, "variant")
        check_choice(self.regime, REGIMES, "regime")
        self._image_cache = {}
        torch.manual_seed(self.random_state)
        if self.init_checkpoint is not None:
            from .checkpoint import load_checkpoint

            loaded = load_checkpoint(self.init_checkpoint, expected_model="levilm")
            self.vocab_ = Vocabulary.from_tokens(loaded["vocab"])
            config = {**loaded["config"], "scales": tuple(loaded["config"]["scales"])}
            self.net_ = LeViLMNet(LeViLMConfig(**config), len(self.vocab_)).double()
            self.net_.load_state_dict(loaded["state"])
        else:
            texts = [s.query for s in X] + [s.knowledge for s in X]
            self.vocab_ = Vocabulary(extra_tokens=("query", "knowledge", ":", ".")).fit(texts)
            self.net_ = LeViLMNet(self._config(), len(self.vocab_)).double()

    def fit(self, X, y=None):
        X = check_samples(X)
        self._init_model(X)
        self.loss_history_ = []
        if self.regime == "ZS":
            return self
        use_mentions = self.variant == "Q+K+S"
        encoded = [self._encode(s, use_mentions) for s in X]
        if self.regime == "LP":
            for p in self.net_.parameters():
                p.requires_grad_(False)
            for p in self.net_.scoring_parameters():
                p.requires_grad_(True)
        text_ids = {id(p) for p in self.net_.text_parameters()}
        optimizer = make_optimizer([
            ([p for p in self.net_.parameters() if id(p) in text_ids], self.text_lr),
            ([p for p in self.net_.parameters() if id(p) not in text_ids], self.lr),
        ], self.weight_decay)
        rng = np.random.default_rng(self.random_state)
        tables = self._swap_tables()
        n = len(X)
        steps_per_epoch = math.ceil(n / self.batch_size)
        total = self.epochs * steps_per_epoch
        step = 0
        self.net_.train()
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            epoch_loss = 0.0
            for b in range(steps_per_epoch):
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                batch = self._batch([X[i] for i in idx],
                                    [self._augment(X[i], encoded[i], tables, rng) for i in idx], True)
                set_lr_factor(optimizer, milestone_factor(step, total, self.decay_milestones))
                loss = self._loss(batch)
                check_finite(loss, f"at epoch {epoch} step {step}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                step += 1
                epoch_loss += float(loss.detach()) * len(idx)
            self.loss_history_.append(epoch_loss / n)
            if self.verbose:
                print(f"epoch {epoch + 1}/{self.epochs} loss {epoch_loss / n:.4f}", flush=True)
        self.net_.eval()
        return self

    # inference ----------------------------------------------------------------

    def decision_function(self, X) -> list:
        """Per-sample logit matrices ``(N, E+1)`` as numpy arrays."""
        check_is_fitted(self, "net_")
        X = check_samples(X, require_gt=False)
        use_mentions = self.variant == "Q+K+S"
        out = []
        with torch.no_grad():
            for start in range(0, len(X), 64):
                chunk = X[start:start + 64]
                encoded = [self._encode(s, use_mentions) for s in chunk]
                batch = self._batch(chunk, encoded, False)
                scores = self.net_(batch["images"], batch["ids"], batch["mask"], batch["pool"])
                for i, e in enumerate(encoded):
                    out.append(scores[i, :, : len(e.spans)].numpy().copy())
        return out

    def regions_for(self, sample) -> list:
        """Anchor boxes in the sample's pixel coordinates, in score-row order."""
        size = sample.bbox.image_size
        return [Box(*a).denormalized(size) for a in self.net_.anchors.tolist()]

    def predict(self, X, strategy: str = "H", random_state=0) -> list:
        """Selected box per sample (``None`` when no region qualifies)."""
        X = check_samples(X, require_gt=(strategy == "U"))
        rng = np.random.default_rng(random_state)
        out = []
        for s, scores in zip(X, self.decision_function(X)):
            out.append(select_prediction(self.regions_for(s), scores, strategy,
                                         s.bbox if strategy == "U" else None, rng))
        return out

    def score(self, X, y=None, strategy: str = "H") -> float:
        """IoU@0.5 accuracy of :meth:`predict` under ``strategy``."""
        X = check_samples(X)
        preds = self.predict(X, strategy)
        return float(np.mean([p is not None and iou(p, s.bbox) >= 0.5 for p, s in zip(preds, X)]))

    def config_dict(self) -> dict:
        return asdict(self._config())
