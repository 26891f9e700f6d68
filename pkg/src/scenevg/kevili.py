"""One-stage grounding by direct box regression.

Image patches first absorb the scene knowledge through a stack of
self-attention and knowledge cross-attention blocks. The knowledge-aware
patches and the query tokens are then fused by a transformer together with a
learnable ``[REG]`` token whose output is decoded by a two-layer MLP into a
normalized ``(cx, cy, w, h)`` box.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .attention import LayerParams, cross_layer, self_layer
from .encoders import PatchEncoder, TokenEncoder, pad_ids, prepare_image
from .geometry import Box, cxcywh_to_xyxy, grounding_loss_tensor, iou
from .optim import check_finite, make_optimizer, set_lr_factor, step_decay_factor
from .text import Vocabulary, words
from .validation import check_choice, check_samples

KEVILI_VARIANTS = ("Q", "Q+K")


@dataclass
class KeviliConfig:
    image_size: int = 64
    patch_size: int = 16
    max_query_tokens: int = 16
    max_knowledge_tokens: int = 112
    d: int = 64
    heads: int = 4
    text_layers: int = 1
    knowledge_layers: int = 2
    interaction_layers: int = 2
    mlp_hidden: int = 64

    def __post_init__(self):
        if self.max_query_tokens < 1 or self.max_knowledge_tokens < 1:
            raise ValueError("token budgets must be positive")


PRESETS = {
    "toy": dict(config=KeviliConfig(), lr=1e-3, encoder_lr=1e-3, batch_size=32,
                epochs=60, decay_epoch=40),
    "paper": dict(config=KeviliConfig(image_size=640, patch_size=32, max_query_tokens=32,
                                      max_knowledge_tokens=256, d=256, heads=8, text_layers=6,
                                      knowledge_layers=6, interaction_layers=6, mlp_hidden=256),
                  lr=1e-4, encoder_lr=1e-5, batch_size=64, epochs=90, decay_epoch=60),
}


class KeviliNet(nn.Module):
    def __init__(self, config: KeviliConfig, vocab_size: int):
        super().__init__()
        self.config = config
        d, h = config.d, config.heads
        self.image_encoder = PatchEncoder(config.image_size, config.patch_size, d)
        self.token_encoder = TokenEncoder(
            vocab_size, max(config.max_query_tokens, config.max_knowledge_tokens), d)
        self.text_blocks = nn.ModuleList(LayerParams(d, h) for _ in range(config.text_layers))
        self.knowledge_self = nn.ModuleList(LayerParams(d, h) for _ in range(config.knowledge_layers))
        self.knowledge_cross = nn.ModuleList(LayerParams(d, h) for _ in range(config.knowledge_layers))
        self.interaction = nn.ModuleList(LayerParams(d, h) for _ in range(config.interaction_layers))
        self.reg_token = nn.Parameter(torch.randn(d) * 0.1)
        self.head_norm = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, config.mlp_hidden), nn.ReLU(),
                                 nn.Linear(config.mlp_hidden, 4))

    def encoder_parameters(self):
        return (list(self.image_encoder.parameters()) + list(self.token_encoder.parameters())
                + list(self.text_blocks.parameters()))

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(images)

    def encode_text(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.token_encoder(ids)
        for blk in self.text_blocks:
            h = self_layer(blk, h, mask)
        return h

    def embed_knowledge(self, h_img, h_know, know_mask=None, layers=None):
        """Each block: patch self-attention, then cross-attention into the knowledge."""
        n = self.config.knowledge_layers if layers is None else layers
        for blk_self, blk_cross in list(zip(self.knowledge_self, self.knowledge_cross))[:n]:
            h_img = self_layer(blk_self, h_img)
            h_img = cross_layer(blk_cross, h_img, h_know, know_mask)
        return h_img

    def fuse_and_regress(self, h_img, h_query, query_mask, reg_token=None):
        """``[REG] + patches + query`` through the interaction stack; MLP on [REG] -> sigmoid box."""
        b = h_img.shape[0]
        reg = (self.reg_token if reg_token is None else reg_token).expand(b, 1, -1)
        seq = torch.cat([reg, h_img, h_query], dim=1)
        mask = torch.cat([torch.ones(b, 1 + h_img.shape[1], dtype=torch.bool), query_mask], dim=1)
        for blk in self.interaction:
            seq = self_layer(blk, seq, mask)
        return torch.sigmoid(self.mlp(self.head_norm(seq[:, 0])))

    def forward(self, images, q_ids, q_mask, k_ids=None, k_mask=None):
        h_img = self.encode_image(images)
        h_query = self.encode_text(q_ids, q_mask)
        if k_ids is None:
            # query-only ablation: a single all-zero knowledge row
            h_know = torch.zeros(images.shape[0], 1, self.config.d, dtype=h_img.dtype)
            k_mask = torch.ones(images.shape[0], 1, dtype=torch.bool)
        else:
            h_know = self.encode_text(k_ids, k_mask)
        h_img = self.embed_knowledge(h_img, h_know, k_mask)
        return self.fuse_and_regress(h_img, h_query, q_mask)


def truncate_knowledge(tokens: list, max_tokens: int) -> list:
    """Keep whole leading sentences that fit in ``max_tokens``; falls back to a hard cut."""
    if len(tokens) <= max_tokens:
        return tokens
    cut = 0
    for i, t in enumerate(tokens[:max_tokens]):
        if t in (".", "!", "?"):
            cut = i + 1
    return tokens[: cut or max_tokens]


class KeViLI(BaseEstimator):
    """Knowledge-embedded one-stage regressor with the sklearn estimator surface.

    ``variant`` is ``"Q+K"`` (knowledge embedded into the patches) or ``"Q"``
    (knowledge replaced by zeros).
    """

    def __init__(self, variant="Q+K", image_size=64, patch_size=16, max_query_tokens=16,
                 max_knowledge_tokens=112, d=64, heads=4, text_layers=1, knowledge_layers=2,
                 interaction_layers=2, mlp_hidden=64, epochs=60, batch_size=32, lr=1e-3,
                 encoder_lr=1e-3, weight_decay=1e-4, decay_epoch=40, max_steps=None,
                 random_state=0, verbose=False):
        self.variant = variant
        self.image_size = image_size
        self.patch_size = patch_size
        self.max_query_tokens = max_query_tokens
        self.max_knowledge_tokens = max_knowledge_tokens
        self.d = d
        self.heads = heads
        self.text_layers = text_layers
        self.knowledge_layers = knowledge_layers
        self.interaction_layers = interaction_layers
        self.mlp_hidden = mlp_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.encoder_lr = encoder_lr
        self.weight_decay = weight_decay
        self.decay_epoch = decay_epoch
        self.max_steps = max_steps
        self.random_state = random_state
        self.verbose = verbose

    def _config(self) -> KeviliConfig:
        return KeviliConfig(self.image_size, self.patch_size, self.max_query_tokens,
                            self.max_knowledge_tokens, self.d, self.heads, self.text_layers,
                            self.knowledge_layers, self.interaction_layers, self.mlp_hidden)

    def config_dict(self) -> dict:
        return asdict(self._config())

    # preprocessing --------------------------------------------------------------

    def _image(self, sample):
        if sample.image_id not in self._image_cache:
            self._image_cache[sample.image_id] = prepare_image(sample.load_image(), self.image_size)
        return self._image_cache[sample.image_id]

    def _query_ids(self, sample):
        toks = words(sample.query)[: self.max_query_tokens]
        if not toks:
            raise ValueError(f"query of sample {sample.sample_id!r} is empty after truncation")
        return self.vocab_.encode(toks)

    def _knowledge_ids(self, sample):
        toks = truncate_knowledge(words(sample.knowledge), self.max_knowledge_tokens)
        return self.vocab_.encode(toks or ["."])

    def make_batch(self, samples):
        images = torch.stack([self._image(s) for s in samples])
        q_ids, q_mask = pad_ids([self._query_ids(s) for s in samples], self.max_query_tokens)
        batch = {"images": images, "q_ids": q_ids, "q_mask": q_mask}
        if self.variant == "Q+K":
            k_seqs = [self._knowledge_ids(s) for s in samples]
            batch["k_ids"], batch["k_mask"] = pad_ids(k_seqs, max(len(k) for k in k_seqs))
        if all(s.bbox is not None and s.bbox.image_size for s in samples):
            batch["gt"] = torch.tensor([s.bbox.normalized().to_center_size() for s in samples],
                                       dtype=torch.float64)
        return batch

    def _forward(self, batch):
        return self.net_(batch["images"], batch["q_ids"], batch["q_mask"],
                         batch.get("k_ids"), batch.get("k_mask"))

    def batch_loss(self, batch) -> torch.Tensor:
        return grounding_loss_tensor(self._forward(batch), batch["gt"])

    # training -----------------------------------------------------------------

    def init_model(self, X):
        check_choice(self.variant, KEVILI_VARIANTS, "variant")
        self._image_cache = {}
        torch.manual_seed(self.random_state)
        texts = [s.query for s in X] + [s.knowledge for s in X]
        self.vocab_ = Vocabulary(extra_tokens=(".",)).fit(texts)
        self.net_ = KeviliNet(self._config(), len(self.vocab_)).double()
        enc = {id(p) for p in self.net_.encoder_parameters()}
        self.optimizer_ = make_optimizer([
            ([p for p in self.net_.parameters() if id(p) in enc], self.encoder_lr),
            ([p for p in self.net_.parameters() if id(p) not in enc], self.lr),
        ], self.weight_decay)
        self.loss_history_ = []
        self.epoch_ = 0
        return self

    def set_epoch(self, epoch: int):
        """Apply the step decay for ``epoch`` (0-based) to every parameter group."""
        self.epoch_ = epoch
        set_lr_factor(self.optimizer_, step_decay_factor(epoch, self.decay_epoch))

    def train_step(self, samples) -> float:
        """One AdamW step on the mean grounding loss of ``samples``."""
        self.net_.train()
        loss = self.batch_loss(self.make_batch(samples))
        check_finite(loss, f"at epoch {self.epoch_}")
        self.optimizer_.zero_grad()
        loss.backward()
        self.optimizer_.step()
        value = float(loss.detach())
        self.loss_history_.append(value)
        return value

    def fit(self, X, y=None):
        X = check_samples(X)
        self.init_model(X)
        rng = np.random.default_rng(self.random_state)
        n = len(X)
        steps_per_epoch = math.ceil(n / self.batch_size)
        step = 0
        for epoch in range(self.epochs):
            self.set_epoch(epoch)
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                if self.max_steps is not None and step >= self.max_steps:
                    break
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                self.train_step([X[i] for i in idx])
                step += 1
            if self.verbose:
                recent = self.loss_history_[-steps_per_epoch:]
                print(f"epoch {epoch + 1}/{self.epochs} loss {np.mean(recent):.4f}", flush=True)
            if self.max_steps is not None and step >= self.max_steps:
                break
        self.net_.eval()
        return self

    # inference ----------------------------------------------------------------

    def predict_normalized(self, X) -> np.ndarray:
        """``(n, 4)`` normalized center-size boxes."""
        check_is_fitted(self, "net_")
        X = check_samples(X, require_gt=False)
        out = []
        self.net_.eval()
        with torch.no_grad():
            for start in range(0, len(X), 64):
                out.append(self._forward(self.make_batch(X[start:start + 64])).numpy())
        return np.concatenate(out)

    def predict(self, X) -> list:
        """Predicted boxes in each sample's pixel coordinates."""
        X = check_samples(X)
        boxes = cxcywh_to_xyxy(torch.from_numpy(self.predict_normalized(X))).tolist()
        return [Box(*b).denormalized(s.bbox.image_size) for b, s in zip(boxes, X)]

    def score(self, X, y=None) -> float:
        """IoU@0.5 accuracy."""
        X = check_samples(X)
        return float(np.mean([iou(p, s.bbox) >= 0.5 for p, s in zip(self.predict(X), X)]))


