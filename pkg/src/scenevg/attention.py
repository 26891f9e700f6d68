"""Small transformer core: scaled dot-product attention, multi-head
self/cross layers, and a finite-difference gradient checker.

Tensors are ``(rows, d)`` or batched ``(batch, rows, d)``. Key masks are
boolean with ``True`` marking valid (attendable) rows.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import torch
from torch import nn


def attn(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
         key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Softmax(q k^T / sqrt(D_k)) v."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class LayerParams(nn.Module):
    """Parameters of one pre-norm transformer block.

    Holds query/key/value/output projections, a two-layer feed-forward
    network and the two layer norms. ``d`` must be divisible by ``heads``.
    """

    def __init__(self, d: int, heads: int, ff_mult: int = 2):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_k = d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.o_proj = nn.Linear(d, d)
        self.ff_in = nn.Linear(d, ff_mult * d)
        self.ff_out = nn.Linear(ff_mult * d, d)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_ff = nn.LayerNorm(d)

    def feed_forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ff_out(torch.nn.functional.gelu(self.ff_in(x)))


def multi_head(params: LayerParams, x_q: torch.Tensor, x_kv: torch.Tensor,
               key_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Project, split into heads, attend per head, concatenate, project out."""
    d = params.d
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise ValueError(f"inputs must have width {d}")
    h, d_k = params.heads, params.d_k

    def split(t):
        return t.reshape(*t.shape[:-1], h, d_k).transpose(-2, -3)

    q = split(params.q_proj(x_q))
    k = split(params.k_proj(x_kv))
    v = split(params.v_proj(x_kv))
    mask = None if key_mask is None else key_mask.unsqueeze(-2)
    out = attn(q, k, v, mask)
    out = out.transpose(-2, -3).reshape(*x_q.shape[:-1], d)
    return params.o_proj(out)


def cross_layer(params: LayerParams, x: torch.Tensor, ctx: torch.Tensor,
                ctx_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    # the same norm is applied to queries and context so that ctx == x
    # collapses onto self_layer exactly
    x = x + multi_head(params, params.norm_attn(x), params.norm_attn(ctx), ctx_mask)
    return x + params.feed_forward(params.norm_ff(x))


def self_layer(params: LayerParams, x: torch.Tensor,
               mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return cross_layer(params, x, x, mask)


class GradCheckError(RuntimeError):
    pass


def numerical_gradient(loss_fn: Callable[[], torch.Tensor], param: torch.Tensor,
                       epsilon: float) -> torch.Tensor:
    """Central finite differences of ``loss_fn`` with respect to every entry of ``param``."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    out = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            plus = float(loss_fn())
            flat[i] = orig - epsilon
            minus = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise GradCheckError(f"non-finite loss while perturbing entry {i}")
            out[i] = (plus - minus) / (2 * epsilon)
    return grad


def analytic_gradients(loss_fn: Callable[[], torch.Tensor],
                       params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise GradCheckError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
               epsilon: float = 1e-4,
               gradient_fn: Optional[Callable] = None,
               floor: float = 1e-6) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    The error of one parameter tensor is ``||g_a - g_n|| / max(||g_n||, floor)``;
    the maximum over all tensors is returned. The floor absorbs round-off on
    tensors whose true gradient is zero (key biases cancel inside the softmax).
    ``gradient_fn(loss_fn, params)`` replaces autograd as the analytic side
    when given.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [p for p in params]
    gradient_fn = gradient_fn or analytic_gradients
    analytic = gradient_fn(loss_fn, params)
    worst = 0.0
    for p, g in zip(params, analytic):
        numeric = numerical_gradient(loss_fn, p, epsilon)
        err = float((g - numeric).norm() / max(float(numeric.norm()), floor))
        worst = max(worst, err)
    return worst
