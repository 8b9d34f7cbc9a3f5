"""Dense tensor primitives, parameter initialisation and a finite-difference checker.

Tensors are plain ``torch.Tensor`` objects; reverse-mode gradients come from
autograd. The finite-difference checker in :func:`gradcheck` is written
independently of autograd so the two routes can be compared.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch import nn

Tensor = torch.Tensor


class PrecisionMode(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32 if self is PrecisionMode.SINGLE else torch.float64

    @classmethod
    def parse(cls, value) -> "PrecisionMode":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())


class NonFiniteError(FloatingPointError):
    """A forward value or loss contains NaN or Inf."""


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.dim() != 2 or b.dim() != 1:
        raise ValueError(f"affine expects W 2-D and b 1-D, got {tuple(W.shape)} and {tuple(b.shape)}")
    if x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ValueError(
            f"affine shape mismatch: x {tuple(x.shape)}, W {tuple(W.shape)}, b {tuple(b.shape)}"
        )
    return torch.matmul(x, W) + b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    check_finite(x, "softmax input")
    return torch.softmax(x, dim=axis)


def scaled_dot_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    key_mask: Optional[Tensor] = None,
    query_mask: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d) + mask) V over the last two axes.

    ``key_mask`` is boolean ``[..., L_k]`` with True marking valid keys.
    Padded queries (``query_mask`` False) attend uniformly to the valid keys.
    A batch element with no valid key at all raises ``ValueError``.
    """
    d = Q.shape[-1]
    if d <= 0:
        raise ValueError("attention needs d > 0")
    if K.shape[-1] != d or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention shape mismatch: Q {tuple(Q.shape)}, K {tuple(K.shape)}, V {tuple(V.shape)}")
    scores = torch.matmul(Q, K.transpose(-1, -2)) / math.sqrt(d)
    if key_mask is not None:
        key_mask = key_mask.to(torch.bool)
        if not key_mask.any(dim=-1).all():
            raise ValueError("attention row has no valid key positions")
        km = key_mask.unsqueeze(-2)
        scores = scores.masked_fill(~km, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    if query_mask is not None:
        if key_mask is None:
            uniform = torch.full_like(weights, 1.0 / K.shape[-2])
        else:
            valid = key_mask.unsqueeze(-2).to(weights.dtype)
            uniform = (valid / valid.sum(dim=-1, keepdim=True)).expand_as(weights)
        qm = query_mask.to(torch.bool).unsqueeze(-1)
        weights = torch.where(qm, weights, uniform)
    out = torch.matmul(weights, V)
    if return_weights:
        return out, weights
    return out


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on ``leaves``; leaves not reached by ``loss`` get exact zeros."""
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    check_finite(loss.detach(), "loss")
    if loss.requires_grad:
        loss.backward()
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = torch.zeros_like(leaf)


# --- initialisation -------------------------------------------------------

def init_uniform_fan_in(module: nn.Module, generator: torch.Generator) -> None:
    """Re-initialise every parameter from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Linear weights and their biases use the layer's input width; LayerNorm
    keeps scale 1 / shift 0; any other parameter (query tokens, CLS and
    segment embeddings) uses its trailing dimension.
    """
    handled = set()
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                bound = 1.0 / math.sqrt(sub.in_features)
                _uniform_(sub.weight, bound, generator)
                handled.add(id(sub.weight))
                if sub.bias is not None:
                    _uniform_(sub.bias, bound, generator)
                    handled.add(id(sub.bias))
            elif isinstance(sub, nn.LayerNorm):
                if sub.weight is not None:
                    sub.weight.fill_(1.0)
                    sub.bias.zero_()
                    handled.update({id(sub.weight), id(sub.bias)})
        for _, p in module.named_parameters():
            if id(p) in handled:
                continue
            _uniform_(p, 1.0 / math.sqrt(p.shape[-1]), generator)


def _uniform_(p: Tensor, bound: float, generator: torch.Generator) -> None:
    r = torch.rand(p.shape, generator=generator, dtype=torch.float64)
    p.copy_(((r * 2.0 - 1.0) * bound).to(p.dtype))


def mlp(d_in: int, d_hidden: int, d_out: int) -> nn.Sequential:
    """Two-layer perceptron with a GELU in between."""
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.GELU(), nn.Linear(d_hidden, d_out))


class MultiHeadAttention(nn.Module):
    """Projected multi-head wrapper around :func:`scaled_dot_attention`."""

    def __init__(self, d_model: int, n_heads: int = 1, d_kv: Optional[int] = None):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_kv, d_model)
        self.v_proj = nn.Linear(d_kv, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        return x.reshape(*lead, L, self.n_heads, d // self.n_heads).transpose(-2, -3)

    def forward(self, q: Tensor, kv: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        Q, K, V = self._split(self.q_proj(q)), self._split(self.k_proj(kv)), self._split(self.v_proj(kv))
        if key_mask is not None:
            key_mask = key_mask.unsqueeze(-2)  # broadcast over heads
        out = scaled_dot_attention(Q, K, V, key_mask=key_mask)
        out = out.transpose(-2, -3)
        out = out.reshape(*out.shape[:-2], -1)
        return self.out_proj(out)


# --- finite-difference gradient checking ---------------------------------

@dataclass
class GradcheckReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    deterministic: bool
    passed: bool
    worst: Optional[tuple] = None


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-8,
    max_elements: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
) -> GradcheckReport:
    """Compare autograd gradients of scalar ``f(*inputs)`` with central differences.

    Every tensor in ``inputs`` must be float64 with ``requires_grad``. They are
    perturbed in place, so module parameters can be passed directly with an
    ``f`` that closes over the module. An element counts as an error only when
    its absolute discrepancy exceeds ``abs_floor``; the relative error of such
    an element is ``|a - n| / max(|a|, |n|)``. ``max_elements`` caps the number
    of coordinates probed per input (sampled with ``generator``).
    """
    for t in inputs:
        if t.dtype != torch.float64:
            raise TypeError("gradcheck requires double precision inputs")
        if not t.requires_grad:
            raise ValueError("gradcheck inputs must require grad")

    for t in inputs:
        t.grad = None
    with torch.enable_grad():
        out = f(*inputs)
    if out.numel() != 1:
        raise ValueError("gradcheck needs a scalar-valued function")
    base = out.detach().item()
    backward(out, inputs)
    analytic = [t.grad.detach().clone() for t in inputs]
    for t in inputs:
        t.grad = None

    with torch.no_grad():
        again = f(*inputs).item()
    if again != base:
        return GradcheckReport(float("nan"), float("nan"), 0, False, False)

    max_rel = 0.0
    max_abs = 0.0
    worst = None
    n_checked = 0
    with torch.no_grad():
        for which, t in enumerate(inputs):
            flat = t.view(-1)
            n = flat.numel()
            if max_elements is not None and n > max_elements:
                idx = torch.randperm(n, generator=generator)[:max_elements].tolist()
            else:
                idx = range(n)
            a_flat = analytic[which].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f(*inputs).item()
                flat[i] = orig - h
                fm = f(*inputs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = a_flat[i].item()
                err = abs(a - num)
                n_checked += 1
                max_abs = max(max_abs, err)
                if err <= abs_floor:
                    continue
                rel = err / max(abs(a), abs(num))
                if rel > max_rel:
                    max_rel = rel
                    worst = (which, i, a, num)
    return GradcheckReport(max_rel, max_abs, n_checked, True, max_rel < tol, worst)
