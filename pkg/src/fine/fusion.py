"""Transformer fusion over the task-relevant tokens, unimodal decoders and the total objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import torch
from torch import nn

from .numcore import MultiHeadAttention, NonFiniteError, Tensor, mlp


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = mlp(d_model, ffn_mult * d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.ffn(self.norm2(x))


class FusionEncoder(nn.Module):
    """Sequence ``[CLS_m, str_m, utr_m]`` per modality, encoded jointly.

    Returns ``(y_hat [B], z [B x M*d])`` where ``z`` is the unit-normalised
    concatenation of the encoder outputs at the CLS positions.
    """

    def __init__(self, modalities: Sequence[str], dim: int, n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.modalities = tuple(modalities)
        M = len(self.modalities)
        self.cls = nn.Parameter(torch.empty(M, dim))
        self.segment = nn.Parameter(torch.empty(M, dim))
        self.role = nn.Parameter(torch.empty(3, dim))
        self.layers = nn.ModuleList(EncoderLayer(dim, n_heads) for _ in range(n_layers))
        self.norm = nn.LayerNorm(dim)
        self.head = mlp(M * dim, dim, 1)

    def tokens(self, feats: Mapping[str, tuple]) -> Tensor:
        missing = [m for m in self.modalities if m not in feats]
        if missing:
            raise ValueError(f"fusion needs every modality, missing {missing}")
        B = feats[self.modalities[0]][0].shape[0]
        seq = []
        for i, m in enumerate(self.modalities):
            x_str, x_utr = feats[m]
            block = torch.stack([self.cls[i].expand(B, -1), x_str, x_utr], dim=1)
            seq.append(block + self.segment[i] + self.role)
        return torch.cat(seq, dim=1)

    def forward(self, feats: Mapping[str, tuple]):
        x = self.tokens(feats)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        cls_out = x[:, 0::3, :].reshape(x.shape[0], -1)
        y_hat = self.head(cls_out).squeeze(-1)
        z = torch.nn.functional.normalize(cls_out, dim=-1)
        return y_hat, z


def fuse_predict(encoder: FusionEncoder, feats: Mapping[str, tuple]):
    return encoder(feats)


class UnimodalDecoder(nn.Module):
    """Learnable queries cross-attend to one modality's ``[x_str, x_utr]`` tokens."""

    def __init__(self, dim: int, n_queries: int = 1, n_heads: int = 1, ffn_mult: int = 2):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(n_queries, dim))
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, n_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = mlp(dim, ffn_mult * dim, dim)
        self.head = mlp(dim, dim, 1)

    def forward(self, x_str: Tensor, x_utr: Tensor) -> Tensor:
        kv = self.norm_kv(torch.stack([x_str, x_utr], dim=1))
        B = kv.shape[0]
        q = self.norm_q(self.queries).expand(B, -1, -1)
        h = self.queries + self.attn(q, kv)
        h = h + self.ffn(self.norm_ffn(h))
        return self.head(h.mean(dim=1)).squeeze(-1)


def unimodal_predict(decoder: UnimodalDecoder, x_tr: Tensor) -> Tensor:
    """``x_tr`` is ``[x_str, x_utr]`` concatenated (B x 2d)."""
    d = x_tr.shape[-1] // 2
    return decoder(x_tr[:, :d], x_tr[:, d:])


@dataclass
class LossWeights:
    lambda_up: float = 0.5
    lambda_cl: float = 3.0
    lambda_aux: float = 1.0
    beta_mi: float = 0.5

    def __post_init__(self):
        for k in ("lambda_up", "lambda_cl", "lambda_aux", "beta_mi"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass
class LossReport:
    l_mp: Tensor
    l_up: Tensor
    l_cl: Tensor
    l_aux: Tensor
    l_mi: Tensor
    l_total: Tensor
    mi: Optional[object] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> Dict[str, float]:
        out = {k: float(getattr(self, k).detach()) for k in ("l_mp", "l_up", "l_cl", "l_aux", "l_mi", "l_total")}
        if self.mi is not None:
            out.update(self.mi.as_floats())
        return out


def combine_total(l_mp, l_up, l_cl, l_aux, l_mi, w: LossWeights):
    return l_mp + w.lambda_up * l_up + w.lambda_cl * l_cl + w.lambda_aux * l_aux + w.beta_mi * l_mi


def _scalar(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else like.new_tensor(float(x))


def total_loss(y_hat: Tensor, y_hat_uni: Sequence[Tensor], y: Tensor, l_cl, l_aux, l_mi,
               weights: LossWeights, mi=None) -> LossReport:
    y = y.to(y_hat.dtype)
    l_mp = torch.mean((y_hat - y) ** 2)
    l_up = sum(torch.mean((p - y) ** 2) for p in y_hat_uni) / len(y_hat_uni)
    l_cl, l_aux, l_mi = (_scalar(v, l_mp) for v in (l_cl, l_aux, l_mi))
    parts = {"l_mp": l_mp, "l_up": l_up, "l_cl": l_cl, "l_aux": l_aux, "l_mi": l_mi}
    for name, v in parts.items():
        if not math.isfinite(float(v.detach())):
            raise NonFiniteError(f"loss component {name} is not finite")
    l_total = combine_total(l_mp, l_up, l_cl, l_aux, l_mi, weights)
    return LossReport(l_mp, l_up, l_cl, l_aux, l_mi, l_total, mi)
