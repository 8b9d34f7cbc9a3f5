"""Mixture of Q-Formers: top-k gated query-token cross-attention experts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .numcore import MultiHeadAttention, Tensor, affine, softmax


def num_selected(n_experts: int, top_k_ratio: float) -> int:
    k = max(1, int(round(top_k_ratio * n_experts)))
    if not 1 <= k <= n_experts:
        raise ValueError(f"top-k ratio {top_k_ratio} gives k={k} outside [1, {n_experts}]")
    return k


def length_mask(lengths: Tensor, T: int) -> Tensor:
    """Boolean ``[B, T]`` mask, True on valid timesteps."""
    if (lengths < 1).any():
        raise ValueError("sequence length must be at least 1")
    if (lengths > T).any():
        raise ValueError("sequence length exceeds padded length")
    return torch.arange(T, device=lengths.device)[None, :] < lengths[:, None]


def masked_mean(x: Tensor, mask: Tensor) -> Tensor:
    w = mask.to(x.dtype).unsqueeze(-1)
    return (x * w).sum(dim=-2) / w.sum(dim=-2)


@dataclass
class RoutingDecision:
    logits: Tensor
    gate_probs: Tensor  # B x N, full softmax
    selected: Tensor  # B x k expert indices, best first
    weights: Tensor  # B x N, gate_probs on selected entries, 0 elsewhere
    f: Tensor  # N, dispatch fractions (sums to k)
    P: Tensor  # N, mean gate probability (sums to 1)

    @property
    def n_experts(self) -> int:
        return int(self.gate_probs.shape[1])

    @property
    def k(self) -> int:
        return int(self.selected.shape[1])


def route_from_logits(logits: Tensor, k: int) -> RoutingDecision:
    n = logits.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    probs = softmax(logits, axis=-1)
    # stable descending sort: equal probabilities keep the lower index first
    order = torch.sort(probs.detach(), dim=-1, descending=True, stable=True).indices
    selected = order[:, :k]
    chosen = torch.zeros_like(probs, dtype=torch.bool).scatter_(1, selected, True)
    weights = probs * chosen.to(probs.dtype)
    f = chosen.to(probs.dtype).mean(dim=0)
    P = probs.mean(dim=0)
    return RoutingDecision(logits, probs, selected, weights, f, P)


def aux_loss(decision: RoutingDecision) -> Tensor:
    """Load-balancing penalty ``N * sum_i f_i P_i``; ``f`` carries no gradient."""
    return decision.n_experts * torch.sum(decision.f.detach() * decision.P)


class GateRouter(nn.Module):
    def __init__(self, d_in: int, n_experts: int, k: int):
        super().__init__()
        if not 1 <= k <= n_experts:
            raise ValueError(f"k={k} must lie in [1, {n_experts}]")
        self.k = k
        self.proj = nn.Linear(d_in, n_experts)

    def forward(self, x: Tensor, lengths: Tensor) -> RoutingDecision:
        pooled = masked_mean(x, length_mask(lengths, x.shape[1]))
        logits = affine(pooled, self.proj.weight.t(), self.proj.bias)
        return route_from_logits(logits, self.k)


class QFormerExpert(nn.Module):
    """One pre-norm layer: learnable queries cross-attend to the projected input, then an FFN."""

    def __init__(self, d_in: int, d_model: int, n_queries: int, n_heads: int = 1, ffn_mult: int = 2):
        super().__init__()
        self.queries = nn.Parameter(torch.empty(n_queries, d_model))
        self.in_proj = nn.Linear(d_in, d_model)
        self.norm_q = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ffn_mult * d_model), nn.GELU(), nn.Linear(ffn_mult * d_model, d_model)
        )

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        mask = length_mask(lengths, x.shape[1])
        kv = self.norm_kv(self.in_proj(x))
        q = self.norm_q(self.queries).expand(x.shape[0], -1, -1)
        h = self.queries + self.attn(q, kv, key_mask=mask)
        return h + self.ffn(self.norm_ffn(h))


def qformer_forward(expert: QFormerExpert, x: Tensor, length: int) -> Tensor:
    """Single-sample convenience wrapper: ``[T, d_in] -> [l, d_model]``."""
    if length < 1:
        raise ValueError("length must be at least 1")
    return expert(x.unsqueeze(0), torch.tensor([length]))[0]


class MixtureOfQFormers(nn.Module):
    def __init__(self, d_in: int, d_model: int, n_experts: int, k: int, n_queries: int, n_heads: int = 1):
        super().__init__()
        self.router = GateRouter(d_in, n_experts, k)
        self.experts = nn.ModuleList(
            QFormerExpert(d_in, d_model, n_queries, n_heads) for _ in range(n_experts)
        )
        self.n_queries = n_queries
        self.d_model = d_model

    def forward(self, x: Tensor, lengths: Tensor):
        decision = self.router(x, lengths)
        B = x.shape[0]
        out = x.new_zeros(B, self.n_queries, self.d_model)
        parts = []
        for j, expert in enumerate(self.experts):
            rows = (decision.selected == j).any(dim=1).nonzero(as_tuple=True)[0]
            if rows.numel() == 0:
                continue
            y = expert(x[rows], lengths[rows])
            parts.append((rows, decision.weights[rows, j].view(-1, 1, 1) * y))
        for rows, contrib in parts:
            out = out.index_add(0, rows, contrib)
        return out, decision


class LinearBottleneck(nn.Module):
    """MoQ stand-in for ablations: per-step projection, masked mean, tiled to ``l`` tokens."""

    def __init__(self, d_in: int, d_model: int, n_queries: int):
        super().__init__()
        self.proj = nn.Linear(d_in, d_model)
        self.n_queries = n_queries

    def forward(self, x: Tensor, lengths: Tensor):
        pooled = masked_mean(self.proj(x), length_mask(lengths, x.shape[1]))
        return pooled.unsqueeze(1).expand(-1, self.n_queries, -1), None


def build_moq(d_in: int, d_model: int, n_experts: int, top_k_ratio: float, n_queries: int,
              n_heads: int = 1, enabled: bool = True) -> nn.Module:
    if not enabled:
        return LinearBottleneck(d_in, d_model, n_queries)
    return MixtureOfQFormers(d_in, d_model, n_experts, num_selected(n_experts, top_k_ratio), n_queries, n_heads)
