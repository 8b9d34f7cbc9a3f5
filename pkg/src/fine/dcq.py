"""Dynamic contrastive queue and the angle-compensated contrastive loss."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import torch

from .numcore import Tensor


@dataclass
class AcconConfig:
    tau: float = 0.1
    epsilon: float = 1e-8
    y_min: float = -3.0
    y_max: float = 3.0
    alpha: float = 0.3
    s_min: int = 64
    bins: int = 7

    def validate(self) -> None:
        if self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("tau and epsilon must be positive")
        if self.bins < 2:
            raise ValueError("need at least two label bins")
        if not self.y_max > self.y_min:
            raise ValueError("label range is empty")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha={self.alpha} outside (0, 1]")
        if self.s_min < 1:
            raise ValueError("s_min must be at least 1")


def subqueue_capacity(n_i: int, alpha: float, s_min: int) -> int:
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha={alpha} outside (0, 1]")
    if n_i < 0 or s_min < 1:
        raise ValueError("need n_i >= 0 and s_min >= 1")
    # round first so that e.g. 0.7 * 10 = 7.000000000000001 does not ceil to 8
    return max(math.ceil(round(alpha * n_i, 9)), int(s_min))


def bin_edges(y_min: float, y_max: float, k: int) -> Tensor:
    return torch.linspace(y_min, y_max, k + 1, dtype=torch.float64)


def bin_index(y: Tensor, y_min: float, y_max: float, k: int) -> Tensor:
    """Equal-width bin of each label; out-of-range labels land in the boundary bins."""
    y = torch.as_tensor(y, dtype=torch.float64)
    width = (y_max - y_min) / k
    idx = torch.floor((y.clamp(y_min, y_max) - y_min) / width).long()
    return idx.clamp(0, k - 1)


class QueueState:
    """``K`` label-bin FIFO sub-queues of unit-norm embeddings."""

    def __init__(self, capacities: Sequence[int], y_min: float, y_max: float):
        if len(capacities) < 2:
            raise ValueError("need at least two sub-queues")
        self.capacities = [int(c) for c in capacities]
        self.y_min, self.y_max = float(y_min), float(y_max)
        self.queues: List[deque] = [deque(maxlen=c) for c in self.capacities]
        self.clamped = 0
        self.inserted = 0

    @classmethod
    def from_counts(cls, counts: Sequence[int], cfg: AcconConfig) -> "QueueState":
        cfg.validate()
        if len(counts) != cfg.bins:
            raise ValueError("one training count per bin required")
        caps = [subqueue_capacity(int(n), cfg.alpha, cfg.s_min) for n in counts]
        return cls(caps, cfg.y_min, cfg.y_max)

    @classmethod
    def for_labels(cls, labels: Tensor, cfg: AcconConfig) -> "QueueState":
        idx = bin_index(labels, cfg.y_min, cfg.y_max, cfg.bins)
        counts = torch.bincount(idx, minlength=cfg.bins).tolist()
        return cls.from_counts(counts, cfg)

    @property
    def k(self) -> int:
        return len(self.capacities)

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def update(self, z: Tensor, y: Tensor) -> None:
        z = torch.nn.functional.normalize(z.detach().to(torch.float64), dim=-1)
        y = torch.as_tensor(y).detach().to(torch.float64).reshape(-1)
        out_of_range = (y < self.y_min) | (y > self.y_max)
        self.clamped += int(out_of_range.sum())
        y = y.clamp(self.y_min, self.y_max)
        bins = bin_index(y, self.y_min, self.y_max, self.k)
        for row, label, b in zip(z, y.tolist(), bins.tolist()):
            self.queues[b].append((row.clone(), label))
            self.inserted += 1

    def snapshot(self):
        """All stored entries as ``(Z [M x d], y [M])`` in bin-then-FIFO order."""
        rows = [e for q in self.queues for e in q]
        if not rows:
            return None, None
        Z = torch.stack([r[0] for r in rows])
        y = torch.tensor([r[1] for r in rows], dtype=torch.float64)
        return Z, y

    def state_dict(self) -> dict:
        return {
            "capacities": list(self.capacities),
            "y_range": (self.y_min, self.y_max),
            "entries": [[(z.clone(), lab) for z, lab in q] for q in self.queues],
            "clamped": self.clamped,
            "inserted": self.inserted,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "QueueState":
        q = cls(state["capacities"], *state["y_range"])
        for b, entries in enumerate(state["entries"]):
            q.queues[b].extend((z.clone(), lab) for z, lab in entries)
        q.clamped = state["clamped"]
        q.inserted = state["inserted"]
        return q


def compensation_angle(y_anc, y_neg, y_min: float, y_max: float):
    """``pi * (1 - |y_neg - y_anc| / (y_max - y_min))`` clipped to ``[0, pi]``."""
    if y_max == y_min:
        raise ValueError("compensation angle needs a non-empty label range")
    as_t = lambda v: v if isinstance(v, Tensor) else torch.as_tensor(v, dtype=torch.float64)  # noqa: E731
    gap = torch.abs(as_t(y_neg) - as_t(y_anc))
    phi = math.pi * (1.0 - gap / (y_max - y_min))
    return phi.clamp(0.0, math.pi)


def compensated_cosine(c, phi, epsilon: float = 1e-8):
    """``c cos(phi) - |sin(phi)| sqrt(1 - c^2 + eps)``, i.e. ``cos(arccos(c) + phi)`` as eps -> 0."""
    c = torch.as_tensor(c)
    phi = torch.as_tensor(phi, dtype=c.dtype if c.is_floating_point() else torch.float64)
    if (c.abs() > 1.0 + 1e-6).any():
        raise ValueError("cosine outside [-1, 1]")
    c = c.clamp(-1.0, 1.0)
    return c * torch.cos(phi) - torch.abs(torch.sin(phi)) * torch.sqrt(1.0 - c * c + epsilon)


def accon_loss(
    z: Tensor,
    y: Tensor,
    state: Optional[QueueState],
    cfg: AcconConfig,
    stats: Optional[Dict[str, int]] = None,
) -> Tensor:
    """Angle-compensated supervised contrastive loss over the batch plus the queue.

    Candidates for anchor ``i`` are the other batch rows and every queued entry;
    positives share the anchor's label bin. Queue entries carry no gradient.
    """
    z = torch.nn.functional.normalize(z, dim=-1)
    B = z.shape[0]
    y = y.to(z.dtype).reshape(-1)
    cand_z, cand_y = z, y
    self_mask = torch.eye(B, dtype=torch.bool)
    if state is not None and len(state):
        Zq, yq = state.snapshot()
        cand_z = torch.cat([z, Zq.to(z.dtype)], dim=0)
        cand_y = torch.cat([y, yq.to(z.dtype)], dim=0)
        self_mask = torch.cat([self_mask, torch.zeros(B, Zq.shape[0], dtype=torch.bool)], dim=1)
    valid = ~self_mask
    if stats is not None:
        stats["empty_pool"] = stats.get("empty_pool", 0) + int(cand_z.shape[0] - 1 == 0)
    if cand_z.shape[0] - 1 == 0:
        if stats is not None:
            stats["skipped"] = stats.get("skipped", 0) + B
        return z.sum() * 0.0

    c = (z @ cand_z.t()).clamp(-1.0, 1.0)
    b_anchor = bin_index(y.detach(), cfg.y_min, cfg.y_max, cfg.bins)
    b_cand = bin_index(cand_y.detach(), cfg.y_min, cfg.y_max, cfg.bins)
    pos = (b_anchor[:, None] == b_cand[None, :]) & valid
    neg = (~pos) & valid
    phi = compensation_angle(y.detach()[:, None], cand_y.detach()[None, :], cfg.y_min, cfg.y_max).to(z.dtype)
    logits = torch.where(pos, c, compensated_cosine(c, phi, cfg.epsilon)) / cfg.tau
    logits = logits.masked_fill(~valid, float("-inf"))
    log_den = torch.logsumexp(logits, dim=1)
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + int((~has_pos).sum())
    if not has_pos.any():
        return z.sum() * 0.0
    pos_logit_sum = torch.where(pos, c / cfg.tau, torch.zeros_like(c)).sum(dim=1)
    per_anchor = -(pos_logit_sum - n_pos.to(z.dtype) * log_den) / n_pos.clamp(min=1).to(z.dtype)
    return per_anchor[has_pos].mean()
