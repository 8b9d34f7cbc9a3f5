"""Factorized task-relevant encoder and the mutual-information estimators behind its loss.

Per modality the compressed MoQ tokens are split into shared and unique
representations, reconstructed, pooled and refined into shared-task-relevant
and unique-task-relevant vectors. Four estimator families shape them:

* ``infonce_lower`` on shared pairs (maximised) and on (unique-relevant, label) pairs (maximised),
* ``nce_club_upper`` on unique pairs (minimised),
* ``conditional_nce_club`` on shared-relevant pairs given the label embedding (minimised).

Critics are trained only through their own InfoNCE objective on detached
features (:func:`critic_objective`); the encoder-side loss treats them as constants.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .numcore import Tensor, mlp


def modality_pairs(mods: Sequence[str]):
    return list(itertools.combinations(mods, 2))


def _pair_key(a: str, b: str) -> str:
    return f"{a}_{b}"


# --- critics ----------------------------------------------------------------

class Critic(nn.Module):
    """Score ``f(a, b) = <g_a(a), g_b(b)> / tau`` with linear heads.

    With ``normalize`` the head outputs are unit vectors, so every score lies in
    ``[-1/tau, 1/tau]``. An encoder minimising a CLUB estimate can otherwise push
    the negative-pair scores without bound. With ``tied=True`` both sides share
    one head, which keeps paired inputs in a common coordinate system.
    """

    def __init__(self, d_a: int, d_b: int, dim: int = 64, temperature: float = 0.1, tied: bool = False,
                 normalize: bool = True):
        super().__init__()
        if tied and d_a != d_b:
            raise ValueError("tied critic needs equal input widths")
        self.temperature = temperature
        self.normalize = normalize
        self.head_a = nn.Linear(d_a, dim)
        self.head_b = self.head_a if tied else nn.Linear(d_b, dim)

    def scores(self, a: Tensor, b: Tensor) -> Tensor:
        """``S[i, j] = f(a_i, b_j)``."""
        ha, hb = self.head_a(a), self.head_b(b)
        if self.normalize:
            ha, hb = F.normalize(ha, dim=-1), F.normalize(hb, dim=-1)
        return ha @ hb.t() / self.temperature


class ConditionalCritic(nn.Module):
    """Score ``f(a, b, y) = <g_a([a; y]), g_b([b; y])> / tau``."""

    def __init__(self, d_a: int, d_b: int, d_y: int, dim: int = 64, temperature: float = 0.1,
                 normalize: bool = True):
        super().__init__()
        self.temperature = temperature
        self.normalize = normalize
        self.d_b = d_b
        self.head_a = nn.Linear(d_a + d_y, dim)
        self.head_b = nn.Linear(d_b + d_y, dim)

    def scores(self, a: Tensor, b: Tensor, y: Tensor) -> Tensor:
        """``S[i, j] = f(a_i, b_j, y_i)``; the head is linear so the label part splits off."""
        ha = self.head_a(torch.cat([a, y], dim=-1))
        w_b, w_y = self.head_b.weight[:, : self.d_b], self.head_b.weight[:, self.d_b:]
        hb = b @ w_b.t()
        hy = y @ w_y.t() + self.head_b.bias
        cross = ha @ hb.t()
        own = (ha * hy).sum(dim=-1, keepdim=True)
        S = cross + own
        if self.normalize:
            # |hb_j + hy_i|^2 expanded, so no B x B x dim tensor is formed
            sq = (hb * hb).sum(-1)[None, :] + 2.0 * hy @ hb.t() + (hy * hy).sum(-1, keepdim=True)
            S = S / (ha.norm(dim=-1, keepdim=True) * sq.clamp_min(1e-24).sqrt()).clamp_min(1e-12)
        return S / self.temperature


# --- estimators --------------------------------------------------------------

def _check_batch(n: int) -> None:
    if n < 2:
        raise ValueError(f"estimator needs at least 2 samples for in-batch negatives, got {n}")


def infonce_from_scores(S: Tensor, shift: bool = False) -> Tensor:
    n = S.shape[0]
    _check_batch(n)
    est = (torch.diagonal(S) - torch.logsumexp(S, dim=1)).mean()
    return est + math.log(n) if shift else est


def club_from_scores(S: Tensor) -> Tensor:
    """Mean positive (diagonal) score minus mean score over all pairs ``j != i``."""
    n = S.shape[0]
    _check_batch(n)
    diag = torch.diagonal(S)
    off = (S.sum() - diag.sum()) / (n * (n - 1))
    return diag.mean() - off


def infonce_lower(a: Tensor, b: Tensor, critic: Critic, shift: bool = False) -> Tensor:
    """InfoNCE estimate; with ``shift`` it is a bound in ``(-inf, log B]``."""
    return infonce_from_scores(critic.scores(a, b), shift=shift)


def nce_club_upper(a: Tensor, b: Tensor, critic: Critic) -> Tensor:
    return club_from_scores(critic.scores(a, b))


def conditional_nce_club(a: Tensor, b: Tensor, y: Tensor, critic: ConditionalCritic) -> Tensor:
    return club_from_scores(critic.scores(a, b, y))


# --- encoders ----------------------------------------------------------------

@dataclass
class FactorizedFeatures:
    x_hat: Tensor  # B x l x d'  (encoder input)
    x_s: Optional[Tensor]  # B x l x d
    x_u: Optional[Tensor]
    x_str: Tensor  # B x d
    x_utr: Tensor  # B x d
    x_recon: Optional[Tensor]  # B x l x d'

    @property
    def task_relevant(self) -> Tensor:
        """Concatenated ``[x_str, x_utr]``, B x 2d."""
        return torch.cat([self.x_str, self.x_utr], dim=-1)


@dataclass
class LabelEmbeddings:
    y_str: Tensor
    y_utr: Dict[str, Tensor]


@dataclass
class MiLossBreakdown:
    i_sha: Tensor
    i_uni: Tensor
    i_str: Tensor
    i_utr: Tensor
    l_recon: Tensor
    l_mi: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("i_sha", "i_uni", "i_str", "i_utr", "l_recon", "l_mi")}


def combine_mi(i_sha, i_uni, l_recon, i_str, i_utr):
    """``-I_sha + I_uni + L_recon + I_str - I_utr``, evaluated left to right."""
    return -i_sha + i_uni + l_recon + i_str - i_utr


class SUEncoder(nn.Module):
    def __init__(self, d_in: int, d_out: int, reduction_ratio: float):
        super().__init__()
        hidden = max(1, int(round(d_in * reduction_ratio)))
        self.hidden = hidden
        self.shared = mlp(d_in, hidden, d_out)
        self.unique = mlp(d_in, hidden, d_out)

    def forward(self, x_hat: Tensor):
        return self.shared(x_hat), self.unique(x_hat)


def mse(a: Tensor, b: Tensor) -> Tensor:
    return torch.mean((a - b) ** 2)


def normalize_label(y: Tensor, y_min: float, y_max: float) -> Tensor:
    return 2.0 * (y - y_min) / (y_max - y_min) - 1.0


class FTRE(nn.Module):
    """Shared/unique factorisation for several modalities.

    The shared-relevant task encoder is one network for all modalities (shared
    inputs are aligned by the tied critics); every other encoder is per modality.
    """

    def __init__(self, modalities: Sequence[str], moq_dims: Mapping[str, int], dim: int,
                 reduction_ratio: float = 0.5, label_range=(-3.0, 3.0)):
        super().__init__()
        self.modalities = tuple(modalities)
        self.dim = dim
        self.label_range = tuple(label_range)
        self.su = nn.ModuleDict({m: SUEncoder(moq_dims[m], dim, reduction_ratio) for m in self.modalities})
        self.decoders = nn.ModuleDict(
            {m: mlp(2 * dim, self.su[m].hidden, moq_dims[m]) for m in self.modalities}
        )
        self.task_shared = mlp(dim, dim, dim)
        self.task_unique = nn.ModuleDict({m: mlp(dim, dim, dim) for m in self.modalities})
        self.label_shared = mlp(1, dim, dim)
        self.label_unique = nn.ModuleDict({m: mlp(1, dim, dim) for m in self.modalities})

    def su_encode(self, m: str, x_hat: Tensor):
        return self.su[m](x_hat)

    def reconstruct(self, m: str, x_s: Tensor, x_u: Tensor, x_hat: Tensor):
        x_recon = self.decoders[m](torch.cat([x_s, x_u], dim=-1))
        return x_recon, mse(x_recon, x_hat)

    def task_encode(self, m: str, x_s: Tensor, x_u: Tensor):
        return self.task_shared(x_s.mean(dim=1)), self.task_unique[m](x_u.mean(dim=1))

    def label_encode(self, y: Tensor) -> LabelEmbeddings:
        yn = normalize_label(y, *self.label_range).unsqueeze(-1)
        return LabelEmbeddings(self.label_shared(yn), {m: self.label_unique[m](yn) for m in self.modalities})

    def forward(self, x_hats: Mapping[str, Tensor]) -> Dict[str, FactorizedFeatures]:
        out = {}
        for m in self.modalities:
            x_hat = x_hats[m]
            x_s, x_u = self.su_encode(m, x_hat)
            x_recon, _ = self.reconstruct(m, x_s, x_u, x_hat)
            x_str, x_utr = self.task_encode(m, x_s, x_u)
            out[m] = FactorizedFeatures(x_hat, x_s, x_u, x_str, x_utr, x_recon)
        return out


class PassThroughEncoder(nn.Module):
    """FTRE stand-in for ablations: pooled MoQ tokens, two linear maps, no MI terms."""

    def __init__(self, modalities: Sequence[str], moq_dims: Mapping[str, int], dim: int):
        super().__init__()
        self.modalities = tuple(modalities)
        self.to_str = nn.ModuleDict({m: nn.Linear(moq_dims[m], dim) for m in self.modalities})
        self.to_utr = nn.ModuleDict({m: nn.Linear(moq_dims[m], dim) for m in self.modalities})

    def forward(self, x_hats: Mapping[str, Tensor]) -> Dict[str, FactorizedFeatures]:
        out = {}
        for m in self.modalities:
            pooled = x_hats[m].mean(dim=1)
            out[m] = FactorizedFeatures(x_hats[m], None, None, self.to_str[m](pooled),
                                        self.to_utr[m](pooled), None)
        return out


class CriticBank(nn.Module):
    def __init__(self, modalities: Sequence[str], dim: int, critic_dim: int = 64, temperature: float = 0.1):
        super().__init__()
        self.modalities = tuple(modalities)
        pairs = modality_pairs(self.modalities)
        self.pairs = pairs
        keys = [_pair_key(a, b) for a, b in pairs]
        self.sha = nn.ModuleDict({k: Critic(dim, dim, critic_dim, temperature, tied=True) for k in keys})
        self.uni = nn.ModuleDict({k: Critic(dim, dim, critic_dim, temperature) for k in keys})
        self.str_ = nn.ModuleDict({k: ConditionalCritic(dim, dim, dim, critic_dim, temperature) for k in keys})
        self.utr = nn.ModuleDict({m: Critic(dim, dim, critic_dim, temperature) for m in self.modalities})


def _pooled(f: FactorizedFeatures):
    return f.x_s.mean(dim=1), f.x_u.mean(dim=1)


def mi_terms(feats: Mapping[str, FactorizedFeatures], labels: LabelEmbeddings, critics: CriticBank):
    """The four summed estimator values (unshifted InfoNCE)."""
    pooled = {m: _pooled(feats[m]) for m in critics.modalities}
    i_sha = i_uni = i_str = i_utr = 0.0
    for a, b in critics.pairs:
        k = _pair_key(a, b)
        i_sha = i_sha + infonce_lower(pooled[a][0], pooled[b][0], critics.sha[k])
        i_uni = i_uni + nce_club_upper(pooled[a][1], pooled[b][1], critics.uni[k])
        i_str = i_str + conditional_nce_club(feats[a].x_str, feats[b].x_str, labels.y_str, critics.str_[k])
    for m in critics.modalities:
        i_utr = i_utr + infonce_lower(feats[m].x_utr, labels.y_utr[m], critics.utr[m])
    return i_sha, i_uni, i_str, i_utr


def recon_loss(feats: Mapping[str, FactorizedFeatures]) -> Tensor:
    losses = [mse(f.x_recon, f.x_hat) for f in feats.values()]
    return sum(losses) / len(losses)


def mi_loss(feats: Mapping[str, FactorizedFeatures], labels: LabelEmbeddings, critics: CriticBank) -> MiLossBreakdown:
    i_sha, i_uni, i_str, i_utr = mi_terms(feats, labels, critics)
    l_recon = recon_loss(feats)
    return MiLossBreakdown(i_sha, i_uni, i_str, i_utr, l_recon, combine_mi(i_sha, i_uni, l_recon, i_str, i_utr))


def critic_objective(feats: Mapping[str, FactorizedFeatures], labels: LabelEmbeddings, critics: CriticBank) -> Tensor:
    """Negative summed InfoNCE of all twelve critics on gradient-isolated features."""
    pooled = {m: tuple(t.detach() for t in _pooled(feats[m])) for m in critics.modalities}
    y_str = labels.y_str.detach()
    total = 0.0
    for a, b in critics.pairs:
        k = _pair_key(a, b)
        total = total + infonce_lower(pooled[a][0], pooled[b][0], critics.sha[k])
        total = total + infonce_lower(pooled[a][1], pooled[b][1], critics.uni[k])
        S = critics.str_[k].scores(feats[a].x_str.detach(), feats[b].x_str.detach(), y_str)
        total = total + infonce_from_scores(S)
    for m in critics.modalities:
        total = total + infonce_lower(feats[m].x_utr.detach(), labels.y_utr[m].detach(), critics.utr[m])
    return -total
