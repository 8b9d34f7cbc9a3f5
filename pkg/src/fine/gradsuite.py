"""Finite-difference gradient suites, one per module, over randomised small shapes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from . import dcq, ftre, fusion, moq
from .data import MODALITIES
from .numcore import (MultiHeadAttention, affine, gradcheck, init_uniform_fan_in, make_generator, mlp,
                      scaled_dot_attention, softmax)

Case = Tuple[Callable[..., torch.Tensor], List[torch.Tensor]]
DT = torch.float64


@dataclass
class CaseResult:
    module: str
    op: str
    seed: int
    max_rel_err: float
    n_checked: int
    passed: bool

    def as_dict(self) -> dict:
        return asdict(self)


def _rand(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DT)


def _leaf(gen, *shape):
    return _rand(gen, *shape).requires_grad_(True)


def _int(gen, lo: int, hi: int) -> int:
    """Uniform integer in ``[lo, hi]``."""
    return int(torch.randint(lo, hi + 1, (1,), generator=gen))


def _module(m: nn.Module, gen) -> nn.Module:
    init_uniform_fan_in(m, gen)
    m = m.to(DT)
    # LayerNorm starts at (1, 0); perturb so those parameters are exercised too
    with torch.no_grad():
        for p in m.parameters():
            p.add_(0.05 * _rand(gen, *p.shape))
    return m


def _params(m: nn.Module) -> List[torch.Tensor]:
    return [p for p in m.parameters() if p.requires_grad]


def _subset(gen, ps: List[torch.Tensor], n: int) -> List[torch.Tensor]:
    """``n`` tensors drawn without replacement; large models are probed on a sample per seed."""
    if len(ps) <= n:
        return ps
    return [ps[i] for i in sorted(torch.randperm(len(ps), generator=gen)[:n].tolist())]


def _lengths(gen, B: int, T: int) -> torch.Tensor:
    return torch.randint(1, T + 1, (B,), generator=gen)


# --- numcore ----------------------------------------------------------------

def _case_affine(gen) -> Case:
    B, di, do = _int(gen, 1, 4), _int(gen, 1, 5), _int(gen, 1, 4)
    x, W, b = _leaf(gen, B, di), _leaf(gen, di, do), _leaf(gen, do)
    r = _rand(gen, B, do)
    return (lambda x, W, b: (affine(x, W, b) * r).sum()), [x, W, b]


def _case_softmax(gen) -> Case:
    B, N = _int(gen, 1, 4), _int(gen, 2, 6)
    x = _leaf(gen, B, N)
    r = _rand(gen, B, N)
    return (lambda x: (softmax(x, axis=-1) * r).sum()), [x]


def _case_attention(gen) -> Case:
    Lq, Lk, d = _int(gen, 1, 4), _int(gen, 1, 5), _int(gen, 1, 4)
    Q, K, V = _leaf(gen, Lq, d), _leaf(gen, Lk, d), _leaf(gen, Lk, d)
    n_valid = _int(gen, 1, Lk)
    mask = torch.arange(Lk) < n_valid
    r = _rand(gen, Lq, d)
    return (lambda Q, K, V: (scaled_dot_attention(Q, K, V, key_mask=mask) * r).sum()), [Q, K, V]


def _case_mha(gen) -> Case:
    heads = _int(gen, 1, 2)
    d = heads * _int(gen, 1, 3)
    B, Lq, Lk = _int(gen, 1, 3), _int(gen, 1, 3), _int(gen, 1, 4)
    attn = _module(MultiHeadAttention(d, heads), gen)
    q, kv = _leaf(gen, B, Lq, d), _leaf(gen, B, Lk, d)
    mask = torch.arange(Lk)[None, :] < _lengths(gen, B, Lk)[:, None]
    r = _rand(gen, B, Lq, d)
    return (lambda q, kv, *ps: (attn(q, kv, key_mask=mask) * r).sum()), [q, kv] + _params(attn)


def _case_mlp(gen) -> Case:
    di, dh, do = _int(gen, 1, 4), _int(gen, 1, 5), _int(gen, 1, 3)
    net = _module(mlp(di, dh, do), gen)
    x = _leaf(gen, _int(gen, 1, 4), di)
    r = _rand(gen, x.shape[0], do)
    return (lambda x, *ps: (net(x) * r).sum()), [x] + _params(net)


# --- moq -------------------------------------------------------------------

def _case_router_aux(gen) -> Case:
    B, T, d, N = _int(gen, 2, 4), _int(gen, 1, 4), _int(gen, 1, 4), _int(gen, 2, 5)
    router = _module(moq.GateRouter(d, N, _int(gen, 1, N)), gen)
    x, lengths = _leaf(gen, B, T, d), _lengths(gen, B, T)
    r = _rand(gen, B, N)
    return (lambda x, *ps: moq.aux_loss(dec := router(x, lengths)) + (dec.weights * r).sum()), [x] + _params(router)


def _case_qformer(gen) -> Case:
    B, T, d_in, d = _int(gen, 1, 3), _int(gen, 1, 4), _int(gen, 1, 4), _int(gen, 2, 4)
    l = _int(gen, 1, 3)
    expert = _module(moq.QFormerExpert(d_in, d, l), gen)
    x, lengths = _leaf(gen, B, T, d_in), _lengths(gen, B, T)
    r = _rand(gen, B, l, d)
    return (lambda x, *ps: (expert(x, lengths) * r).sum()), [x] + _params(expert)


def _case_moq(gen) -> Case:
    """Router plus two experts on a three-sample batch."""
    T, d_in, d, l = _int(gen, 1, 4), _int(gen, 1, 3), _int(gen, 2, 3), _int(gen, 1, 2)
    mix = _module(moq.MixtureOfQFormers(d_in, d, 2, _int(gen, 1, 2), l), gen)
    x, lengths = _leaf(gen, 3, T, d_in), _lengths(gen, 3, T)
    r = _rand(gen, 3, l, d)

    def f(x, *ps):
        out, dec = mix(x, lengths)
        return (out * r).sum() + moq.aux_loss(dec)

    return f, [x] + _params(mix)


# --- ftre ------------------------------------------------------------------

def _case_su_encoder(gen) -> Case:
    d_in, d = _int(gen, 2, 5), _int(gen, 1, 4)
    enc = _module(ftre.SUEncoder(d_in, d, 0.5), gen)
    x = _leaf(gen, _int(gen, 1, 3), _int(gen, 1, 3), d_in)
    r1, r2 = _rand(gen, *x.shape[:-1], d), _rand(gen, *x.shape[:-1], d)

    def f(x, *ps):
        s, u = enc(x)
        return (s * r1).sum() + (u * r2).sum()

    return f, [x] + _params(enc)


def _small_ftre(gen, d_moq: int, d: int) -> ftre.FTRE:
    return _module(ftre.FTRE(MODALITIES, {m: d_moq for m in MODALITIES}, d, 0.5), gen)


def _case_reconstruct(gen) -> Case:
    d_moq, d = _int(gen, 2, 4), _int(gen, 1, 3)
    enc = _small_ftre(gen, d_moq, d)
    B, l = _int(gen, 1, 3), _int(gen, 1, 3)
    xs, xu, xh = _leaf(gen, B, l, d), _leaf(gen, B, l, d), _leaf(gen, B, l, d_moq)
    return (lambda xs, xu, xh: enc.reconstruct("text", xs, xu, xh)[1]), [xs, xu, xh]


def _case_task_encode(gen) -> Case:
    d = _int(gen, 1, 4)
    enc = _small_ftre(gen, 2, d)
    B, l = _int(gen, 1, 3), _int(gen, 1, 3)
    xs, xu = _leaf(gen, B, l, d), _leaf(gen, B, l, d)
    r1, r2 = _rand(gen, B, d), _rand(gen, B, d)
    m = MODALITIES[_int(gen, 0, 2)]

    def f(xs, xu):
        a, b = enc.task_encode(m, xs, xu)
        return (a * r1).sum() + (b * r2).sum()

    return f, [xs, xu]


def _case_label_encode(gen) -> Case:
    d = _int(gen, 1, 4)
    enc = _small_ftre(gen, 2, d)
    B = _int(gen, 1, 4)
    ps = _params(enc.label_shared) + _params(enc.label_unique)
    y = torch.rand(B, generator=gen, dtype=DT) * 6 - 3
    r = _rand(gen, B, d)

    def f(*ps):
        lab = enc.label_encode(y)
        return (lab.y_str * r).sum() + sum((v * r).sum() for v in lab.y_utr.values())

    return f, ps


def _case_infonce(gen) -> Case:
    B, d = _int(gen, 2, 5), _int(gen, 1, 4)
    critic = _module(ftre.Critic(d, d, _int(gen, 2, 4), 0.5), gen)
    a, b = _leaf(gen, B, d), _leaf(gen, B, d)
    return (lambda a, b, *ps: ftre.infonce_lower(a, b, critic)), [a, b] + _params(critic)


def _case_club(gen) -> Case:
    B, d = _int(gen, 2, 5), _int(gen, 1, 4)
    critic = _module(ftre.Critic(d, d, _int(gen, 2, 4), 0.5), gen)
    a, b = _leaf(gen, B, d), _leaf(gen, B, d)
    return (lambda a, b: ftre.nce_club_upper(a, b, critic)), [a, b]


def _case_conditional_club(gen) -> Case:
    B, d, dy = _int(gen, 2, 5), _int(gen, 1, 3), _int(gen, 1, 3)
    critic = _module(ftre.ConditionalCritic(d, d, dy, _int(gen, 2, 4), 0.5), gen)
    a, b, y = _leaf(gen, B, d), _leaf(gen, B, d), _leaf(gen, B, dy)
    return (lambda a, b, y: ftre.conditional_nce_club(a, b, y, critic)), [a, b, y]


def _case_mi_loss(gen) -> Case:
    """``l_mi`` with respect to the encoder parameters, critics frozen."""
    d_moq, d = _int(gen, 2, 3), _int(gen, 1, 3)
    enc = _small_ftre(gen, d_moq, d)
    critics = _module(ftre.CriticBank(MODALITIES, d, 3, 0.5), gen)
    critics.requires_grad_(False)
    B, l = _int(gen, 2, 4), _int(gen, 1, 2)
    x_hats = {m: _rand(gen, B, l, d_moq) for m in MODALITIES}
    y = torch.rand(B, generator=gen, dtype=DT) * 6 - 3

    def f(*ps):
        feats = enc(x_hats)
        return ftre.mi_loss(feats, enc.label_encode(y), critics).l_mi

    return f, _subset(gen, _params(enc), 24)


# --- dcq -------------------------------------------------------------------

def _case_compensated_cosine(gen) -> Case:
    n = _int(gen, 1, 6)
    c = (torch.rand(n, generator=gen, dtype=DT) * 1.8 - 0.9).requires_grad_(True)
    phi = torch.rand(n, generator=gen, dtype=DT) * math.pi
    r = _rand(gen, n)
    return (lambda c: (dcq.compensated_cosine(c, phi, 1e-8) * r).sum()), [c]


def _case_accon(gen) -> Case:
    B, d = _int(gen, 2, 5), _int(gen, 2, 4)
    cfg = dcq.AcconConfig(tau=0.5, s_min=3, bins=3)
    state = dcq.QueueState([3, 3, 3], cfg.y_min, cfg.y_max)
    nq = _int(gen, 0, 6)
    if nq:
        state.update(_rand(gen, nq, d), torch.rand(nq, generator=gen, dtype=DT) * 6 - 3)
    z = _leaf(gen, B, d)
    y = torch.rand(B, generator=gen, dtype=DT) * 6 - 3
    return (lambda z: dcq.accon_loss(z, y, state, cfg)), [z]


# --- fusion ----------------------------------------------------------------

def _case_fusion(gen) -> Case:
    heads = _int(gen, 1, 2)
    d = heads * _int(gen, 1, 2)
    enc = _module(fusion.FusionEncoder(MODALITIES, d, _int(gen, 1, 2), heads), gen)
    leaves = [_leaf(gen, 2, d) for _ in range(2 * len(MODALITIES))]
    r = _rand(gen, 2, len(MODALITIES) * d)

    def f(*xs):
        feats = {m: (xs[2 * i], xs[2 * i + 1]) for i, m in enumerate(MODALITIES)}
        y_hat, z = enc(feats)
        return y_hat.sum() + (z * r).sum()

    return f, leaves + _subset(gen, _params(enc), 16)


def _case_unimodal(gen) -> Case:
    d = _int(gen, 1, 4)
    dec = _module(fusion.UnimodalDecoder(d, _int(gen, 1, 2)), gen)
    B = _int(gen, 1, 3)
    a, b = _leaf(gen, B, d), _leaf(gen, B, d)
    r = _rand(gen, B)
    return (lambda a, b, *ps: (dec(a, b) * r).sum()), [a, b] + _params(dec)


def _case_total(gen) -> Case:
    """``l_total`` end to end on a two-sample batch through a miniature model."""
    from .config import RunConfig
    from .data import ModalityBatch
    from .model import FineModel, accon_config, compute_losses, loss_weights

    cfg = RunConfig({"moq.num_experts": 2, "moq.top_k_ratio": 0.5, "moq.num_query_tokens": 1,
                     "moq.dim.text": 2, "moq.dim.audio": 2, "moq.dim.video": 2, "ftre.dim": 2,
                     "fusion.layers": 1, "fusion.heads": 1, "ftre.critic_dim": 2, "dcq.s_min": 2, "dcq.tau": 0.5})
    dims = {m: _int(gen, 1, 3) for m in MODALITIES}
    T = _int(gen, 1, 3)
    model = _module(FineModel(cfg, dims), gen)
    critics = _module(ftre.CriticBank(MODALITIES, 2, 2, 0.5), gen)
    critics.requires_grad_(False)
    acc = accon_config(cfg, (-3.0, 3.0))
    queue = dcq.QueueState.from_counts([10] * cfg["dcq.bins"], acc)
    feats = {m: _rand(gen, 2, T, dims[m]) for m in MODALITIES}
    lengths = {m: _lengths(gen, 2, T) for m in MODALITIES}
    batch = ModalityBatch(feats, lengths, torch.rand(2, generator=gen, dtype=DT) * 6 - 3, torch.arange(2))
    weights = loss_weights(cfg)

    def f(*ps):
        out = model(batch)
        return compute_losses(model, critics, out, batch, queue, acc, weights).l_total

    return f, _subset(gen, _params(model), 24)


SUITES: Dict[str, Dict[str, Callable]] = {
    "numcore": {"affine": _case_affine, "softmax": _case_softmax, "attention": _case_attention,
                "multi_head_attention": _case_mha, "mlp": _case_mlp},
    "data": {},
    "moq": {"router_aux": _case_router_aux, "qformer": _case_qformer, "moq_forward": _case_moq},
    "ftre": {"su_encode": _case_su_encoder, "reconstruct": _case_reconstruct, "task_encode": _case_task_encode,
             "label_encode": _case_label_encode, "infonce_lower": _case_infonce, "nce_club_upper": _case_club,
             "conditional_nce_club": _case_conditional_club, "mi_loss": _case_mi_loss},
    "dcq": {"compensated_cosine": _case_compensated_cosine, "accon_loss": _case_accon},
    "fusion": {"fuse_predict": _case_fusion, "unimodal_predict": _case_unimodal, "total_loss": _case_total},
}
SUITES["harness"] = {}


def run_case(module: str, op: str, seed: int, h: float = 1e-5, tol: float = 1e-4,
             max_elements: Optional[int] = 4) -> CaseResult:
    gen = make_generator(seed)
    f, inputs = SUITES[module][op](gen)
    rep = gradcheck(f, inputs, h=h, tol=tol, max_elements=max_elements, generator=gen)
    return CaseResult(module, op, seed, rep.max_rel_err, rep.n_checked, rep.passed)


def run_suite(modules: Optional[Sequence[str]] = None, seeds: int = 20, h: float = 1e-5, tol: float = 1e-4,
              max_elements: Optional[int] = 4) -> List[CaseResult]:
    """Every op of every named module over ``seeds`` seeds (random shapes per seed)."""
    names = list(SUITES) if not modules else list(modules)
    unknown = [m for m in names if m not in SUITES]
    if unknown:
        raise KeyError(f"no gradcheck suite for {unknown}; known: {sorted(SUITES)}")
    return [run_case(m, op, s, h, tol, max_elements) for m in names for op in SUITES[m] for s in range(seeds)]


def summarize(results: Sequence[CaseResult]) -> List[dict]:
    """One row per (module, op): seeds run, worst relative error, pass."""
    rows: Dict[Tuple[str, str], dict] = {}
    for r in results:
        row = rows.setdefault((r.module, r.op), {"module": r.module, "op": r.op, "seeds": 0,
                                                 "max_rel_err": 0.0, "passed": True})
        row["seeds"] += 1
        row["max_rel_err"] = max(row["max_rel_err"], r.max_rel_err)
        row["passed"] = row["passed"] and r.passed
    return list(rows.values())
