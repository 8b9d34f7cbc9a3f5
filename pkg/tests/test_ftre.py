import itertools
import math

import pytest
import torch

from fine.bench import gaussian_mi, sample_pairs
from fine.data import MODALITIES
from fine.ftre import (FTRE, ConditionalCritic, Critic, CriticBank, MiLossBreakdown, SUEncoder, club_from_scores,
                       combine_mi, conditional_nce_club, critic_objective, infonce_from_scores, infonce_lower,
                       mi_loss, nce_club_upper, normalize_label, recon_loss)
from fine.numcore import init_uniform_fan_in, make_generator

D = torch.float64


def _init(m, seed=0):
    init_uniform_fan_in(m, make_generator(seed))
    return m.double()


def loop_infonce(S):
    n = len(S)
    return sum(S[i][i] - math.log(sum(math.exp(S[i][j]) for j in range(n))) for i in range(n)) / n


def loop_club(S):
    n = len(S)
    pos = sum(S[i][i] for i in range(n)) / n
    neg = sum(S[i][j] for i in range(n) for j in range(n) if j != i) / (n * (n - 1))
    return pos - neg


# --- estimators on fixed scores --------------------------------------------

def test_constant_critic_infonce():
    S = torch.full((6, 6), 2.5, dtype=D)
    assert abs(infonce_from_scores(S, shift=True).item()) < 1e-15
    assert abs(infonce_from_scores(S).item() + math.log(6)) < 1e-15
    assert club_from_scores(S).item() == 0.0


def test_margin_critic_approaches_log4():
    S = torch.full((4, 4), -20.0, dtype=D)
    S.fill_diagonal_(20.0)
    assert abs(infonce_from_scores(S, shift=True).item() - math.log(4)) < 1e-12


def test_estimators_need_two_samples():
    with pytest.raises(ValueError):
        infonce_from_scores(torch.zeros(1, 1))
    with pytest.raises(ValueError):
        club_from_scores(torch.zeros(1, 1))


def test_shifted_infonce_bounded_by_log_batch():
    g = make_generator(1)
    for B in (2, 5, 17):
        S = torch.randn(B, B, generator=g, dtype=D) * 30
        assert infonce_from_scores(S, shift=True).item() <= math.log(B) + 1e-6


# --- estimators through critics ---------------------------------------------

def test_infonce_and_club_vs_loop_oracle():
    g = make_generator(2)
    critic = _init(Critic(3, 4, 5, 0.1), 2)
    a, b = torch.randn(6, 3, generator=g, dtype=D), torch.randn(6, 4, generator=g, dtype=D)
    S = [[critic.scores(a[i:i + 1], b[j:j + 1]).item() for j in range(6)] for i in range(6)]
    assert abs(infonce_lower(a, b, critic).item() - loop_infonce(S)) < 1e-10
    club = nce_club_upper(a, b, critic).item()
    assert abs(club - loop_club(S)) <= 1e-10 * max(1.0, abs(club))


def test_conditional_club_vs_loop_oracle():
    g = make_generator(3)
    critic = _init(ConditionalCritic(3, 3, 2, 5, 0.1), 3)
    a, b, y = (torch.randn(5, k, generator=g, dtype=D) for k in (3, 3, 2))

    def f(i, j):
        ha = critic.head_a(torch.cat([a[i], y[i]]))
        hb = critic.head_b(torch.cat([b[j], y[i]]))
        return (torch.nn.functional.normalize(ha, dim=0) @ torch.nn.functional.normalize(hb, dim=0)).item() / 0.1

    S = [[f(i, j) for j in range(5)] for i in range(5)]
    est = conditional_nce_club(a, b, y, critic).item()
    assert abs(est - loop_club(S)) <= 1e-10 * max(1.0, abs(est))


def test_conditional_reduces_to_unconditional_for_constant_label():
    g = make_generator(4)
    cond = _init(ConditionalCritic(3, 3, 2, 4, 0.2), 4)
    a, b = torch.randn(6, 3, generator=g, dtype=D), torch.randn(6, 3, generator=g, dtype=D)
    y0 = torch.randn(2, generator=g, dtype=D)
    y = y0.expand(6, 2)
    # same critic seen as an unconditional critic on [a; y0], [b; y0]
    plain = Critic(5, 5, 4, 0.2).double()
    plain.head_a, plain.head_b = cond.head_a, cond.head_b
    ref = nce_club_upper(torch.cat([a, y], 1), torch.cat([b, y], 1), plain)
    assert abs(conditional_nce_club(a, b, y, cond).item() - ref.item()) < 1e-10


def test_critic_scores_bounded_by_temperature():
    critic = _init(Critic(4, 4, 8, 0.1))
    a = torch.randn(10, 4, dtype=D) * 1e4
    assert critic.scores(a, -a).abs().max() <= 10 + 1e-9


def _train_critic(rho, dim, steps=2000, seed=0):
    gen = make_generator(seed)
    critic = Critic(dim, dim, 64, 0.1)
    init_uniform_fan_in(critic, gen)
    opt = torch.optim.Adam(critic.parameters(), lr=5e-3)
    for _ in range(steps):
        x, y = sample_pairs(rho, dim, 256, gen)
        loss = -infonce_lower(x, y, critic)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return critic, gen


def test_gaussian_rho09_infonce_window_and_club_bound():
    critic, gen = _train_critic(0.9, 1)
    true = gaussian_mi(0.9, 1)
    assert abs(true - 0.8304) < 1e-4
    with torch.no_grad():
        est = [(infonce_lower(*sample_pairs(0.9, 1, 256, gen), critic, shift=True).item(),
                nce_club_upper(*sample_pairs(0.9, 1, 256, gen), critic).item()) for _ in range(50)]
    nce = sum(e[0] for e in est) / 50
    club = sum(e[1] for e in est) / 50
    assert 0.4 * true <= nce <= true + 0.05
    assert club >= true - 0.1


def test_independent_pairs_club_near_zero():
    critic, gen = _train_critic(0.0, 2, steps=500, seed=1)
    with torch.no_grad():
        vals = [nce_club_upper(*sample_pairs(0.0, 2, 256, gen), critic).item() for _ in range(200)]
    assert -0.05 <= sum(vals) / 200 <= 0.05


# --- encoders -----------------------------------------------------------------

def test_su_hidden_width_paper_setting():
    assert SUEncoder(256, 128, 0.5).hidden == 128


def test_su_zero_input_gives_bias_path():
    enc = _init(SUEncoder(4, 3, 0.5))
    s, u = enc(torch.zeros(2, 1, 4, dtype=D))
    gelu = torch.nn.functional.gelu
    ref = enc.shared[2](gelu(enc.shared[0].bias)) + 0 * s
    assert torch.allclose(s, ref.expand_as(s), atol=1e-14)
    assert torch.allclose(u[0, 0], enc.unique[2](gelu(enc.unique[0].bias)), atol=1e-14)


def test_reconstruction_loss_values():
    enc = _init(FTRE(MODALITIES, {m: 3 for m in MODALITIES}, 2))
    x = torch.randn(2, 4, 3, dtype=D)
    from fine.ftre import mse

    assert mse(x, x).item() == 0.0
    assert mse(x + 1, x).item() == 1.0
    g = make_generator(5)
    a, b = torch.randn(3, 2, 4, generator=g, dtype=D), torch.randn(3, 2, 4, generator=g, dtype=D)
    ref = sum((p - q) ** 2 for p, q in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
    assert abs(mse(a, b).item() - ref) / ref < 1e-12
    feats = enc({m: torch.randn(2, 3, 3, dtype=D) for m in MODALITIES})
    per = [mse(f.x_recon, f.x_hat) for f in feats.values()]
    assert recon_loss(feats).item() == pytest.approx(sum(per).item() / 3, rel=1e-15)


def test_task_encode_pooling():
    enc = _init(FTRE(MODALITIES, {m: 3 for m in MODALITIES}, 2))
    tok = torch.randn(2, 1, 2, dtype=D)
    s1, u1 = enc.task_encode("audio", tok, tok)
    s2, u2 = enc.task_encode("audio", tok.expand(2, 5, 2), tok.expand(2, 5, 2))
    assert torch.allclose(s1, s2, atol=1e-15) and torch.allclose(u1, u2, atol=1e-15)
    assert s1.shape == (2, 2)


def test_label_normalisation():
    y = torch.tensor([-3.0, 0.0, 1.5, 3.0], dtype=D)
    n = normalize_label(y, -3.0, 3.0)
    assert n.tolist() == [-1.0, 0.0, 0.5, 1.0]
    assert torch.equal(torch.argsort(n), torch.argsort(y))
    enc = _init(FTRE(MODALITIES, {m: 3 for m in MODALITIES}, 2))
    lab = enc.label_encode(y)
    assert lab.y_str.shape == (4, 2) and set(lab.y_utr) == set(MODALITIES)


def test_task_relevant_concat_has_width_2d():
    enc = _init(FTRE(MODALITIES, {m: 4 for m in MODALITIES}, 3))
    feats = enc({m: torch.randn(2, 2, 4, dtype=D) for m in MODALITIES})
    assert all(f.task_relevant.shape == (2, 6) for f in feats.values())


# --- MI loss --------------------------------------------------------------------

def test_mi_identity_examples():
    assert combine_mi(0.0, 0.0, 0.0, 0.0, 0.0) == 0.0
    assert combine_mi(1.2, 0.3, 0.1, 0.2, 0.8) == pytest.approx(-1.4, abs=1e-15)


def test_mi_loss_breakdown_and_pair_sums():
    g = make_generator(6)
    enc = _init(FTRE(MODALITIES, {m: 4 for m in MODALITIES}, 3), 6)
    critics = _init(CriticBank(MODALITIES, 3, 4, 0.1), 7)
    feats = enc({m: torch.randn(5, 2, 4, generator=g, dtype=D) for m in MODALITIES})
    labels = enc.label_encode(torch.linspace(-2, 2, 5, dtype=D))
    br = mi_loss(feats, labels, critics)
    assert isinstance(br, MiLossBreakdown)
    assert br.l_mi.item() == (-br.i_sha + br.i_uni + br.l_recon + br.i_str - br.i_utr).item()
    manual = sum(infonce_lower(feats[a].x_s.mean(1), feats[b].x_s.mean(1), critics.sha[f"{a}_{b}"])
                 for a, b in itertools.combinations(MODALITIES, 2))
    assert br.i_sha.item() == pytest.approx(manual.item(), rel=1e-14)


def test_critic_objective_isolated_from_encoders():
    g = make_generator(8)
    enc = _init(FTRE(MODALITIES, {m: 4 for m in MODALITIES}, 3), 8)
    critics = _init(CriticBank(MODALITIES, 3, 4, 0.1), 9)
    feats = enc({m: torch.randn(4, 2, 4, generator=g, dtype=D) for m in MODALITIES})
    labels = enc.label_encode(torch.linspace(-2, 2, 4, dtype=D))
    critic_objective(feats, labels, critics).backward()
    assert all(p.grad is None for p in enc.parameters())
    assert all(p.grad is not None for p in critics.parameters())
