import math
import random

import mpmath
import pytest
import torch

from fine.numcore import (GradcheckReport, MultiHeadAttention, NonFiniteError, PrecisionMode, affine, backward,
                          gradcheck, init_uniform_fan_in, make_generator, mlp, scaled_dot_attention, softmax)

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# --- affine -----------------------------------------------------------------

def test_affine_identity_weight():
    assert torch.equal(affine(t([[1.0, 2.0]]), t([[1.0, 0.0], [0.0, 1.0]]), t([0.0, 0.0])), t([[1.0, 2.0]]))


def test_affine_hand_sum():
    assert torch.equal(affine(t([[1.0, 1.0]]), t([[2.0], [3.0]]), t([1.0])), t([[6.0]]))


def test_affine_matches_triple_loop():
    g = make_generator(0)
    x, W, b = (torch.randn(*s, generator=g, dtype=D) for s in ((3, 4), (4, 2), (2,)))
    out = affine(x, W, b)
    xl, Wl, bl = x.tolist(), W.tolist(), b.tolist()
    for i in range(3):
        for j in range(2):
            acc = bl[j]
            for k in range(4):
                acc += xl[i][k] * Wl[k][j]
            assert abs(out[i, j].item() - acc) < 1e-12


def test_affine_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        affine(torch.zeros(2, 3), torch.zeros(4, 2), torch.zeros(2))


# --- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    assert torch.allclose(softmax(torch.zeros(4, dtype=D)), torch.full((4,), 0.25, dtype=D), atol=0)


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.5, 700.0])
def test_softmax_ratio_and_shift(c):
    out = softmax(t([c, c + math.log(3.0)]))
    assert torch.allclose(out, t([0.25, 0.75]), atol=1e-15)


def test_softmax_vs_high_precision():
    g = make_generator(1)
    x = torch.randn(9, generator=g, dtype=D) * 4
    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(v)) for v in x.tolist()]
    total = mpmath.fsum(ex)
    out = softmax(x)
    for o, e in zip(out.tolist(), ex):
        ref = float(e / total)
        assert abs(o - ref) / ref < 1e-12


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-6), (torch.float64, 1e-12)])
def test_softmax_rows_sum_to_one(dtype, tol):
    g = make_generator(2)
    x = (torch.randn(50, 7, generator=g, dtype=D) * 5).to(dtype)
    assert (softmax(x, axis=-1).sum(-1) - 1).abs().max() < tol


def test_softmax_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        softmax(t([0.0, float("nan")]))


# --- attention --------------------------------------------------------------

def test_attention_single_key_returns_value():
    Q = K = t([[0.3, -1.2]])
    V = t([[5.0, 7.0]])
    assert torch.allclose(scaled_dot_attention(Q, K, V), V)


def test_attention_identical_keys_average():
    K = t([[1.0, 2.0], [1.0, 2.0]])
    V = t([[1.0, 0.0], [3.0, 4.0]])
    out = scaled_dot_attention(t([[0.5, -0.5]]), K, V)
    assert torch.allclose(out, t([[2.0, 2.0]]), atol=1e-15)


def _loop_attention(Q, K, V, valid):
    d = len(Q[0])
    out = []
    for q in Q:
        scores = [sum(a * b for a, b in zip(q, k)) / math.sqrt(d) if ok else None for k, ok in zip(K, valid)]
        m = max(s for s in scores if s is not None)
        w = [math.exp(s - m) if s is not None else 0.0 for s in scores]
        z = sum(w)
        out.append([sum(wi * v[j] for wi, v in zip(w, V)) / z for j in range(len(V[0]))])
    return out


def test_attention_vs_loop_oracle_with_mask():
    g = make_generator(3)
    Q, K, V = (torch.randn(2, 3, generator=g, dtype=D) for _ in range(3))
    K3, V3 = torch.cat([K, torch.randn(1, 3, generator=g, dtype=D)]), torch.cat([V, torch.randn(1, 3, generator=g, dtype=D)])
    mask = torch.tensor([True, True, False])
    out = scaled_dot_attention(Q, K3, V3, key_mask=mask)
    ref = _loop_attention(Q.tolist(), K3.tolist(), V3.tolist(), mask.tolist())
    assert (out - t(ref)).abs().max() < 1e-10


def test_attention_masked_keys_get_zero_weight():
    g = make_generator(4)
    Q, K, V = (torch.randn(3, 2, generator=g, dtype=D) for _ in range(3))
    _, w = scaled_dot_attention(Q, K, V, key_mask=torch.tensor([True, False, True]), return_weights=True)
    assert torch.all(w[:, 1] == 0)
    V2 = V.clone()
    V2[1] = 1e6
    assert torch.equal(scaled_dot_attention(Q, K, V, key_mask=torch.tensor([True, False, True])),
                       scaled_dot_attention(Q, K, V2, key_mask=torch.tensor([True, False, True])))


def test_attention_padded_queries_uniform_over_valid():
    g = make_generator(5)
    Q, K, V = (torch.randn(2, 2, generator=g, dtype=D) for _ in range(3))
    _, w = scaled_dot_attention(Q, K, V, key_mask=torch.tensor([True, False]),
                                query_mask=torch.tensor([True, False]), return_weights=True)
    assert torch.equal(w[1], t([1.0, 0.0]))


def test_attention_no_valid_key_is_error():
    with pytest.raises(ValueError, match="no valid key"):
        scaled_dot_attention(torch.ones(1, 2), torch.ones(2, 2), torch.ones(2, 2), key_mask=torch.tensor([False, False]))


def test_multi_head_attention_shapes_and_divisibility():
    mha = MultiHeadAttention(6, 3)
    out = mha(torch.randn(2, 4, 6), torch.randn(2, 5, 6), key_mask=torch.ones(2, 5, dtype=torch.bool))
    assert out.shape == (2, 4, 6)
    with pytest.raises(ValueError):
        MultiHeadAttention(5, 2)


# --- backward ---------------------------------------------------------------

def test_backward_quadratic():
    x = t([1.0, 2.0, 3.0]).requires_grad_(True)
    backward((x ** 2).sum(), [x])
    assert torch.equal(x.grad, t([2.0, 4.0, 6.0]))


def test_backward_disconnected_leaf_gets_zeros():
    x = t([1.0, 2.0]).requires_grad_(True)
    y = t([3.0, 4.0]).requires_grad_(True)
    backward((x * 2).sum(), [x, y])
    assert torch.equal(y.grad, torch.zeros(2, dtype=D))


def test_backward_rejects_non_scalar_and_non_finite():
    x = t([1.0, 2.0]).requires_grad_(True)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * 2, [x])
    with pytest.raises(NonFiniteError):
        backward((x * float("inf")).sum(), [x])


def test_backward_moq_forward_matches_finite_differences():
    from fine.moq import MixtureOfQFormers

    g = make_generator(6)
    mix = MixtureOfQFormers(3, 4, 3, 2, 2)
    init_uniform_fan_in(mix, g)
    mix = mix.double()
    x = torch.randn(2, 4, 3, generator=g, dtype=D).requires_grad_(True)
    lengths = torch.tensor([4, 2])
    rep = gradcheck(lambda x: mix(x, lengths)[0].pow(2).sum(), [x], h=1e-5, tol=1e-4)
    assert rep.passed, rep


# --- gradcheck --------------------------------------------------------------

def test_gradcheck_quadratic():
    x = t([3.0]).requires_grad_(True)
    rep = gradcheck(lambda x: (x * x).sum(), [x], h=1e-5)
    assert rep.passed and rep.max_rel_err < 1e-8


class _WrongSquare(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 3.0 * x  # should be 2x


def test_gradcheck_negative_control_fails():
    x = t([1.5, -0.7]).requires_grad_(True)
    rep = gradcheck(lambda x: _WrongSquare.apply(x).sum(), [x])
    assert not rep.passed
    assert rep.max_rel_err > 0.1


def test_gradcheck_flags_non_deterministic_function():
    x = t([1.0]).requires_grad_(True)
    rng = random.Random(0)
    rep = gradcheck(lambda x: (x * rng.random()).sum(), [x])
    assert isinstance(rep, GradcheckReport)
    assert not rep.deterministic and not rep.passed


def test_gradcheck_requires_double():
    x = torch.ones(2, requires_grad=True)
    with pytest.raises(TypeError):
        gradcheck(lambda x: x.sum(), [x])


def test_gradcheck_full_ftre_loss_four_samples():
    from fine.data import MODALITIES
    from fine.ftre import FTRE, CriticBank, mi_loss

    g = make_generator(7)
    enc = FTRE(MODALITIES, {m: 4 for m in MODALITIES}, 3)
    critics = CriticBank(MODALITIES, 3, 4, 0.5)
    init_uniform_fan_in(enc, g)
    init_uniform_fan_in(critics, g)
    enc, critics = enc.double(), critics.double()
    critics.requires_grad_(False)
    x = {m: torch.randn(4, 2, 4, generator=g, dtype=D).requires_grad_(True) for m in MODALITIES}
    y = torch.linspace(-2, 2, 4, dtype=D)

    def f(*xs):
        return mi_loss(enc(dict(zip(MODALITIES, xs))), enc.label_encode(y), critics).l_mi

    rep = gradcheck(f, list(x.values()), tol=1e-4)
    assert rep.passed, rep


# --- misc -------------------------------------------------------------------

def test_precision_mode_parse():
    assert PrecisionMode.parse("double").dtype is torch.float64
    assert PrecisionMode.parse("SINGLE").dtype is torch.float32
    with pytest.raises(ValueError):
        PrecisionMode.parse("half")


def test_init_uniform_fan_in_bounds_and_determinism():
    net = mlp(9, 4, 2)
    init_uniform_fan_in(net, make_generator(11))
    w0, w1 = net[0].weight, net[2].weight
    assert w0.abs().max() <= 1 / 3 and w1.abs().max() <= 1 / 2
    other = mlp(9, 4, 2)
    init_uniform_fan_in(other, make_generator(11))
    assert all(torch.equal(a, b) for a, b in zip(net.parameters(), other.parameters()))
