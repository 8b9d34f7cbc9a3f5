import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import Ridge
from sklearn.metrics import confusion_matrix

from fine.data import (MODALITIES, CorruptDatasetError, SyntheticSpec, acc2, acc7, binarize, f1, generate,
                       iter_batches, load_batches, read_dataset, score, split_indices, synthesize)


def small_spec(**kw):
    base = dict(n_samples=60, seq_lens={"text": 5, "audio": 6, "video": 4}, dims={"text": 6, "audio": 4, "video": 4},
                max_shift=2, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def ridge_r2(X, y, alpha=1e-6):
    model = Ridge(alpha=alpha).fit(X, y)
    return model.score(X, y)


def last_valid(data, m):
    x, L = data.features[m], data.lengths[m]
    return x[np.arange(len(L)), L - 1].astype(np.float64)


# --- generation -------------------------------------------------------------

def test_degenerate_spec_is_all_zero():
    spec = small_spec(n_samples=1, sigma=0.0, latent_scale=0.0)
    d = synthesize(spec)
    for m in MODALITIES:
        assert not d.features[m].any()
    assert d.labels.tolist() == [0.0]


def test_same_seed_byte_identical(tmp_path):
    a, b = generate(small_spec(), tmp_path / "a"), generate(small_spec(), tmp_path / "b")
    for name in (*MODALITIES, "labels"):
        assert (a / f"{name}.bin").read_bytes() == (b / f"{name}.bin").read_bytes()


def test_label_recovered_from_latents_by_ridge():
    d = synthesize(SyntheticSpec(n_samples=2000, sigma=0.01, seed=5))
    Z = np.concatenate([d.latents["shared"]] + [d.latents[f"unique_{m}"] for m in MODALITIES], axis=1)
    assert ridge_r2(Z, d.labels) > 0.99


def test_single_modality_probe_sees_shared_not_other_unique():
    d = synthesize(SyntheticSpec(n_samples=2000, sigma=0.0, distractor_frac=0.0, seed=6))
    shared_part = d.latents["shared"] @ d.latents["w_shared"]
    for m in MODALITIES:
        X = last_valid(d, m)
        assert ridge_r2(X, shared_part) > 0.95
        for other in MODALITIES:
            if other != m:
                other_part = d.latents[f"unique_{other}"] @ d.latents[f"w_{other}"]
                assert ridge_r2(X, other_part) < 0.1


def test_raw_feature_ridge_baseline_on_desk_set():
    """The ridge oracle on raw features separates the label sign well above 0.85."""
    d = synthesize(SyntheticSpec(seed=0))
    X = np.concatenate([last_valid(d, m) for m in MODALITIES], axis=1)
    splits = split_indices(len(d.labels))
    tr, te = splits["train"], splits["test"]
    pred = Ridge(alpha=1.0).fit(X[tr], d.labels[tr]).predict(X[te])
    assert acc2(pred, d.labels[te]) >= 0.9


def test_padding_zero_and_labels_in_range():
    d = synthesize(small_spec(sigma=0.3))
    for m in MODALITIES:
        T = d.features[m].shape[1]
        pad = np.arange(T)[None, :] >= d.lengths[m][:, None]
        assert not d.features[m][pad].any()
        assert (d.lengths[m] >= 1).all() and (d.lengths[m] <= T).all()
    assert d.labels.min() >= -3 and d.labels.max() <= 3


def test_distractor_channels_independent_of_label():
    d = synthesize(SyntheticSpec(n_samples=3000, sigma=0.0, seed=8))
    for m in MODALITIES:
        X = last_valid(d, m)
        n_sig = X.shape[1] - int(round(0.5 * X.shape[1]))
        assert ridge_r2(X[:, n_sig:], d.labels) < 0.02
        assert ridge_r2(X[:, :n_sig], d.labels) > 0.3


@pytest.mark.parametrize("bad", [dict(sigma=-1.0), dict(max_shift=4), dict(n_samples=0), dict(q_shared=0),
                                 dict(y_min=1.0, y_max=1.0), dict(distractor_frac=1.0)])
def test_invalid_spec(bad):
    with pytest.raises(ValueError):
        small_spec(**bad).validate()


def test_unknown_spec_key():
    with pytest.raises(ValueError, match="unknown"):
        SyntheticSpec.from_dict({"n_samples": 3, "colour": 1})


# --- on-disk format ---------------------------------------------------------

def test_round_trip_bit_exact(tmp_path):
    data = synthesize(small_spec())
    from fine.data import write_dataset

    ds = read_dataset(write_dataset(data, tmp_path))
    for m in MODALITIES:
        assert np.array_equal(ds.features[m].numpy(), data.features[m])
        assert ds.lengths[m].tolist() == data.lengths[m].tolist()
    assert np.array_equal(ds.labels.numpy(), data.labels)


def test_manifest_and_header(tmp_path):
    root = generate(small_spec(), tmp_path)
    man = json.loads((root / "manifest.json").read_text())
    assert set(man["splits"]) == {"train", "val", "test"}
    assert [len(man["splits"][k]) for k in ("train", "val", "test")] == [42, 9, 9]
    raw = (root / "audio.bin").read_bytes()
    header = np.frombuffer(raw[:32], dtype="<u4")
    assert header[2:7].tolist() == [60, 6, 4, 4, 1]
    assert man["spec"]["seed"] == 3


def test_checksum_mismatch_is_corrupt(tmp_path):
    root = generate(small_spec(), tmp_path)
    raw = bytearray((root / "text.bin").read_bytes())
    raw[-1] ^= 0xFF
    (root / "text.bin").write_bytes(bytes(raw))
    with pytest.raises(CorruptDatasetError, match="checksum"):
        read_dataset(root)


# --- batching ---------------------------------------------------------------

def test_batch_sizes_4_4_2(tmp_path):
    root = generate(small_spec(n_samples=10), tmp_path)
    assert [b.size for b in load_batches(root, 4)] == [4, 4, 2]


def test_unshuffled_order_is_manifest_order(tmp_path):
    root = generate(small_spec(n_samples=10), tmp_path)
    order = [i for b in load_batches(root, 3) for i in b.indices.tolist()]
    assert order == list(range(10))


def test_shuffle_seeds_differ_and_cover(tmp_path):
    ds = read_dataset(generate(small_spec(n_samples=30), tmp_path))
    for trial in range(10):
        a = [i for b in iter_batches(ds, 7, [trial, 1]) for i in b.indices.tolist()]
        b = [i for b in iter_batches(ds, 7, [trial, 2]) for i in b.indices.tolist()]
        assert sorted(a) == sorted(ds.splits["train"]) == sorted(b)
        assert a != b


# --- metrics ----------------------------------------------------------------

def test_acc2_examples():
    assert acc2([-1, 2], [-2, 1]) == 1.0
    assert acc2([0], [-0.5]) == 0.0
    x = np.linspace(-2, 2, 11)
    assert acc2(x, x) == 1.0


def test_acc7_examples():
    assert acc7([2.4], [2.0]) == 1.0
    assert acc7([3.7], [3.0]) == 1.0
    assert acc7([2.5], [2.0]) == 0.0  # half rounds away from zero
    assert acc7([-2.5], [-3.0]) == 1.0


def test_perfect_predictions():
    y = torch.linspace(-3, 3, 13)
    assert score(y, y) == {"acc2": 1.0, "f1": 1.0, "acc7": 1.0, "mse": 0.0}


def test_f1_degenerate_is_one():
    assert f1([-1.0, -2.0], [-0.5, -0.1]) == 1.0


def test_empty_and_mismatched_inputs():
    with pytest.raises(ValueError):
        acc2([], [])
    with pytest.raises(ValueError):
        f1([1.0], [1.0, 2.0])


def test_metrics_vs_confusion_matrix_oracle():
    rng = np.random.default_rng(9)
    pred, label = rng.uniform(-3.5, 3.5, 200), rng.uniform(-3, 3, 200)
    pred[:5] = 0.0
    bp, by = (pred >= 0).astype(int), (label >= 0).astype(int)
    tn, fp, fn, tp = confusion_matrix(by, bp, labels=[0, 1]).ravel()
    assert acc2(pred, label) == (tp + tn) / 200
    assert f1(pred, label) == 2 * tp / (2 * tp + fp + fn)
    r = lambda v: np.array([math.copysign(math.floor(abs(x) + 0.5), x) for x in np.clip(v, -3, 3)])  # noqa: E731
    cm7 = confusion_matrix(r(label), r(pred), labels=np.arange(-3, 4))
    assert acc7(pred, label) == np.trace(cm7) / 200


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=40))
def test_metric_ranges_and_self_agreement(vals):
    p = np.array(vals)
    q = p[::-1].copy()
    for fn_ in (acc2, f1, acc7):
        assert 0.0 <= fn_(p, q) <= 1.0
    assert acc7(p, p) == 1.0
    assert binarize(p).dtype == bool
