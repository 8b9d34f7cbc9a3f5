"""Synthetic tri-modal data, its on-disk format, batching and evaluation metrics.

Each sample carries a shared latent ``z_s``, one unique latent per modality and
task-irrelevant nuisance latents (one shared across modalities, one per
modality). The label is a linear function of the shared and unique latents.
Each modality is a per-modality linear readout broadcast over time, switched on
at a random onset (asynchrony) and optionally corrupted with Gaussian noise.
Half of each modality's channels (by default) read out only nuisance latents.

Blob layout: an 8-field little-endian ``uint32`` header
``(magic, version, count, T, d, element_width, little_endian, reserved)``
followed by ``count * T * d`` little-endian float32 values.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch

MODALITIES = ("text", "audio", "video")
MAGIC = 0x454E4946  # b"FINE" little-endian
FORMAT_VERSION = 1
HEADER_FIELDS = 8
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class CorruptDatasetError(IOError):
    pass


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    seq_lens: Dict[str, int] = field(default_factory=lambda: {"text": 8, "audio": 10, "video": 12})
    dims: Dict[str, int] = field(default_factory=lambda: {"text": 16, "audio": 12, "video": 12})
    q_shared: int = 2
    q_unique: int = 2
    sigma: float = 0.1
    max_shift: int = 3
    y_min: float = -3.0
    y_max: float = 3.0
    distractor_frac: float = 0.5
    latent_scale: float = 1.0
    shared_weight: float = 0.8
    unique_weight: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if set(self.seq_lens) != set(MODALITIES) or set(self.dims) != set(MODALITIES):
            raise ValueError(f"seq_lens and dims need exactly the keys {MODALITIES}")
        for m in MODALITIES:
            if self.seq_lens[m] < 1 or self.dims[m] < 1:
                raise ValueError(f"non-positive size for modality {m}")
            if self.dims[m] - self._n_distractor(m) < 1:
                raise ValueError(f"modality {m} has no signal channels left")
        if self.q_shared < 1 or self.q_unique < 1:
            raise ValueError("latent dims must be positive")
        if self.sigma < 0 or self.latent_scale < 0:
            raise ValueError("sigma and latent_scale must be non-negative")
        if not 0 <= self.distractor_frac < 1:
            raise ValueError("distractor_frac must lie in [0, 1)")
        if not 0 <= self.max_shift < min(self.seq_lens.values()):
            raise ValueError("max_shift must be smaller than every sequence length")
        if not self.y_min < self.y_max:
            raise ValueError("empty label range")

    def _n_distractor(self, m: str) -> int:
        return int(round(self.distractor_frac * self.dims[m]))

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModalityBatch:
    features: Dict[str, torch.Tensor]
    lengths: Dict[str, torch.Tensor]
    labels: torch.Tensor
    indices: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def to(self, dtype: torch.dtype) -> "ModalityBatch":
        return ModalityBatch(
            {m: x.to(dtype) for m, x in self.features.items()},
            self.lengths,
            self.labels.to(dtype),
            self.indices,
        )


@dataclass
class SyntheticData:
    """In-memory dataset plus the latents that generated it (for oracles)."""

    features: Dict[str, np.ndarray]
    lengths: Dict[str, np.ndarray]
    labels: np.ndarray
    latents: Dict[str, np.ndarray]
    spec: SyntheticSpec


def synthesize(spec: SyntheticSpec) -> SyntheticData:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    s = spec.latent_scale
    z_s = s * rng.standard_normal((n, spec.q_shared))
    z_u = {m: s * rng.standard_normal((n, spec.q_unique)) for m in MODALITIES}
    nu_s = s * rng.standard_normal((n, spec.q_shared))
    nu_u = {m: s * rng.standard_normal((n, spec.q_unique)) for m in MODALITIES}

    w_s = _unit(rng.standard_normal(spec.q_shared)) * spec.shared_weight
    w_u = {m: _unit(rng.standard_normal(spec.q_unique)) * spec.unique_weight for m in MODALITIES}
    y = z_s @ w_s + sum(z_u[m] @ w_u[m] for m in MODALITIES)
    y = y + spec.sigma * rng.standard_normal(n)
    y = np.clip(y, spec.y_min, spec.y_max)

    feats, lens = {}, {}
    q = spec.q_shared + spec.q_unique
    for m in MODALITIES:
        T, d = spec.seq_lens[m], spec.dims[m]
        n_dist = spec._n_distractor(m)
        n_sig = d - n_dist
        readout = rng.standard_normal((q, n_sig)) / math.sqrt(q)
        nuisance = rng.standard_normal((q, n_dist)) / math.sqrt(q)
        signal = np.concatenate([z_s, z_u[m]], axis=1) @ readout
        junk = np.concatenate([nu_s, nu_u[m]], axis=1) @ nuisance
        per_step = np.concatenate([signal, junk], axis=1)  # n x d

        low = spec.max_shift + 1
        length = rng.integers(max(low, (T + 1) // 2), T + 1, size=n)
        onset = rng.integers(0, spec.max_shift + 1, size=n)
        t = np.arange(T)[None, :]
        active = (t >= onset[:, None]) & (t < length[:, None])
        valid = t < length[:, None]
        x = per_step[:, None, :] * active[:, :, None]
        x = x + spec.sigma * rng.standard_normal((n, T, d)) * valid[:, :, None]
        feats[m] = x.astype(np.float32)
        lens[m] = length.astype(np.int64)

    latents = {"shared": z_s, "shared_nuisance": nu_s, "w_shared": w_s}
    for m in MODALITIES:
        latents[f"unique_{m}"] = z_u[m]
        latents[f"w_{m}"] = w_u[m]
    return SyntheticData(feats, lens, y.astype(np.float32), latents, spec)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# --- on-disk format --------------------------------------------------------

def _blob_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 1:
        count, T, d = arr.shape[0], 1, 1
    else:
        count, T, d = arr.shape
    header = np.array([MAGIC, FORMAT_VERSION, count, T, d, 4, 1, 0], dtype="<u4")
    return header.tobytes() + arr.tobytes()


def _read_blob(raw: bytes) -> np.ndarray:
    header = np.frombuffer(raw[: 4 * HEADER_FIELDS], dtype="<u4")
    if header.shape[0] != HEADER_FIELDS or header[0] != MAGIC:
        raise CorruptDatasetError("bad blob header")
    _, version, count, T, d, width, little, _ = (int(v) for v in header)
    if version != FORMAT_VERSION or width != 4 or little != 1:
        raise CorruptDatasetError(f"unsupported blob encoding (version={version}, width={width})")
    body = np.frombuffer(raw[4 * HEADER_FIELDS:], dtype="<f4")
    if body.size != count * T * d:
        raise CorruptDatasetError("blob size does not match its header")
    return body.reshape(count, T, d).copy()


def split_indices(n: int) -> Dict[str, List[int]]:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    idx = list(range(n))
    return {
        "train": idx[:n_train],
        "val": idx[n_train:n_train + n_val],
        "test": idx[n_train + n_val:],
    }


def write_dataset(data: SyntheticData, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    blobs = {m: _blob_bytes(data.features[m]) for m in MODALITIES}
    blobs["labels"] = _blob_bytes(data.labels)
    for name, raw in blobs.items():
        (out / f"{name}.bin").write_bytes(raw)
        checksums[name] = hashlib.sha256(raw).hexdigest()
    n = int(data.labels.shape[0])
    manifest = {
        "format_version": FORMAT_VERSION,
        "count": n,
        "dims": {m: int(data.features[m].shape[2]) for m in MODALITIES},
        "seq_lens": {m: int(data.features[m].shape[1]) for m in MODALITIES},
        "lengths": {m: data.lengths[m].tolist() for m in MODALITIES},
        "label_range": [data.spec.y_min, data.spec.y_max],
        "splits": split_indices(n),
        "checksums": checksums,
        "spec": asdict(data.spec),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def generate(spec: SyntheticSpec, out_dir) -> Path:
    """Synthesise ``spec`` and write it to ``out_dir``."""
    return write_dataset(synthesize(spec), out_dir)


@dataclass
class Dataset:
    features: Dict[str, torch.Tensor]
    lengths: Dict[str, torch.Tensor]
    labels: torch.Tensor
    manifest: dict

    @property
    def splits(self) -> Dict[str, List[int]]:
        return self.manifest["splits"]

    @property
    def label_range(self):
        return tuple(self.manifest["label_range"])

    def batch(self, idx: Sequence[int]) -> ModalityBatch:
        it = torch.as_tensor(list(idx), dtype=torch.long)
        return ModalityBatch(
            {m: self.features[m][it] for m in MODALITIES},
            {m: self.lengths[m][it] for m in MODALITIES},
            self.labels[it],
            it,
        )


def read_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDatasetError(f"cannot read manifest in {root}: {exc}") from exc
    arrays = {}
    for name in (*MODALITIES, "labels"):
        raw = (root / f"{name}.bin").read_bytes()
        if hashlib.sha256(raw).hexdigest() != manifest["checksums"][name]:
            raise CorruptDatasetError(f"checksum mismatch for {name}.bin")
        arrays[name] = _read_blob(raw)
    feats = {m: torch.from_numpy(arrays[m]) for m in MODALITIES}
    lengths = {m: torch.as_tensor(manifest["lengths"][m], dtype=torch.long) for m in MODALITIES}
    labels = torch.from_numpy(arrays["labels"].reshape(-1))
    return Dataset(feats, lengths, labels, manifest)


def epoch_order(indices: Sequence[int], shuffle_seed: Optional[int]) -> List[int]:
    idx = list(indices)
    if shuffle_seed is None:
        return idx
    perm = np.random.default_rng(shuffle_seed).permutation(len(idx))
    return [idx[i] for i in perm]


def iter_batches(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    split: Optional[str] = "train",
) -> Iterator[ModalityBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    indices = dataset.splits[split] if split else range(int(dataset.labels.shape[0]))
    order = epoch_order(indices, shuffle_seed)
    for start in range(0, len(order), batch_size):
        yield dataset.batch(order[start:start + batch_size])


def load_batches(path, batch_size: int, shuffle_seed: Optional[int] = None, split: Optional[str] = None):
    """Stream batches straight from a dataset directory (all samples when ``split`` is None)."""
    return iter_batches(read_dataset(path), batch_size, shuffle_seed, split)


# --- metrics ---------------------------------------------------------------

def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64).reshape(-1)


def binarize(values) -> np.ndarray:
    """Negative iff value < 0; zero joins the non-negative class."""
    return _as_array(values) >= 0


def _check_pair(pred, label):
    p, y = _as_array(pred), _as_array(label)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {y.shape[0]}")
    if p.size == 0:
        raise ValueError("metric of an empty input")
    return p, y


def acc2(pred, label) -> float:
    p, y = _check_pair(pred, label)
    return float(np.mean(binarize(p) == binarize(y)))


def f1(pred, label) -> float:
    """F1 of the non-negative class; 1.0 when neither side has a positive."""
    p, y = _check_pair(pred, label)
    bp, by = binarize(p), binarize(y)
    tp = int(np.sum(bp & by))
    fp = int(np.sum(bp & ~by))
    fn = int(np.sum(~bp & by))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def acc7(pred, label) -> float:
    p, y = _check_pair(pred, label)
    cp = round_half_away(np.clip(p, -3.0, 3.0))
    cy = round_half_away(np.clip(y, -3.0, 3.0))
    return float(np.mean(cp == cy))


def score(pred, label) -> Dict[str, float]:
    p, y = _check_pair(pred, label)
    return {
        "acc2": acc2(p, y),
        "f1": f1(p, y),
        "acc7": acc7(p, y),
        "mse": float(np.mean((p - y) ** 2)),
    }


def load_spec_file(path) -> SyntheticSpec:
    return SyntheticSpec.from_dict(json.loads(Path(path).read_text()))
