"""Feature datasets: synthetic ground-truth factors, file containers, batching."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from mind.networks import MODALITIES, ModalityBatch

SPLITS = ("train", "valid", "test")
FEATURES_MAGIC = b"MNDF"
FEATURES_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIBI")


class SpecError(ValueError):
    pass


class FeatureFileError(ValueError):
    pass


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class DimensionMismatchError(FeatureFileError):
    pass


class NonFiniteFeatureError(FeatureFileError):
    pass


@dataclass
class SyntheticSpec:
    """Generative recipe: ``X_m = A_m [s; p_m] + sigma * eps``.

    Labels are ``w_s . s + sum_m w_{p,m} . p_m``; unspecified weights are drawn
    from the seed and rescaled so the label standard deviation is ``label_scale``.
    """

    n_samples: int = 2000
    d_shared: int = 4
    d_private: int = 4
    dims: dict[str, int] = field(default_factory=lambda: {"V": 16, "A": 16, "T": 16})
    noise_scale: float = 0.1
    label_scale: float = 1.5
    w_shared: list[float] | None = None
    w_private: dict[str, list[float]] | None = None
    orthonormal_mixing: bool = False
    task: str = "regression"
    n_classes: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 10:
            raise SpecError(f"n_samples must be >= 10, got {self.n_samples}")
        if self.d_shared < 1 or self.d_private < 1:
            raise SpecError("factor dims must be positive")
        for m in MODALITIES:
            if m not in self.dims:
                raise SpecError(f"missing feature dim for modality {m}")
            if self.d_shared + self.d_private > self.dims[m]:
                raise SpecError(
                    f"d_shared + d_private = {self.d_shared + self.d_private} exceeds "
                    f"d_{m} = {self.dims[m]}; factors would not be identifiable"
                )
        if self.noise_scale < 0:
            raise SpecError("noise_scale must be >= 0")
        if self.task not in ("regression", "classification"):
            raise SpecError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise SpecError("classification needs n_classes >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    x: dict[str, np.ndarray]
    labels: np.ndarray
    splits: np.ndarray
    task: str = "regression"
    n_classes: int = 0
    provenance: str = ""
    factors: dict | None = None

    def __post_init__(self):
        n = len(self.labels)
        for m in MODALITIES:
            if self.x[m].shape[0] != n:
                raise DimensionMismatchError(
                    f"modality {m} has {self.x[m].shape[0]} rows but there are {n} labels"
                )
            if not np.all(np.isfinite(self.x[m])):
                raise NonFiniteFeatureError(f"modality {m} contains NaN/Inf features")
        if len(self.splits) != n:
            raise DimensionMismatchError("split tags do not match sample count")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> dict[str, int]:
        return {m: self.x[m].shape[1] for m in MODALITIES}

    def subset(self, index: np.ndarray) -> "Dataset":
        factors = None
        if self.factors is not None:
            factors = {
                "s": self.factors["s"][index],
                "p": {m: self.factors["p"][m][index] for m in MODALITIES},
            }
        return Dataset(
            {m: self.x[m][index] for m in MODALITIES},
            self.labels[index],
            self.splits[index],
            self.task,
            self.n_classes,
            self.provenance,
            factors,
        )

    def split(self, name: str) -> "Dataset":
        if name == "all":
            return self
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS + ('all',)}")
        return self.subset(np.flatnonzero(self.splits == SPLITS.index(name)))

    def same_content(self, other: "Dataset") -> bool:
        """Bitwise equality of features, labels, split tags and task metadata."""
        return (
            self.task == other.task
            and self.n_classes == other.n_classes
            and all(np.array_equal(self.x[m], other.x[m]) for m in MODALITIES)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.splits, other.splits)
        )


def _split_tags(n: int) -> np.ndarray:
    n_train, n_valid = int(round(0.7 * n)), int(round(0.1 * n))
    tags = np.full(n, 2, dtype=np.uint8)
    tags[:n_train] = 0
    tags[n_train : n_train + n_valid] = 1
    return tags


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ds, dp, n = spec.d_shared, spec.d_private, spec.n_samples
    mixing = {}
    for m in MODALITIES:
        a = rng.standard_normal((spec.dims[m], ds + dp))
        if spec.orthonormal_mixing:
            a, _ = np.linalg.qr(a)
        else:
            a /= np.sqrt(ds + dp)
        mixing[m] = a
    w_s = rng.standard_normal(ds)
    w_p = {m: rng.standard_normal(dp) for m in MODALITIES}
    if spec.w_shared is not None:
        w_s = np.asarray(spec.w_shared, dtype=np.float64)
    if spec.w_private is not None:
        w_p = {m: np.asarray(spec.w_private[m], dtype=np.float64) for m in MODALITIES}
    if spec.w_shared is None and spec.w_private is None:
        norm = np.sqrt(w_s @ w_s + sum(w_p[m] @ w_p[m] for m in MODALITIES))
        w_s = w_s * spec.label_scale / norm
        w_p = {m: w_p[m] * spec.label_scale / norm for m in MODALITIES}

    s = rng.standard_normal((n, ds))
    p = {m: rng.standard_normal((n, dp)) for m in MODALITIES}
    x = {}
    for m in MODALITIES:
        clean = np.concatenate([s, p[m]], axis=1) @ mixing[m].T
        x[m] = clean + spec.noise_scale * rng.standard_normal((n, spec.dims[m]))
    score = s @ w_s + sum(p[m] @ w_p[m] for m in MODALITIES)

    if spec.task == "regression":
        labels = score
    elif spec.n_classes == 2:
        labels = (score > 0).astype(np.float64)
    else:
        edges = np.quantile(score, np.linspace(0, 1, spec.n_classes + 1)[1:-1])
        labels = np.searchsorted(edges, score, side="right").astype(np.float64)
    return Dataset(
        x,
        labels,
        _split_tags(n),
        spec.task,
        spec.n_classes if spec.task == "classification" else 0,
        f"synthetic:{spec.digest()}",
        {"s": s, "p": p, "mixing": mixing, "w_shared": w_s, "w_private": w_p},
    )


# -- binary container -----------------------------------------------------------
def features_bytes(ds: Dataset) -> bytes:
    kind = 0 if ds.task == "regression" else 1
    d = ds.dims
    parts = [
        _HEADER.pack(FEATURES_MAGIC, FEATURES_VERSION, ds.n_samples, d["V"], d["A"], d["T"], kind, ds.n_classes)
    ]
    for m in MODALITIES:
        parts.append(np.ascontiguousarray(ds.x[m], dtype="<f8").tobytes())
    if kind == 0:
        parts.append(np.asarray(ds.labels, dtype="<f8").tobytes())
    else:
        parts.append(np.asarray(ds.labels, dtype="<u4").tobytes())
    parts.append(np.asarray(ds.splits, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_features(ds: Dataset, path: str | Path) -> None:
    """Write the MNDF container, or a CSV directory when ``path`` ends with ``/`` or has no suffix."""
    path = Path(path)
    if path.suffix == "" or path.is_dir():
        write_features_csv(ds, path)
    else:
        path.write_bytes(features_bytes(ds))


def _parse_features(blob: bytes, source: str) -> Dataset:
    if len(blob) < 4 or blob[:4] != FEATURES_MAGIC:
        raise BadMagicError(f"{source}: bad magic {blob[:4]!r}, expected {FEATURES_MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"{source}: header truncated ({len(blob)} < {_HEADER.size} bytes)")
    _, version, n, dv, da, dt, kind, n_classes = _HEADER.unpack_from(blob)
    if version != FEATURES_VERSION:
        raise FeatureFileError(f"{source}: unsupported version {version}")
    if kind not in (0, 1):
        raise FeatureFileError(f"{source}: unknown task kind byte {kind}")
    dims = {"V": dv, "A": da, "T": dt}
    expected = _HEADER.size + 8 * n * (dv + da + dt) + (8 if kind == 0 else 4) * n + n
    if len(blob) < expected:
        raise TruncatedFileError(f"{source}: payload truncated ({len(blob)} of {expected} bytes)")
    if len(blob) > expected:
        raise DimensionMismatchError(
            f"{source}: header declares n={n}, dims={dims} ({expected} bytes) but file has {len(blob)}"
        )
    pos = _HEADER.size
    x = {}
    for m in MODALITIES:
        size = n * dims[m]
        x[m] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(n, dims[m]).astype(np.float64)
        pos += 8 * size
        if not np.all(np.isfinite(x[m])):
            raise NonFiniteFeatureError(f"{source}: modality {m} contains NaN/Inf features")
    if kind == 0:
        labels = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
    else:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
        if n and labels.max() >= n_classes:
            raise DimensionMismatchError(f"{source}: label {int(labels.max())} outside {n_classes} classes")
    splits = np.frombuffer(blob, dtype=np.uint8, count=n, offset=pos).copy()
    if np.any(splits > 2):
        raise FeatureFileError(f"{source}: split tags must be 0/1/2")
    return Dataset(
        x,
        labels,
        splits,
        "regression" if kind == 0 else "classification",
        n_classes,
        f"file:{source}",
    )


# -- CSV directory ----------------------------------------------------------------
def write_features_csv(ds: Dataset, directory: str | Path) -> None:
    """One ``<m>.csv`` per modality (header ``f0,f1,...``) plus ``labels.csv``.

    ``labels.csv`` has header ``label,split`` for regression or ``class,split``
    for classification, with split given by name.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        header = ",".join(f"f{i}" for i in range(ds.x[m].shape[1]))
        np.savetxt(directory / f"{m}.csv", ds.x[m], delimiter=",", fmt="%.17g", header=header, comments="")
    col = "label" if ds.task == "regression" else "class"
    with open(directory / "labels.csv", "w") as fh:
        fh.write(f"{col},split\n")
        for y, t in zip(ds.labels, ds.splits):
            val = repr(float(y)) if ds.task == "regression" else str(int(y))
            fh.write(f"{val},{SPLITS[t]}\n")
    if ds.task == "classification":
        (directory / "classes.txt").write_text(f"{ds.n_classes}\n")


def _load_csv_dir(directory: Path) -> Dataset:
    x = {}
    for m in MODALITIES:
        f = directory / f"{m}.csv"
        if not f.exists():
            raise FeatureFileError(f"{directory}: missing {f.name}")
        arr = np.loadtxt(f, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteFeatureError(f"{f}: contains NaN/Inf features")
        x[m] = arr
    lines = (directory / "labels.csv").read_text().strip().splitlines()
    col = lines[0].split(",")[0]
    rows = [ln.split(",") for ln in lines[1:]]
    labels = np.array([float(r[0]) for r in rows])
    splits = np.array([SPLITS.index(r[1]) for r in rows], dtype=np.uint8)
    task = "regression" if col == "label" else "classification"
    n_classes = 0
    if task == "classification":
        cfile = directory / "classes.txt"
        n_classes = int(cfile.read_text()) if cfile.exists() else int(labels.max()) + 1
    return Dataset(x, labels, splits, task, n_classes, f"csv:{directory}")


def load_features(path: str | Path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        return _load_csv_dir(path)
    return _parse_features(path.read_bytes(), str(path))


def dataset_digest(ds: Dataset) -> str:
    return hashlib.sha256(features_bytes(ds)).hexdigest()


# -- batching ---------------------------------------------------------------------
def batches(
    ds: Dataset,
    batch_size: int,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> Iterator[ModalityBatch]:
    """Yield mini-batches; training drops the short tail, evaluation keeps it."""
    if train and batch_size < 2:
        raise ValueError(f"training batch size must be >= 2, got {batch_size}")
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(ds.n_samples) if shuffle else np.arange(ds.n_samples)
    stop = (ds.n_samples // batch_size) * batch_size if train else ds.n_samples
    for start in range(0, stop, batch_size):
        idx = order[start : start + batch_size]
        yield ModalityBatch({m: ds.x[m][idx] for m in MODALITIES}, ds.labels[idx], idx)


def label_to_class7(score) -> np.ndarray | int:
    """Round half away from zero, clamp to [-3, 3], shift to [0, 6]."""
    s = np.asarray(score, dtype=np.float64)
    rounded = np.sign(s) * np.floor(np.abs(s) + 0.5)
    out = (np.clip(rounded, -3, 3) + 3).astype(np.int64)
    return int(out) if out.ndim == 0 else out
