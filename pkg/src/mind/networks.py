"""Parametric sub-networks: input projections, shared/private encoders,
statistics networks, decoders, fusion layer and the two prediction heads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from mind import tensor as T
from mind.tensor import Tensor

MODALITIES = ("V", "A", "T")
CHECKPOINT_MAGIC = b"MNDP"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    input_dims: dict[str, int] = field(default_factory=lambda: {"V": 16, "A": 16, "T": 16})
    d_k: int = 64
    task: str = "regression"
    n_classes: int = 0
    stats_hidden: int | None = None
    stats_depth: int = 2
    head_hidden: int | None = None
    head_depth: int = 2
    grl_scale: float = 1.0
    per_modality_recon: bool = False
    fusion: str = "disentangled"
    seed: int = 0

    def __post_init__(self):
        self.input_dims = {m: int(self.input_dims[m]) for m in MODALITIES}
        if self.d_k < 2:
            raise ConfigError(f"d_k must be >= 2, got {self.d_k}")
        if any(d < 1 for d in self.input_dims.values()):
            raise ConfigError(f"input dims must be positive, got {self.input_dims}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task kind {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if self.fusion not in ("disentangled", "raw"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.grl_scale <= 0:
            raise ConfigError("grl_scale must be positive")

    @property
    def out_dim(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    @property
    def stats_width(self) -> int:
        return self.stats_hidden or self.d_k

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.d_k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _mlp_dims(d_in: int, hidden: int, depth: int, d_out: int) -> list[tuple[int, int]]:
    dims = [d_in] + [hidden] * depth + [d_out]
    return list(zip(dims[:-1], dims[1:]))


def layer_plan(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    """Ordered (name, fan_in, fan_out) for every linear layer in the model."""
    dk, sw, hw = cfg.d_k, cfg.stats_width, cfg.head_width
    plan: list[tuple[str, int, int]] = []
    for m in MODALITIES:
        plan.append((f"proj.{m}", cfg.input_dims[m], dk))
    plan.append(("shared", dk, dk))
    for m in MODALITIES:
        plan.append((f"private.{m}", dk, dk))
    for i, (a, b) in enumerate(_mlp_dims(4 * dk, sw, cfg.stats_depth, 1)):
        plan.append((f"stats.S.{i}", a, b))
    for m in MODALITIES:
        for i, (a, b) in enumerate(_mlp_dims(2 * dk, sw, cfg.stats_depth, 1)):
            plan.append((f"stats.{m}.{i}", a, b))
    recon_names = [f"recon.{m}" for m in MODALITIES] if cfg.per_modality_recon else ["recon"]
    for name in recon_names:
        for i, (a, b) in enumerate(_mlp_dims(3 * dk, dk, 1, dk)):
            plan.append((f"{name}.{i}", a, b))
    for m in MODALITIES:
        for i, (a, b) in enumerate(_mlp_dims(dk, dk, 1, 2 * dk)):
            plan.append((f"cyc.N.{m}.{i}", a, b))
        for i, (a, b) in enumerate(_mlp_dims(2 * dk, dk, 1, dk)):
            plan.append((f"cyc.F.{m}.{i}", a, b))
    if cfg.fusion == "raw":
        plan.append(("fusion_raw", 3 * dk, dk))
    else:
        plan.append(("fusion", 6 * dk, dk))
    for i, (a, b) in enumerate(_mlp_dims(dk, hw, cfg.head_depth, cfg.out_dim)):
        plan.append((f"head.{i}", a, b))
    for i, (a, b) in enumerate(_mlp_dims(3 * dk, hw, cfg.head_depth, cfg.out_dim)):
        plan.append((f"noise_head.{i}", a, b))
    return plan


@dataclass
class ModalityBatch:
    x: dict[str, np.ndarray]
    y: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class DisentangledSet:
    Z: dict[str, Tensor]
    S: dict[str, Tensor]
    P: dict[str, Tensor]
    G: dict[str, Tensor]
    N: dict[str, Tensor]
    F: dict[str, Tensor]
    Z_hat: dict[str, Tensor]
    h: Tensor
    y_hat: Tensor
    y_noise: Tensor | None
    modalities: tuple[str, ...]


class MInDModel:
    """All trainable parameters plus the forward maps that use them.

    ``params`` is an ordered dict of ``"<layer>.weight"`` / ``"<layer>.bias"``
    leaves. Weights are stored (out, in).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed)
        for name, fan_in, fan_out in layer_plan(config):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"{name}.bias"] = Tensor(np.zeros(fan_out), requires_grad=True)

    # -- bookkeeping --------------------------------------------------
    def parameters(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
            p.data = np.array(arrays[k], dtype=np.float64, copy=True)

    def _layer(self, name: str, x: Tensor) -> Tensor:
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _mlp(self, prefix: str, x: Tensor, n_layers: int) -> Tensor:
        for i in range(n_layers - 1):
            x = T.gelu(self._layer(f"{prefix}.{i}", x))
        return self._layer(f"{prefix}.{n_layers - 1}", x)

    @staticmethod
    def _check_modality(m: str) -> None:
        if m not in MODALITIES:
            raise ConfigError(f"unknown modality {m!r}; expected one of {MODALITIES}")

    def _check_width(self, x: Tensor, width: int, what: str) -> None:
        if x.data.ndim != 2 or x.shape[1] != width:
            raise ConfigError(f"{what}: expected width {width}, got shape {x.shape}")

    # -- sub-networks -------------------------------------------------
    def project_input(self, x: Tensor, m: str) -> Tensor:
        self._check_modality(m)
        self._check_width(x, self.config.input_dims[m], f"project_input[{m}]")
        return self._layer(f"proj.{m}", x)

    def encode_shared(self, z: Tensor) -> Tensor:
        self._check_width(z, self.config.d_k, "encode_shared")
        return T.gelu(self._layer("shared", z))

    def encode_private(self, x: Tensor, m: str) -> Tensor:
        self._check_modality(m)
        self._check_width(x, self.config.d_k, f"encode_private[{m}]")
        return T.gelu(self._layer(f"private.{m}", x))

    def sample_noise(self, n: int, rng: np.random.Generator) -> Tensor:
        return sample_noise(n, self.config.d_k, rng)

    def statistics_score(self, x: Tensor, y: Tensor, which: str) -> Tensor:
        """T_omega(x, y) per row; ``which`` is ``"S"`` or a modality tag."""
        if which != "S":
            self._check_modality(which)
        if x.shape[0] != y.shape[0]:
            raise T.ShapeError(f"statistics_score: row counts differ {x.shape} vs {y.shape}")
        return self._mlp(f"stats.{which}", T.concat([x, y]), self.config.stats_depth + 1)

    def decode_recon(self, s: Tensor, p: Tensor, n: Tensor, m: str | None = None) -> Tensor:
        prefix = f"recon.{m}" if self.config.per_modality_recon else "recon"
        return self._mlp(prefix, T.concat([s, p, n]), 2)

    def decode_cyclic(
        self, x: Tensor, direction: str, m: str, *, grl: bool = True, grl_scale: float | None = None
    ) -> Tensor:
        """Cross-predict between F_m = S_m ⊕ P_m and N_m through a gradient reversal.

        ``"F2N"`` maps F_m (2 d_k) to d_k with theta_F; ``"N2F"`` maps N_m (d_k)
        to 2 d_k with theta_N.
        """
        self._check_modality(m)
        dk = self.config.d_k
        if direction == "F2N":
            self._check_width(x, 2 * dk, "decode_cyclic F2N")
            prefix = f"cyc.F.{m}"
        elif direction == "N2F":
            self._check_width(x, dk, "decode_cyclic N2F")
            prefix = f"cyc.N.{m}"
        else:
            raise ConfigError(f"unknown cyclic direction {direction!r}")
        if grl:
            x = T.grad_reverse(x, grl_scale or self.config.grl_scale)
        return self._mlp(prefix, x, 2)

    def fuse_predict(self, S: dict[str, Tensor], P: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        parts = [S[m] for m in MODALITIES] + [P[m] for m in MODALITIES]
        h = self._layer("fusion", T.concat(parts))
        return h, self._mlp("head", h, self.config.head_depth + 1)

    def fuse_raw(self, Z: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
        h = self._layer("fusion_raw", T.concat([Z[m] for m in MODALITIES]))
        return h, self._mlp("head", h, self.config.head_depth + 1)

    def noise_predict(
        self, N: dict[str, Tensor], *, grl: bool = True, grl_scale: float | None = None
    ) -> Tensor:
        x = T.concat([N[m] for m in MODALITIES])
        if grl:
            x = T.grad_reverse(x, grl_scale or self.config.grl_scale)
        return self._mlp("noise_head", x, self.config.head_depth + 1)

    # -- full pass ----------------------------------------------------
    def forward_full(
        self,
        batch: ModalityBatch,
        rng: np.random.Generator | None,
        *,
        modalities: tuple[str, ...] = MODALITIES,
        mute_invariant: bool = False,
        mute_specific: bool = False,
        with_noise: bool = True,
    ) -> DisentangledSet:
        """Run every branch for the active modalities on one graph.

        Dropped modalities contribute zero blocks wherever a fixed-width
        concatenation expects them. The noise branch needs ``rng``.
        """
        n = len(batch)
        dk = self.config.d_k
        zeros = Tensor(np.zeros((n, dk)))
        Z, S, P, G, N, F, Z_hat = {}, {}, {}, {}, {}, {}, {}
        for m in modalities:
            Z[m] = self.project_input(Tensor(batch.x[m]), m)
            S[m] = self.encode_shared(Z[m])
            P[m] = self.encode_private(Z[m], m)
            F[m] = T.concat([S[m], P[m]])
        if with_noise:
            for m in modalities:
                G[m] = self.sample_noise(n, rng)
                N[m] = self.encode_private(G[m], m)
                Z_hat[m] = self.decode_recon(S[m], P[m], N[m], m)
        if self.config.fusion == "raw":
            h, y_hat = self.fuse_raw({m: Z.get(m, zeros) for m in MODALITIES})
        else:
            fs = {m: zeros if mute_invariant else S.get(m, zeros) for m in MODALITIES}
            fp = {m: zeros if mute_specific else P.get(m, zeros) for m in MODALITIES}
            h, y_hat = self.fuse_predict(fs, fp)
        y_noise = None
        if with_noise:
            y_noise = self.noise_predict({m: N.get(m, zeros) for m in MODALITIES})
        return DisentangledSet(Z, S, P, G, N, F, Z_hat, h, y_hat, y_noise, tuple(modalities))


def sample_noise(n: int, d_k: int, rng: np.random.Generator) -> Tensor:
    """Fresh i.i.d. standard normal block; a constant in the graph."""
    if n < 1 or d_k < 1:
        raise ValueError(f"sample_noise needs positive sizes, got {n}x{d_k}")
    return Tensor(rng.standard_normal((n, d_k)))


# -- checkpoint I/O ---------------------------------------------------------
def _write_group(buf: list[bytes], name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.asarray(arr, dtype="<f8")
    buf.append(struct.pack("<I", len(raw)))
    buf.append(raw)
    buf.append(struct.pack("<I", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.append(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(
    path: str | Path,
    model: MInDModel,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Binary layout: ``MNDP``, u32 version, u32 config length, config JSON,
    u32 group count, then per group (u32 name length, name, u32 rank,
    u32 dims, little-endian f64 row-major payload)."""
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True)
    hb = header.encode("utf-8")
    groups = list(model.params.items()) + sorted((extra or {}).items())
    buf = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb]
    buf.append(struct.pack("<I", len(groups)))
    for name, value in groups:
        _write_group(buf, name, value.data if isinstance(value, Tensor) else value)
    Path(path).write_bytes(b"".join(buf))


def load_checkpoint(path: str | Path) -> tuple[MInDModel, dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, hlen = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    model = MInDModel(ModelConfig.from_dict(header["model"]))
    missing = [k for k in model.params if k not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing parameter groups {missing[:3]}")
    model.load_arrays({k: arrays[k] for k in model.params})
    extra = {k: v for k, v in arrays.items() if k not in model.params}
    return model, extra, header.get("meta", {})
