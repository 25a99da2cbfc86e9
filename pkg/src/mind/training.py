"""Optimisation, evaluation metrics, disentanglement probes and ablations."""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from mind import tensor as T
from mind.data import Dataset, batches, label_to_class7
from mind.losses import LOSS_TERMS, DivergenceError, LossWeights, compute_parts, total_loss
from mind.networks import MODALITIES, MInDModel, ModelConfig


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


class UnsupportedProbeError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 1e-4
    gamma: float = 0.1
    lam: float = 1.0
    lambda_bt: float | None = None
    disabled_losses: list[str] = field(default_factory=list)
    mute_invariant: bool = False
    mute_specific: bool = False
    drop_modalities: list[str] = field(default_factory=list)
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        bad = set(self.disabled_losses) - set(LOSS_TERMS)
        if bad:
            raise ValueError(f"unknown loss terms {sorted(bad)}; expected names from {LOSS_TERMS}")
        bad = set(self.drop_modalities) - set(MODALITIES)
        if bad:
            raise ValueError(f"unknown modalities {sorted(bad)}")
        if len(self.drop_modalities) >= len(MODALITIES):
            raise ValueError("cannot drop every modality")
        for name in ("lr", "eps", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.lam, self.lambda_bt)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m not in self.drop_modalities)

    def forward_options(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "mute_invariant": self.mute_invariant,
            "mute_specific": self.mute_specific,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adaptive-moment optimiser over the flattened parameter vector.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """

    def __init__(self, params: dict[str, T.Tensor], lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        sizes = [p.data.size for p in params.values()]
        self._cuts = np.cumsum(sizes)[:-1]
        total = int(np.sum(sizes))
        self.m = np.zeros(total)
        self.v = np.zeros(total)

    def _flat(self, arrays) -> np.ndarray:
        return np.concatenate([a.ravel() for a in arrays])

    def step(self) -> None:
        g = self._flat(p.grad for p in self.params.values())
        if not np.all(np.isfinite(g)):
            bad = next(k for k, p in self.params.items() if not np.all(np.isfinite(p.grad)))
            raise DivergenceError(f"grad:{bad}", float("nan"))
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        update = self.lr * (self.m / c1) / (np.sqrt(self.v / c2) + self.eps)
        for p, u in zip(self.params.values(), np.split(update, self._cuts)):
            p.data -= u.reshape(p.data.shape)

    def _split(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {
            k: piece.reshape(p.data.shape).copy()
            for (k, p), piece in zip(self.params.items(), np.split(flat, self._cuts))
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array(float(self.t))}
        for k, a in self._split(self.m).items():
            out[f"adam.m:{k}"] = a
        for k, a in self._split(self.v).items():
            out[f"adam.v:{k}"] = a
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"])
        self.m = self._flat(arrays[f"adam.m:{k}"] for k in self.params)
        self.v = self._flat(arrays[f"adam.v:{k}"] for k in self.params)


# -- metrics -----------------------------------------------------------------------
def pearson(y: np.ndarray, yhat: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; ``(0.0, True)`` when either side has zero variance."""
    yc, pc = y - y.mean(), yhat - yhat.mean()
    denom = math.sqrt(float(yc @ yc) * float(pc @ pc))
    if denom == 0.0:
        return 0.0, True
    return float(yc @ pc) / denom, False


def weighted_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Per-class F1 averaged with true-class support as weights."""
    classes = np.unique(y_true)
    total = 0.0
    for c in classes:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(y_true == c)
    return float(total / len(y_true)) if len(y_true) else 0.0


@dataclass
class MetricsReport:
    n: int = 0
    acc7: float | None = None
    acc2: float | None = None
    f1: float | None = None
    mae: float | None = None
    corr: float | None = None
    corr_degenerate: bool = False
    acc: float | None = None
    history: list[dict] = field(default_factory=list)
    probe: dict | None = None

    def summary(self) -> dict:
        return {
            k: v
            for k, v in asdict(self).items()
            if k not in ("history", "probe") and v is not None
        }

    def to_dict(self) -> dict:
        return asdict(self)


def regression_metrics(y: np.ndarray, yhat: np.ndarray) -> MetricsReport:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    corr, degenerate = pearson(y, yhat)
    nonzero = y != 0
    yt, yp = (y[nonzero] > 0).astype(int), (yhat[nonzero] > 0).astype(int)
    return MetricsReport(
        n=len(y),
        acc7=float(np.mean(label_to_class7(y) == label_to_class7(yhat))),
        acc2=float(np.mean(yt == yp)) if len(yt) else 0.0,
        f1=weighted_f1(yt, yp),
        mae=float(np.mean(np.abs(y - yhat))),
        corr=corr,
        corr_degenerate=degenerate,
    )


def classification_metrics(y: np.ndarray, scores: np.ndarray, n_classes: int) -> MetricsReport:
    y = np.asarray(y).astype(np.int64)
    pred = np.argmax(scores, axis=1)
    acc = float(np.mean(pred == y))
    if n_classes == 2:
        return MetricsReport(n=len(y), acc2=acc, f1=weighted_f1(y, pred))
    return MetricsReport(n=len(y), acc=acc, f1=weighted_f1(y, pred))


def predict(model: MInDModel, ds: Dataset, batch_size: int = 32, forward_options: dict | None = None) -> np.ndarray:
    opts = dict(forward_options or {})
    if "modalities" in opts:
        opts["modalities"] = tuple(opts["modalities"])
    outs = []
    for b in batches(ds, batch_size, shuffle=False, train=False):
        outs.append(model.forward_full(b, None, with_noise=False, **opts).y_hat.data)
    return np.concatenate(outs, axis=0)


def evaluate(
    model: MInDModel,
    ds: Dataset,
    split: str = "test",
    batch_size: int = 32,
    forward_options: dict | None = None,
) -> MetricsReport:
    part = ds.split(split)
    if part.n_samples == 0:
        raise ValueError(f"split {split!r} is empty")
    out = predict(model, part, batch_size, forward_options)
    if model.config.task == "regression":
        return regression_metrics(part.labels, out)
    return classification_metrics(part.labels, out, model.config.n_classes)


def selection_score(report: MetricsReport, task: str) -> float:
    """Lower is better."""
    if task == "regression":
        return report.mae
    return -(report.acc2 if report.acc2 is not None else report.acc)


# -- training ---------------------------------------------------------------------
@dataclass
class TrainResult:
    model: MInDModel
    optimizer: Adam
    report: MetricsReport
    step_log: list[dict]
    best_epoch: int
    forward_options: dict


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (shuffle, noise, derangement) generators from one master seed."""
    return tuple(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))


def train(
    ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    on_step: Callable[[dict], None] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    model = MInDModel(model_cfg)
    opt = Adam(model.params, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
    shuffle_rng, noise_rng, mi_rng = seed_streams(train_cfg.seed)
    weights = train_cfg.weights
    disabled = frozenset(train_cfg.disabled_losses)
    fwd = train_cfg.forward_options()
    fwd_call = dict(fwd, modalities=tuple(fwd["modalities"]))
    train_ds, valid_ds = ds.split("train"), ds.split("valid")
    if valid_ds.n_samples == 0:
        valid_ds = train_ds

    step_log: list[dict] = []
    history: list[dict] = []
    best = (math.inf, -1, model.state_arrays(), opt.state_arrays())
    stale = 0
    step = 0

    def result(report: MetricsReport, best_epoch: int) -> TrainResult:
        return TrainResult(model, opt, report, step_log, best_epoch, fwd)

    def diverged(err: DivergenceError, epoch: int) -> TrainingDiverged:
        # roll back to the best state seen so far (the initial one before any epoch ends)
        model.load_arrays(best[2])
        opt.load_state_arrays(best[3])
        return TrainingDiverged(f"epoch {epoch} step {step}: {err}", result(MetricsReport(history=history), best[1]))

    for epoch in range(train_cfg.epochs):
        sums = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
        count = 0
        for batch in batches(train_ds, train_cfg.batch_size, shuffle=True, rng=shuffle_rng):
            try:
                out = model.forward_full(batch, noise_rng, **fwd_call)
                side: dict = {}
                parts = compute_parts(model, out, batch.y, weights, mi_rng, disabled, side)
                lb = total_loss(parts, weights)
                lb.cyr_raw = side.get("cyr_raw")
            except DivergenceError as err:
                raise diverged(err, epoch) from err
            model.zero_grad()
            T.backward(lb.objective)
            try:
                opt.step()
            except DivergenceError as err:
                raise diverged(err, epoch) from err
            record = {"step": step, "epoch": epoch, **lb.to_record()}
            step_log.append(record)
            if on_step is not None:
                on_step(record)
            for k in sums:
                sums[k] += record[k]
            count += 1
            step += 1
        val = evaluate(model, valid_ds, "all", train_cfg.batch_size, fwd)
        entry = {
            "epoch": epoch,
            "train_loss": {k: v / max(count, 1) for k, v in sums.items()},
            "valid": val.summary(),
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        score = selection_score(val, model_cfg.task)
        if score < best[0]:
            best = (score, epoch, model.state_arrays(), opt.state_arrays())
            stale = 0
        else:
            stale += 1
            if train_cfg.patience is not None and stale > train_cfg.patience:
                break

    if best[1] >= 0:
        model.load_arrays(best[2])
        opt.load_state_arrays(best[3])
    report = evaluate(model, valid_ds, "all", train_cfg.batch_size, fwd)
    report.history = history
    return result(report, best[1])


# -- probes -------------------------------------------------------------------------
LABEL_PROBE_RIDGES = (1e-6, 1e-4, 1e-2, 1.0, 1e2, 1e4)
def _ridge_fit(x: np.ndarray, y: np.ndarray, reg: float):
    xm, ym = x.mean(axis=0), y.mean(axis=0)
    xc = x - xm
    w = np.linalg.solve(xc.T @ xc + reg * np.eye(x.shape[1]), xc.T @ (y - ym))
    return lambda z: (z - xm) @ w + ym


def r_squared(y: np.ndarray, yhat: np.ndarray) -> float:
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean(axis=0)) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0


def _components(model: MInDModel, ds: Dataset, noise_seed: int, batch_size: int = 256):
    rng = np.random.default_rng(noise_seed)
    keep: dict[str, list[np.ndarray]] = {}
    for b in batches(ds, batch_size, train=False):
        out = model.forward_full(b, rng)
        for kind, comp in (("S", out.S), ("P", out.P), ("N", out.N)):
            for m in MODALITIES:
                keep.setdefault(f"{kind}.{m}", []).append(comp[m].data)
    return {k: np.concatenate(v) for k, v in keep.items()}


def probe_disentanglement(
    model: MInDModel, ds: Dataset, *, ridge: float = 1e-6, noise_seed: int = 0
) -> dict:
    """Linear read-outs of the ground-truth factors from every component.

    Probes are fitted on the train split and scored (R², label accuracy) on
    the test split. Ridge strengths for the label probe are per-sample values
    from ``LABEL_PROBE_RIDGES``.
    """
    if ds.factors is None:
        raise UnsupportedProbeError("probing needs a synthetic dataset with ground-truth factors")
    tr, te = ds.split("train"), ds.split("test")
    if te.n_samples == 0:
        te = tr
    ctr, cte = _components(model, tr, noise_seed), _components(model, te, noise_seed + 1)
    r2 = {}
    for key in ctr:
        m = key.split(".")[1]
        for target, ytr, yte in (
            ("s", tr.factors["s"], te.factors["s"]),
            ("p", tr.factors["p"][m], te.factors["p"][m]),
        ):
            f = _ridge_fit(ctr[key], ytr, ridge)
            r2[f"{key}->{target}"] = r_squared(yte, f(cte[key]))

    def classes(d: Dataset) -> np.ndarray:
        return (d.labels > 0).astype(int) if d.task == "regression" else d.labels.astype(int)

    # The label probe picks its ridge strength on the validation split, so an
    # input without label information falls back to predicting the train majority.
    va = ds.split("valid")
    if va.n_samples == 0:
        va = tr
    cva = _components(model, va, noise_seed + 2)
    ctr_lab, cva_lab, cte_lab = classes(tr), classes(va), classes(te)
    k = int(max(ctr_lab.max(), cva_lab.max(), cte_lab.max())) + 1

    def noise_features(c):
        return np.concatenate([c[f"N.{m}"] for m in MODALITIES], axis=1)

    noise_tr, noise_va, noise_te = noise_features(ctr), noise_features(cva), noise_features(cte)
    best = None
    for reg in LABEL_PROBE_RIDGES:
        f = _ridge_fit(noise_tr, np.eye(k)[ctr_lab], reg * len(ctr_lab))
        val_acc = float(np.mean(np.argmax(f(noise_va), axis=1) == cva_lab))
        if best is None or val_acc > best[0]:
            best = (val_acc, reg, f)
    acc = float(np.mean(np.argmax(best[2](noise_te), axis=1) == cte_lab))
    # the baseline is what a predictor without any input achieves: the train majority class scored on test
    train_major = int(np.argmax(np.bincount(ctr_lab, minlength=k)))
    majority = float(np.mean(cte_lab == train_major))
    test_majority = float(np.bincount(cte_lab, minlength=k).max() / len(cte_lab))
    return {
        "r2": r2,
        "noise_label_acc": acc,
        "majority_rate": majority,
        "test_majority_rate": test_majority,
        "label_probe_ridge": best[1],
    }


# -- ablations ------------------------------------------------------------------------
ABLATION_GROUPS = ("Role of Modality", "Role of Disentanglement", "Role of Constraint")
_AUX_TERMS = ["np", "info", "cons", "diff", "recon", "cyr"]


@dataclass(frozen=True)
class AblationSpec:
    name: str
    group: str | None
    train_changes: dict
    model_changes: dict


def ablation_specs() -> list[AblationSpec]:
    rows = [AblationSpec("MInD", None, {}, {})]
    for m, label in (("V", "Visual"), ("A", "Audio"), ("T", "Text")):
        rows.append(AblationSpec(f"w/o {label}", ABLATION_GROUPS[0], {"drop_modalities": [m]}, {}))
    rows.append(AblationSpec("w/o M-Invariant", ABLATION_GROUPS[1], {"mute_invariant": True}, {}))
    rows.append(AblationSpec("w/o M-Specific", ABLATION_GROUPS[1], {"mute_specific": True}, {}))
    rows.append(
        AblationSpec("Non-Disentangled", ABLATION_GROUPS[1], {"disabled_losses": list(_AUX_TERMS)}, {"fusion": "raw"})
    )
    for term, label in (
        ("info", "L_Info"), ("cons", "L_Cons"), ("diff", "L_Diff"),
        ("recon", "L_Recon"), ("cyr", "L_CyR"), ("np", "L_NP"),
    ):
        rows.append(AblationSpec(f"w/o {label}", ABLATION_GROUPS[2], {"disabled_losses": [term]}, {}))
    rows.append(AblationSpec("Only L_Task", ABLATION_GROUPS[2], {"disabled_losses": list(_AUX_TERMS)}, {}))
    return rows


def derive_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([master, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def ablation_configs(
    spec: AblationSpec, model_cfg: ModelConfig, train_cfg: TrainConfig
) -> tuple[ModelConfig, TrainConfig]:
    seed = derive_seed(train_cfg.seed, spec.name)
    changes = dict(spec.train_changes)
    if "disabled_losses" in changes:
        changes["disabled_losses"] = sorted(set(train_cfg.disabled_losses) | set(changes["disabled_losses"]))
    tcfg = replace(train_cfg, seed=seed, **changes)
    mcfg = replace(model_cfg, seed=seed, **spec.model_changes)
    return mcfg, tcfg


@dataclass
class AblationRow:
    name: str
    group: str | None
    seed: int
    report: MetricsReport
    disabled_losses: list[str]


def _run_row(args) -> AblationRow:
    spec, ds, model_cfg, train_cfg = args
    mcfg, tcfg = ablation_configs(spec, model_cfg, train_cfg)
    res = train(ds, mcfg, tcfg)
    report = evaluate(res.model, ds, "valid" if ds.split("valid").n_samples else "train", tcfg.batch_size, res.forward_options)
    report.history = res.report.history
    return AblationRow(spec.name, spec.group, tcfg.seed, report, tcfg.disabled_losses)


def run_ablation_suite(
    ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    *,
    specs: list[AblationSpec] | None = None,
    workers: int = 1,
) -> list[AblationRow]:
    """Train the full model and every single-change variant; rows keep ``specs`` order."""
    jobs = [(s, ds, model_cfg, train_cfg) for s in (specs or ablation_specs())]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_row, jobs))
    return [_run_row(j) for j in jobs]


def format_ablation_table(rows: list[AblationRow], task: str) -> str:
    if task == "regression":
        cols = [("MAE", "mae", ".3f"), ("Corr", "corr", ".3f"), ("Acc2", "acc2", ".4f")]
    else:
        cols = [("Acc2" if rows[0].report.acc2 is not None else "Acc", "acc2" if rows[0].report.acc2 is not None else "acc", ".4f"), ("F1", "f1", ".4f")]
    width = max(len(r.name) for r in rows) + 2
    header = "Models".ljust(width) + "".join(c[0].rjust(10) for c in cols)
    rule = "-" * len(header)
    lines = [header, rule]
    group = None
    for r in rows:
        if r.group != group and r.group is not None:
            lines += [rule, r.group.center(len(header)), rule]
            group = r.group
        vals = "".join(format(getattr(r.report, c[1]), c[2]).rjust(10) for c in cols)
        lines.append(r.name.ljust(width) + vals)
    return "\n".join(lines) + "\n"
