"""Loss terms of the disentanglement objective and their weighted total."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from mind import tensor as T
from mind.networks import MODALITIES, DisentangledSet, MInDModel
from mind.tensor import Tensor

LOSS_TERMS = ("task", "np", "info", "cons", "diff", "recon", "cyr")
EPS_CORR = 1e-8


class BatchSizeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} ({value})")
        self.term = term
        self.value = value


class LabelError(ValueError):
    pass


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random permutation with no fixed points (rejection sampling)."""
    if n < 2:
        raise BatchSizeError(f"a derangement needs n >= 2, got {n}")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


# -- mutual information -------------------------------------------------------
def _jsd_terms(
    model: MInDModel,
    which: str,
    pairs: Sequence[tuple[Tensor, Tensor]],
    rng: np.random.Generator | None,
    perms: Sequence[np.ndarray] | None = None,
) -> list[Tensor]:
    """JSD estimates for several (x, y) pairs sharing one statistics network.

    Joint and shuffled rows of every pair go through the network in a single
    pass; each estimate uses only its own rows.
    """
    xs, ys, bounds = [], [], []
    offset = 0
    for k, (x, y) in enumerate(pairs):
        n = x.shape[0]
        if n < 2:
            raise BatchSizeError(f"MI estimate needs n >= 2, got {n}")
        perm = perms[k] if perms is not None else derangement(n, rng)
        xs += [x, x]
        ys += [y, T.take_rows(y, perm)]
        bounds.append((offset, n))
        offset += 2 * n
    scores = model.statistics_score(T.concat(xs, axis=0), T.concat(ys, axis=0), which)
    out = []
    for start, n in bounds:
        joint = T.take_rows(scores, np.arange(start, start + n))
        marginal = T.take_rows(scores, np.arange(start + n, start + 2 * n))
        out.append(T.mean(T.neg(T.softplus(T.neg(joint)))) - T.mean(T.softplus(marginal)))
    return out


def mi_jsd_estimate(
    model: MInDModel,
    x: Tensor,
    y: Tensor,
    which: str,
    rng: np.random.Generator | None = None,
    perm: np.ndarray | None = None,
) -> Tensor:
    """Jensen-Shannon MI lower-bound surrogate; always <= 0.

    The product of marginals is approximated by pairing each ``x_i`` with
    ``y_{perm(i)}`` for a random derangement ``perm``.
    """
    return _jsd_terms(model, which, [(x, y)], rng, None if perm is None else [perm])[0]


def info_loss(
    model: MInDModel,
    out: DisentangledSet,
    rng: np.random.Generator | None,
    perms: dict[tuple[str, str], np.ndarray] | None = None,
) -> Tensor:
    """Sum of negated MI estimates: (Z_V⊕Z_A⊕Z_T; S_m), (Z_m; P_m), (G_m; N_m).

    ``perms`` may pin the derangement for each ``(kind, modality)`` key with
    kind in ``{"S", "P", "N"}``.
    """
    mods = out.modalities
    n = next(iter(out.Z.values())).shape[0]
    zeros = Tensor(np.zeros((n, model.config.d_k)))
    z_all = T.concat([out.Z.get(m, zeros) for m in MODALITIES])

    def pick(keys):
        return None if perms is None else [perms[k] for k in keys]

    terms = _jsd_terms(model, "S", [(z_all, out.S[m]) for m in mods], rng, pick([("S", m) for m in mods]))
    for m in mods:
        terms += _jsd_terms(
            model, m, [(out.Z[m], out.P[m]), (out.G[m], out.N[m])], rng, pick([("P", m), ("N", m)])
        )
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return T.neg(total)


# -- consistency ----------------------------------------------------------------
def cross_correlation(a: Tensor, b: Tensor, eps: float = EPS_CORR) -> Tensor:
    """Batch cross-correlation matrix of two views, shape (d, d)."""
    if a.shape != b.shape:
        raise T.ShapeError(f"cross_correlation: shapes differ {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise BatchSizeError(f"cross_correlation needs n >= 2, got {a.shape[0]}")
    ac, bc = T.batch_standardize(a), T.batch_standardize(b)
    num = T.matmul(T.transpose(ac), bc)
    na = T.sqrt(T.sum(T.square(ac), axis=0))
    nb = T.sqrt(T.sum(T.square(bc), axis=0))
    return T.div(num, T.outer(na, nb) + eps)


def bt_loss(a: Tensor, b: Tensor, lambda_bt: float | None = None) -> Tensor:
    """Barlow Twins redundancy reduction: diagonal toward 1, off-diagonal toward 0."""
    c = cross_correlation(a, b)
    d = c.shape[0]
    lam = float(d) if lambda_bt is None else lambda_bt
    eye = np.eye(d)
    diag = T.mul(c, Tensor(eye))
    on = T.sqnorm(T.sub(Tensor(eye), diag))
    off = T.sqnorm(T.sub(c, diag))
    return on + off * lam


def cons_loss(S: dict[str, Tensor], lambda_bt: float | None = None, modalities=MODALITIES) -> Tensor:
    pairs = list(itertools.combinations(modalities, 2))
    if not pairs:
        return Tensor(0.0)
    total = bt_loss(S[pairs[0][0]], S[pairs[0][1]], lambda_bt)
    for m1, m2 in pairs[1:]:
        total = total + bt_loss(S[m1], S[m2], lambda_bt)
    return total


# -- difference -----------------------------------------------------------------
def hsic(r1: Tensor, r2: Tensor) -> Tensor:
    """Linear-kernel HSIC, ``Tr(U K1 U K2) / (n-1)^2``.

    With inner-product kernels the trace equals the squared Frobenius norm of
    the centered cross-product ``(U r1)^T (U r2)``, which avoids n x n Grams.
    """
    n = r1.shape[0]
    if n < 2:
        raise BatchSizeError(f"hsic needs n >= 2, got {n}")
    if r2.shape[0] != n:
        raise T.ShapeError(f"hsic: row counts differ {r1.shape} vs {r2.shape}")
    cross = T.matmul(T.transpose(T.batch_standardize(r1)), T.batch_standardize(r2))
    return T.sqnorm(cross) / float((n - 1) ** 2)


def diff_pairs(modalities: Sequence[str] = MODALITIES) -> list[tuple[tuple[str, str], tuple[str, str]]]:
    """(component, modality) pairs whose HSIC is penalised."""
    pairs = []
    for m in modalities:
        pairs.append((("S", m), ("P", m)))
    for m in modalities:
        pairs.append((("S", m), ("N", m)))
    for m1, m2 in itertools.combinations(modalities, 2):
        pairs.append((("P", m1), ("P", m2)))
    for m in modalities:
        pairs.append((("P", m), ("N", m)))
    return pairs


def diff_loss(
    S: dict[str, Tensor],
    P: dict[str, Tensor],
    N: dict[str, Tensor],
    modalities: Sequence[str] = MODALITIES,
    on_term: Callable[[tuple, tuple, Tensor], None] | None = None,
) -> Tensor:
    comps = {"S": S, "P": P, "N": N}
    total = None
    for (c1, m1), (c2, m2) in diff_pairs(modalities):
        term = hsic(comps[c1][m1], comps[c2][m2])
        if on_term is not None:
            on_term((c1, m1), (c2, m2), term)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# -- reconstruction ---------------------------------------------------------------
def recon_loss(Z: dict[str, Tensor], Z_hat: dict[str, Tensor], d_k: int | None = None) -> Tensor:
    """Mean over modalities of the batch-averaged squared error divided by d_k."""
    mods = list(Z_hat)
    total = None
    for m in mods:
        if Z[m].shape != Z_hat[m].shape:
            raise T.ShapeError(f"recon_loss[{m}]: {Z[m].shape} vs {Z_hat[m].shape}")
        n, width = Z[m].shape
        term = T.sqnorm(T.sub(Z[m], Z_hat[m])) / float(n * (d_k or width))
        total = term if total is None else total + term
    return total / float(len(mods))


def cyclic_recon_loss(
    model: MInDModel,
    F: dict[str, Tensor],
    N: dict[str, Tensor],
    modalities: Sequence[str] = MODALITIES,
    *,
    grl: bool = True,
    raw: bool = False,
    stats: dict | None = None,
) -> Tensor:
    """F_m and N_m each predicted from the other through a gradient reversal.

    Each squared norm is batch-averaged and divided by the target width;
    ``raw=True`` returns the plain sum of squared norms instead. The plain
    sum is also written to ``stats["cyr_raw"]`` when ``stats`` is given.
    """
    total = None
    raw_sum = 0.0
    for m in modalities:
        f_hat = model.decode_cyclic(N[m], "N2F", m, grl=grl)
        n_hat = model.decode_cyclic(F[m], "F2N", m, grl=grl)
        ef = T.sqnorm(T.sub(F[m], f_hat))
        en = T.sqnorm(T.sub(N[m], n_hat))
        raw_sum += float(ef.data) + float(en.data)
        if not raw:
            n = F[m].shape[0]
            ef = ef / float(n * F[m].shape[1])
            en = en / float(n * N[m].shape[1])
        term = ef + en
        total = term if total is None else total + term
    if stats is not None:
        stats["cyr_raw"] = raw_sum
    return total if total is not None else Tensor(0.0)


# -- prediction -----------------------------------------------------------------
def task_loss(y_hat: Tensor, y: np.ndarray, kind: str) -> Tensor:
    """Mean squared error (regression) or mean softmax cross-entropy."""
    y = np.asarray(y)
    n = y_hat.shape[0]
    if y.shape[0] != n:
        raise T.ShapeError(f"task_loss: {n} predictions for {y.shape[0]} labels")
    if kind == "regression":
        target = Tensor(np.asarray(y, dtype=np.float64).reshape(n, 1))
        return T.sqnorm(T.sub(y_hat, target)) / float(n)
    if kind == "classification":
        k = y_hat.shape[1]
        labels = y.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= k) or np.any(labels != y):
            raise LabelError(f"labels must be integers in [0, {k}), got {np.unique(y)[:5]}")
        onehot = np.zeros((n, k))
        onehot[np.arange(n), labels] = 1.0
        return T.neg(T.sum(T.mul(T.log_softmax(y_hat), Tensor(onehot)))) / float(n)
    raise ValueError(f"unknown task kind {kind!r}")


def noise_pred_loss(y_noise: Tensor, y: np.ndarray, kind: str) -> Tensor:
    """Task loss on the noise-branch prediction (which already went through the GRL)."""
    return task_loss(y_noise, y, kind)


# -- composite --------------------------------------------------------------------
@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 1.0
    lam: float = 1.0
    lambda_bt: float | None = None


@dataclass
class LossBreakdown:
    task: float
    np: float
    info: float
    cons: float
    diff: float
    recon: float
    cyr: float
    total: float
    alpha: float
    beta: float
    gamma: float
    lam: float
    lambda_bt: float | None = None
    cyr_raw: float | None = None
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def terms(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in LOSS_TERMS}

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "objective"}


def total_loss(parts: dict[str, Tensor | float], weights: LossWeights) -> LossBreakdown:
    """``task + np + α·info + β·cons + γ·diff + λ·(recon + cyr)``.

    Missing or ``None`` parts count as exactly zero.
    """
    vals: dict[str, Tensor] = {}
    for k in LOSS_TERMS:
        p = parts.get(k)
        t = p if isinstance(p, Tensor) else Tensor(0.0 if p is None else float(p))
        v = float(t.data)
        if not math.isfinite(v):
            raise DivergenceError(k, v)
        vals[k] = t
    w = weights
    obj = (
        vals["task"]
        + vals["np"]
        + vals["info"] * w.alpha
        + vals["cons"] * w.beta
        + vals["diff"] * w.gamma
        + (vals["recon"] + vals["cyr"]) * w.lam
    )
    return LossBreakdown(
        **{k: float(vals[k].data) for k in LOSS_TERMS},
        total=float(obj.data),
        alpha=w.alpha,
        beta=w.beta,
        gamma=w.gamma,
        lam=w.lam,
        lambda_bt=w.lambda_bt,
        objective=obj,
    )


def compute_parts(
    model: MInDModel,
    out: DisentangledSet,
    y: np.ndarray,
    weights: LossWeights,
    rng: np.random.Generator,
    disabled: frozenset[str] | set[str] = frozenset(),
    stats: dict | None = None,
) -> dict[str, Tensor | None]:
    """Evaluate every enabled term on one forward pass; disabled terms are ``None``.

    ``stats`` collects side values for logging (currently ``cyr_raw``).
    """
    kind = model.config.task
    mods = out.modalities
    lam_bt = weights.lambda_bt if weights.lambda_bt is not None else float(model.config.d_k)
    parts: dict[str, Tensor | None] = dict.fromkeys(LOSS_TERMS)
    if "task" not in disabled:
        parts["task"] = task_loss(out.y_hat, y, kind)
    if "np" not in disabled:
        parts["np"] = noise_pred_loss(out.y_noise, y, kind)
    if "info" not in disabled:
        parts["info"] = info_loss(model, out, rng)
    if "cons" not in disabled:
        parts["cons"] = cons_loss(out.S, lam_bt, mods)
    if "diff" not in disabled:
        parts["diff"] = diff_loss(out.S, out.P, out.N, mods)
    if "recon" not in disabled:
        parts["recon"] = recon_loss(out.Z, out.Z_hat, model.config.d_k)
    if "cyr" not in disabled:
        parts["cyr"] = cyclic_recon_loss(model, out.F, out.N, mods, stats=stats)
    return parts
