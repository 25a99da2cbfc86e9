"""Self-checks run by ``mind verify``: gradients, oracles, bounds, GRL signs."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mind import losses
from mind import tensor as T
from mind.gradcheck import gradcheck
from mind.networks import MODALITIES, MInDModel, ModelConfig
from mind.tensor import Tensor

GRAD_TOL = 1e-4
LOG2 = math.log(2.0)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# -- fixtures ------------------------------------------------------------------------
def small_model(seed: int, d_k: int = 3, task: str = "regression", n_classes: int = 0) -> MInDModel:
    """Tiny model with every parameter (biases included) drawn at random."""
    cfg = ModelConfig(
        input_dims={"V": 4, "A": 3, "T": 5}, d_k=d_k, task=task, n_classes=n_classes,
        stats_hidden=3, head_hidden=3, seed=seed,
    )
    model = MInDModel(cfg)
    rng = np.random.default_rng(10_000 + seed)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.5, 0.5, size=p.data.shape)
    return model


class LossHarness:
    """Leaf inputs Z_m and fixed noise G_m feeding the real encoders.

    ``loss(term)`` rebuilds S, P, N, F, Z-hat and the requested term on every
    call, so it can be handed to :func:`gradcheck`. Gradient reversal is
    switched off here; its sign contract is checked separately.
    """

    def __init__(self, seed: int, n: int = 5, d_k: int = 3, task: str = "regression", n_classes: int = 0):
        rng = np.random.default_rng(seed)
        self.model = small_model(seed, d_k, task, n_classes)
        self.n = n
        self.Z = {m: Tensor(rng.uniform(-2, 2, size=(n, d_k)), requires_grad=True) for m in MODALITIES}
        self.G = {m: Tensor(rng.standard_normal((n, d_k))) for m in MODALITIES}
        if task == "regression":
            self.y = rng.uniform(-2, 2, size=n)
        else:
            self.y = rng.integers(0, n_classes, size=n).astype(np.float64)
        self.perm_seed = seed + 1

    def components(self):
        m_ = self.model
        S = {m: m_.encode_shared(self.Z[m]) for m in MODALITIES}
        P = {m: m_.encode_private(self.Z[m], m) for m in MODALITIES}
        N = {m: m_.encode_private(self.G[m], m) for m in MODALITIES}
        return S, P, N

    def loss(self, term: str) -> Tensor:
        model = self.model
        S, P, N = self.components()
        if term == "task":
            _, y_hat = model.fuse_predict(S, P)
            return losses.task_loss(y_hat, self.y, model.config.task)
        if term == "np":
            return losses.noise_pred_loss(model.noise_predict(N, grl=False), self.y, model.config.task)
        if term == "info":
            from mind.networks import DisentangledSet

            out = DisentangledSet(self.Z, S, P, self.G, N, {}, {}, None, None, None, MODALITIES)
            return losses.info_loss(model, out, np.random.default_rng(self.perm_seed))
        if term == "cons":
            return losses.cons_loss(S, float(model.config.d_k))
        if term == "diff":
            return losses.diff_loss(S, P, N)
        if term == "recon":
            z_hat = {m: model.decode_recon(S[m], P[m], N[m], m) for m in MODALITIES}
            return losses.recon_loss(self.Z, z_hat, model.config.d_k)
        if term == "cyr":
            F = {m: T.concat([S[m], P[m]]) for m in MODALITIES}
            return losses.cyclic_recon_loss(model, F, N, grl=False)
        raise KeyError(term)

    def leaves(self, term: str) -> list[Tensor]:
        p = self.model.params
        prefixes = {
            "task": ("fusion.", "head."),
            "np": ("noise_head.",),
            "info": ("stats.",),
            "cons": (),
            "diff": (),
            "recon": ("recon",),
            "cyr": ("cyc.",),
        }[term]
        own = [t for k, t in p.items() if k.startswith(prefixes)]
        enc = [t for k, t in p.items() if k.startswith(("shared.", "private."))]
        return list(self.Z.values()) + enc + own


def loss_gradcheck(term: str, seed: int) -> float:
    h = LossHarness(seed)
    return gradcheck(lambda: h.loss(term), h.leaves(term))


def hsic_bruteforce(r1: np.ndarray, r2: np.ndarray) -> float:
    """Explicit Gram matrices, explicit centering matrix, explicit trace."""
    n = r1.shape[0]
    k1 = np.array([[float(np.dot(r1[i], r1[j])) for j in range(n)] for i in range(n)])
    k2 = np.array([[float(np.dot(r2[i], r2[j])) for j in range(n)] for i in range(n)])
    u = np.array([[(1.0 if i == j else 0.0) - 1.0 / n for j in range(n)] for i in range(n)])
    prod = u @ k1 @ u @ k2
    return sum(prod[i, i] for i in range(n)) / (n - 1) ** 2


# -- checks -------------------------------------------------------------------------------
def check_primitives() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    a = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (3, 2)), requires_grad=True)
    c = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    pos = Tensor(rng.uniform(0.5, 2, (4, 3)), requires_grad=True)
    cases: dict[str, Callable[[], Tensor]] = {
        "matmul": lambda: T.sum(T.square(T.matmul(a, b))),
        "gelu": lambda: T.sum(T.mul(T.gelu(a), c)),
        "softplus": lambda: T.sum(T.mul(T.softplus(a), c)),
        "center": lambda: T.sum(T.mul(T.batch_standardize(a), c)),
        "softmax": lambda: T.sum(T.mul(T.softmax(a), c)),
        "log": lambda: T.sum(T.mul(T.log(pos), c)),
        "div": lambda: T.sum(T.div(a, pos)),
        "sqrt": lambda: T.sum(T.sqrt(pos)),
        "concat": lambda: T.sum(T.square(T.concat([a, c]))),
        "trace": lambda: T.trace(T.matmul(a, T.transpose(c))),
        "mean": lambda: T.mean(T.mul(a, c)),
        "sqnorm": lambda: T.sqnorm(T.sub(a, c)),
    }
    worst = {}
    for name, fn in cases.items():
        worst[name] = gradcheck(fn, [a, b, c, pos])
    bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    return not bad, f"max rel err {max(worst.values()):.2e}" + (f"; failing {sorted(bad)}" if bad else "")


def check_loss_grad(term: str, draws: int = 3) -> tuple[bool, str]:
    errs = [loss_gradcheck(term, seed) for seed in range(draws)]
    return max(errs) <= GRAD_TOL, f"max rel err {max(errs):.2e} over {draws} draws"


def check_hsic_oracle(instances: int = 100) -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 9))
        r1 = rng.standard_normal((n, int(rng.integers(1, 5))))
        r2 = rng.standard_normal((n, int(rng.integers(1, 5))))
        got = float(losses.hsic(Tensor(r1), Tensor(r2)).data)
        worst = max(worst, abs(got - hsic_bruteforce(r1, r2)))
    return worst <= 1e-10, f"max abs diff {worst:.2e} over {instances} instances"


def check_mi_bound(draws: int = 200) -> tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = -math.inf
    for k in range(draws):
        model = small_model(k)
        for p in model.params.values():
            p.data[...] = rng.normal(0, 3, size=p.data.shape)
        n = int(rng.integers(2, 12))
        x = Tensor(rng.normal(0, 3, (n, 3 * model.config.d_k)))
        y = Tensor(rng.normal(0, 3, (n, model.config.d_k)))
        worst = max(worst, float(losses.mi_jsd_estimate(model, x, y, "S", rng).data))
    return worst <= 0.0, f"max estimate {worst:.4f} over {draws} draws"


def check_mi_zero_discriminator() -> tuple[bool, str]:
    model = small_model(0)
    last = model.config.stats_depth
    model.params[f"stats.S.{last}.weight"].data[...] = 0.0
    model.params[f"stats.S.{last}.bias"].data[...] = 0.0
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((6, 3 * model.config.d_k)))
    y = Tensor(rng.standard_normal((6, model.config.d_k)))
    v = float(losses.mi_jsd_estimate(model, x, y, "S", rng).data)
    return abs(v + 2 * LOG2) <= 1e-12, f"estimate {v:.15f} vs {-2 * LOG2:.15f}"


def check_bt_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((8, 4))
    # QR of a centered matrix: orthonormal columns that stay centered
    a, _ = np.linalg.qr(raw - raw.mean(axis=0))
    v = float(losses.bt_loss(Tensor(a), Tensor(a)).data)
    return abs(v) <= 1e-8, f"bt_loss(a, a) = {v:.2e}"


def check_grl_forward() -> tuple[bool, str]:
    x = Tensor(np.random.default_rng(5).standard_normal((4, 3)), requires_grad=True)
    y = T.grad_reverse(x, 1.0)
    same = y.data.tobytes() == x.data.tobytes()
    return same, "forward bitwise identical" if same else "forward differs"


def _noise_grads(grl: bool, seed: int = 6):
    h = LossHarness(seed)
    rng = np.random.default_rng(seed)
    N = {m: Tensor(rng.standard_normal((h.n, 3)), requires_grad=True) for m in MODALITIES}
    h.model.zero_grad()
    loss = losses.noise_pred_loss(h.model.noise_predict(N, grl=grl), h.y, "regression")
    T.backward(loss)
    head = {k: p.grad.copy() for k, p in h.model.params.items() if k.startswith("noise_head.")}
    return {m: N[m].grad.copy() for m in MODALITIES}, head


def check_grl_noise_predict() -> tuple[bool, str]:
    on_n, on_head = _noise_grads(True)
    off_n, off_head = _noise_grads(False)
    flipped = all(np.array_equal(on_n[m], -off_n[m]) for m in MODALITIES)
    head_same = all(np.array_equal(on_head[k], off_head[k]) for k in on_head)
    nonzero = any(np.any(off_n[m] != 0) for m in MODALITIES)
    ok = flipped and head_same and nonzero
    return ok, f"noise grads flipped={flipped}, head grads unchanged={head_same}"


def _cyclic_grads(grl: bool, seed: int = 7):
    h = LossHarness(seed)
    rng = np.random.default_rng(seed)
    x = {m: Tensor(rng.standard_normal((h.n, 3)), requires_grad=True) for m in MODALITIES}
    h.model.zero_grad()
    loss = None
    for m in MODALITIES:
        target = Tensor(rng.standard_normal((h.n, 6)))
        term = T.sqnorm(T.sub(target, h.model.decode_cyclic(x[m], "N2F", m, grl=grl)))
        loss = term if loss is None else loss + term
    T.backward(loss)
    dec = {k: p.grad.copy() for k, p in h.model.params.items() if k.startswith("cyc.")}
    return {m: x[m].grad.copy() for m in MODALITIES}, dec


def check_grl_decode_cyclic() -> tuple[bool, str]:
    on_n, on_dec = _cyclic_grads(True)
    off_n, off_dec = _cyclic_grads(False)
    flipped = all(np.array_equal(on_n[m], -off_n[m]) for m in MODALITIES)
    dec_same = all(np.array_equal(on_dec[k], off_dec[k]) for k in on_dec)
    return flipped and dec_same, f"input grads flipped={flipped}, decoder grads unchanged={dec_same}"


def check_total_identity() -> tuple[bool, str]:
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        parts = {k: float(rng.uniform(0, 10)) for k in losses.LOSS_TERMS}
        w = losses.LossWeights(*rng.uniform(0, 2, size=4))
        lb = losses.total_loss(parts, w)
        ref = (
            parts["task"] + parts["np"] + w.alpha * parts["info"] + w.beta * parts["cons"]
            + w.gamma * parts["diff"] + w.lam * (parts["recon"] + parts["cyr"])
        )
        worst = max(worst, abs(lb.total - ref))
    return worst <= 1e-12, f"max |total - weighted sum| {worst:.1e}"


def default_checks() -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [("tensor primitives gradcheck", check_primitives)]
    for term in losses.LOSS_TERMS:
        checks.append((f"gradcheck L_{term}", lambda term=term: check_loss_grad(term)))
    checks += [
        ("HSIC vs brute force", check_hsic_oracle),
        ("MI estimate <= 0", check_mi_bound),
        ("MI zero discriminator = -2 ln 2", check_mi_zero_discriminator),
        ("Barlow Twins identity case", check_bt_identity),
        ("GRL forward identity", check_grl_forward),
        ("GRL sign flip in noise_predict", check_grl_noise_predict),
        ("GRL sign flip in decode_cyclic", check_grl_decode_cyclic),
        ("weighted total identity", check_total_identity),
    ]
    return checks


def run_checks(checks=None) -> list[CheckResult]:
    results = []
    for name, fn in checks or default_checks():
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"{type(err).__name__}: {err}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results) + 2
    lines = [f"{'check'.ljust(width)}result  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}{'PASS' if r.passed else 'FAIL'}    {r.detail}")
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines)
