import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mind import losses as L
from mind import tensor as T
from mind.networks import MODALITIES, MInDModel, ModalityBatch, ModelConfig
from mind.tensor import Tensor
from mind.training import Adam
from mind.verify import loss_gradcheck

LN2 = math.log(2.0)


def make_model(d_k=4, dims=(5, 5, 5), seed=0, **kw):
    return MInDModel(ModelConfig(input_dims=dict(zip(MODALITIES, dims)), d_k=d_k, seed=seed, **kw))


def forward(model, n=8, seed=0):
    rng = np.random.default_rng(seed)
    x = {m: rng.normal(size=(n, model.config.input_dims[m])) for m in MODALITIES}
    batch = ModalityBatch(x, rng.normal(size=n), np.arange(n))
    return model.forward_full(batch, rng), batch.y


def zero_statistics_heads(model):
    for which in ("S",) + MODALITIES:
        last = model.config.stats_depth
        model.params[f"stats.{which}.{last}.weight"].data[:] = 0
        model.params[f"stats.{which}.{last}.bias"].data[:] = 0


def gram_hsic(r1, r2):
    """Independent oracle: explicit Gram matrices and centering matrix."""
    n = r1.shape[0]
    k1 = np.array([[float(np.dot(r1[i], r1[j])) for j in range(n)] for i in range(n)])
    k2 = np.array([[float(np.dot(r2[i], r2[j])) for j in range(n)] for i in range(n)])
    u = np.eye(n) - np.ones((n, n)) / n
    return float(np.trace(u @ k1 @ u @ k2)) / (n - 1) ** 2


# -- derangement ----------------------------------------------------------------
def test_derangement_has_no_fixed_points():
    rng = np.random.default_rng(0)
    for n in range(2, 12):
        for _ in range(20):
            p = L.derangement(n, rng)
            assert sorted(p) == list(range(n)) and not np.any(p == np.arange(n))


def test_derangement_needs_two():
    with pytest.raises(L.BatchSizeError):
        L.derangement(1, np.random.default_rng(0))


def test_derangement_is_uniform_for_three():
    rng = np.random.default_rng(1)
    seen = {tuple(L.derangement(3, rng)) for _ in range(200)}
    assert seen == {(1, 2, 0), (2, 0, 1)}


# -- mutual information -------------------------------------------------------------
def test_mi_zero_discriminator():
    model = make_model()
    zero_statistics_heads(model)
    x, y = Tensor(np.ones((6, 4))), Tensor(np.arange(24.0).reshape(6, 4))
    est = L.mi_jsd_estimate(model, x, y, "V", np.random.default_rng(0))
    assert abs(est.item() + 2 * LN2) <= 1e-12


def test_mi_estimate_never_positive():
    rng = np.random.default_rng(2)
    for seed in range(30):
        model = make_model(seed=seed)
        for p in model.params.values():
            p.data = p.data * rng.uniform(0.5, 5.0)
        x, y = Tensor(rng.normal(size=(5, 4)) * 3), Tensor(rng.normal(size=(5, 4)) * 3)
        assert L.mi_jsd_estimate(model, x, y, "A", rng).item() <= 0.0


def test_mi_uses_the_given_permutation():
    model = make_model()
    rng = np.random.default_rng(3)
    x, y = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4)))
    perm = np.array([1, 0, 3, 2])
    a = L.mi_jsd_estimate(model, x, y, "T", perm=perm).item()
    b = L.mi_jsd_estimate(model, x, y, "T", perm=perm).item()
    assert a == b
    joint = model.statistics_score(x, y, "T").data
    marg = model.statistics_score(x, Tensor(y.data[perm]), "T").data
    ref = np.mean(-np.logaddexp(0, -joint)) - np.mean(np.logaddexp(0, marg))
    assert abs(a - ref) < 1e-14


def test_mi_needs_two_rows():
    model = make_model()
    with pytest.raises(L.BatchSizeError):
        L.mi_jsd_estimate(model, Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))), "V", np.random.default_rng(0))


def _train_estimator(dependent: bool, steps: int = 500) -> float:
    rng = np.random.default_rng(7)
    model = make_model(d_k=4, seed=7)
    stats = {k: p for k, p in model.params.items() if k.startswith("stats.V.")}
    opt = Adam(stats, lr=1e-2)
    x = rng.normal(size=(64, 4))
    y = x.copy() if dependent else rng.normal(size=(64, 4))
    for _ in range(steps):
        est = L.mi_jsd_estimate(model, Tensor(x), Tensor(y), "V", rng)
        for p in stats.values():
            p.zero_grad()
        T.backward(T.neg(est))
        opt.step()
    return float(np.mean([L.mi_jsd_estimate(model, Tensor(x), Tensor(y), "V", rng).item() for _ in range(20)]))


def test_trained_estimator_separates_dependent_from_independent():
    assert _train_estimator(True) > _train_estimator(False)


def test_info_loss_with_zero_discriminators():
    model = make_model()
    zero_statistics_heads(model)
    out, _ = forward(model)
    assert abs(L.info_loss(model, out, np.random.default_rng(0)).item() - 18 * LN2) <= 1e-12
    assert abs(18 * LN2 - 12.4766) < 1e-4


def test_info_loss_nonnegative_and_has_nine_terms(monkeypatch):
    model = make_model()
    out, _ = forward(model)
    calls = []
    real = L._jsd_terms

    def spy(model, which, pairs, rng, perms=None):
        calls.append((which, len(pairs)))
        return real(model, which, pairs, rng, perms)

    monkeypatch.setattr(L, "_jsd_terms", spy)
    assert L.info_loss(model, out, np.random.default_rng(1)).item() >= 0
    assert calls == [("S", 3), ("V", 2), ("A", 2), ("T", 2)]


def test_info_loss_with_pinned_permutations_is_deterministic():
    model = make_model()
    out, _ = forward(model, n=5)
    perms = {(k, m): np.array([1, 2, 3, 4, 0]) for k in "SPN" for m in MODALITIES}
    a = L.info_loss(model, out, None, perms).item()
    b = L.info_loss(model, out, None, perms).item()
    assert a == b


# -- cross-correlation and Barlow Twins --------------------------------------------------
def test_cross_correlation_self():
    c = L.cross_correlation(Tensor([[1.0], [-1.0]]), Tensor([[1.0], [-1.0]]))
    assert abs(c.data[0, 0] - 1.0) < 1e-8


def test_cross_correlation_anti():
    a = np.random.default_rng(0).normal(size=(6, 3))
    c = L.cross_correlation(Tensor(a), Tensor(-a)).data
    np.testing.assert_allclose(np.diag(c), -1.0, atol=1e-8)


def test_cross_correlation_hand_fixture():
    a = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    b = np.array([[2.0, 1.0], [0.0, 1.0], [1.0, -2.0]])
    # centered: a' = a (columns sum to 0); b' = [[1,1],[-1,1],[0,-2]]
    # norms: |a'_0| = |a'_1| = sqrt2; |b'_0| = sqrt2, |b'_1| = sqrt6
    want = np.array([[1 / 2, 3 / math.sqrt(12)], [-1 / 2, 3 / math.sqrt(12)]])
    got = L.cross_correlation(Tensor(a), Tensor(b), eps=0.0).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_cross_correlation_zero_variance_column_is_finite():
    a = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    c = L.cross_correlation(Tensor(a), Tensor(a)).data
    assert np.all(np.isfinite(c)) and c[1, 1] == 0.0


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 4)), elements=st.floats(-10, 10)),
    st.integers(0, 2**31),
)
def test_cross_correlation_bounded(a, seed):
    b = np.random.default_rng(seed).normal(size=a.shape)
    c = L.cross_correlation(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(c) <= 1.0 + 1e-12)


def _whitened(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    q, _ = np.linalg.qr(x - x.mean(axis=0))
    return q - q.mean(axis=0)


def test_bt_identity_case():
    a = _whitened(10, 4, 0)
    assert L.bt_loss(Tensor(a), Tensor(a)).item() <= 1e-8


def test_bt_all_ones_case():
    a = np.array([[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]])
    assert abs(L.bt_loss(Tensor(a), Tensor(3 * a), lambda_bt=2.0).item() - 4.0) < 1e-7


def test_bt_lambda_defaults_to_width():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=(6, 3)))
    assert L.bt_loss(a, b).item() == L.bt_loss(a, b, 3.0).item()


def test_bt_matches_direct_formula():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    c = L.cross_correlation(Tensor(a), Tensor(b)).data
    off = c - np.diag(np.diag(c))
    want = np.sum((1 - np.diag(c)) ** 2) + 5.0 * np.sum(off**2)
    assert abs(L.bt_loss(Tensor(a), Tensor(b), 5.0).item() - want) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(1, 4), st.integers(0, 2**31))
def test_bt_nonnegative_and_symmetric(n, d, seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=(n, d))), Tensor(rng.normal(size=(n, d)))
    ab, ba = L.bt_loss(a, b).item(), L.bt_loss(b, a).item()
    assert ab >= 0 and abs(ab - ba) <= 1e-12 * max(1.0, ab)


def test_cons_loss_zero_for_identical_whitened_views():
    s = _whitened(12, 4, 3)
    assert L.cons_loss({m: Tensor(s) for m in MODALITIES}, 4.0).item() <= 1e-8


def test_cons_loss_symmetric_in_modalities():
    rng = np.random.default_rng(4)
    S = {m: Tensor(rng.normal(size=(6, 3))) for m in MODALITIES}
    ref = L.cons_loss(S).item()
    for order in itertools.permutations(MODALITIES):
        renamed = dict(zip(MODALITIES, (S[m] for m in order)))
        assert abs(L.cons_loss(renamed).item() - ref) <= 1e-12 * ref


def test_cons_loss_sums_three_pairs():
    rng = np.random.default_rng(5)
    S = {m: Tensor(rng.normal(size=(6, 3))) for m in MODALITIES}
    pairs = sum(L.bt_loss(S[a], S[b]).item() for a, b in [("V", "A"), ("V", "T"), ("A", "T")])
    assert abs(L.cons_loss(S).item() - pairs) < 1e-12


# -- HSIC -----------------------------------------------------------------------
def test_hsic_hand_value():
    r = Tensor([[1.0], [0.0]])
    assert abs(L.hsic(r, r).item() - 0.25) < 1e-15
    assert abs(gram_hsic(r.data, r.data) - 0.25) < 1e-15


def test_hsic_constant_signal_is_zero():
    rng = np.random.default_rng(0)
    r1 = Tensor(rng.normal(size=(5, 3)))
    r2 = Tensor(np.tile([1.0, -2.0], (5, 1)))
    assert abs(L.hsic(r1, r2).item()) < 1e-15


def test_hsic_matches_gram_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, d1, d2 = rng.integers(2, 9), rng.integers(1, 5), rng.integers(1, 5)
        r1, r2 = rng.normal(size=(n, d1)), rng.normal(size=(n, d2))
        assert abs(L.hsic(Tensor(r1), Tensor(r2)).item() - gram_hsic(r1, r2)) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_hsic_symmetric_and_nonnegative(n, d1, d2, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = Tensor(rng.normal(size=(n, d1))), Tensor(rng.normal(size=(n, d2)))
    a, b = L.hsic(r1, r2).item(), L.hsic(r2, r1).item()
    assert abs(a - b) <= 1e-12 and a >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31))
def test_hsic_invariant_to_row_order(n, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    p = rng.permutation(n)
    a = L.hsic(Tensor(r1), Tensor(r2)).item()
    b = L.hsic(Tensor(r1[p]), Tensor(r2[p])).item()
    assert abs(a - b) <= 1e-12 * max(1.0, a)


def test_hsic_needs_two_rows():
    with pytest.raises(L.BatchSizeError):
        L.hsic(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))


def test_diff_loss_has_twelve_terms():
    rng = np.random.default_rng(2)
    comps = [{m: Tensor(rng.normal(size=(5, 3))) for m in MODALITIES} for _ in range(3)]
    seen = []
    total = L.diff_loss(*comps, on_term=lambda a, b, t: seen.append((a, b, t.item())))
    assert len(seen) == 12 and len({(a, b) for a, b, _ in seen}) == 12
    assert abs(total.item() - sum(v for *_, v in seen)) < 1e-12
    kinds = sorted((a[0], b[0]) for a, b, _ in seen)
    assert kinds == sorted([("S", "P")] * 3 + [("S", "N")] * 3 + [("P", "P")] * 3 + [("P", "N")] * 3)


def test_diff_loss_constant_components():
    const = {m: Tensor(np.ones((4, 3))) for m in MODALITIES}
    assert L.diff_loss(const, const, const).item() == 0.0


# -- reconstruction ---------------------------------------------------------------
def test_recon_loss_hand_value():
    Z = {m: Tensor([[1.0, 1.0]]) for m in MODALITIES}
    Zh = {m: Tensor([[0.0, 0.0]]) for m in MODALITIES}
    assert L.recon_loss(Z, Zh, 2).item() == 1.0


def test_recon_loss_zero_and_nonnegative():
    rng = np.random.default_rng(3)
    Z = {m: Tensor(rng.normal(size=(4, 3))) for m in MODALITIES}
    assert L.recon_loss(Z, Z, 3).item() == 0.0
    Zh = {m: Tensor(rng.normal(size=(4, 3))) for m in MODALITIES}
    assert L.recon_loss(Z, Zh, 3).item() > 0


def test_recon_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        L.recon_loss({"V": Tensor(np.ones((2, 3)))}, {"V": Tensor(np.ones((2, 2)))})


def test_cyclic_loss_zero_when_decoders_hit_targets():
    model = make_model(d_k=3)
    cf, cn = np.arange(6.0), -np.arange(3.0)
    F = {m: Tensor(np.tile(cf, (4, 1))) for m in MODALITIES}
    N = {m: Tensor(np.tile(cn, (4, 1))) for m in MODALITIES}
    for m in MODALITIES:
        model.params[f"cyc.N.{m}.1.weight"].data[:] = 0
        model.params[f"cyc.N.{m}.1.bias"].data[:] = cf
        model.params[f"cyc.F.{m}.1.weight"].data[:] = 0
        model.params[f"cyc.F.{m}.1.bias"].data[:] = cn
    assert L.cyclic_recon_loss(model, F, N).item() == 0.0


def test_cyclic_loss_normalisation_and_raw_value():
    model = make_model(d_k=3)
    rng = np.random.default_rng(4)
    F = {m: Tensor(rng.normal(size=(5, 6))) for m in MODALITIES}
    N = {m: Tensor(rng.normal(size=(5, 3))) for m in MODALITIES}
    stats = {}
    norm = L.cyclic_recon_loss(model, F, N, stats=stats).item()
    raw = L.cyclic_recon_loss(model, F, N, raw=True).item()
    want_norm, want_raw = 0.0, 0.0
    for m in MODALITIES:
        ef = np.sum((F[m].data - model.decode_cyclic(N[m], "N2F", m).data) ** 2)
        en = np.sum((N[m].data - model.decode_cyclic(F[m], "F2N", m).data) ** 2)
        want_raw += ef + en
        want_norm += ef / (5 * 6) + en / (5 * 3)
    assert abs(raw - want_raw) < 1e-10 and abs(stats["cyr_raw"] - want_raw) < 1e-10
    assert abs(norm - want_norm) < 1e-12 and norm >= 0


def test_cyclic_loss_reversal_flips_gradient_wrt_noise():
    model = make_model(d_k=3)
    rng = np.random.default_rng(5)
    fd = {m: rng.normal(size=(4, 6)) for m in MODALITIES}
    nd = {m: rng.normal(size=(4, 3)) for m in MODALITIES}

    def grad_n(grl):
        # N enters only through the decoder input, so the target side is held fixed
        N = {m: Tensor(nd[m], requires_grad=True) for m in MODALITIES}
        F = {m: Tensor(fd[m]) for m in MODALITIES}
        loss = None
        for m in MODALITIES:
            term = T.sqnorm(T.sub(F[m], model.decode_cyclic(N[m], "N2F", m, grl=grl)))
            loss = term if loss is None else loss + term
        T.backward(loss)
        return {m: N[m].grad.copy() for m in MODALITIES}

    on, off = grad_n(True), grad_n(False)
    for m in MODALITIES:
        np.testing.assert_array_equal(on[m], -off[m])


# -- prediction losses ------------------------------------------------------------
def test_task_loss_regression():
    y = np.array([1.0, -2.0, 0.5])
    assert L.task_loss(Tensor(y.reshape(3, 1)), y, "regression").item() == 0.0
    assert abs(L.task_loss(Tensor(np.zeros((3, 1))), y, "regression").item() - (1 + 4 + 0.25) / 3) < 1e-15


def test_task_loss_uniform_two_class():
    scores = Tensor(np.array([[0.3, 0.3], [-2.0, -2.0], [5.0, 5.0]]))
    assert abs(L.task_loss(scores, np.array([0, 1, 1]), "classification").item() - LN2) < 1e-15


def test_task_loss_cross_entropy_value():
    scores = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    y = np.array([1, 0])
    logp = scores - np.log(np.exp(scores).sum(axis=1, keepdims=True))
    want = -(logp[0, 1] + logp[1, 0]) / 2
    assert abs(L.task_loss(Tensor(scores), y, "classification").item() - want) < 1e-14


@pytest.mark.parametrize("bad", [[0, 2], [-1, 0], [0.5, 1]])
def test_task_loss_label_range(bad):
    with pytest.raises(L.LabelError):
        L.task_loss(Tensor(np.zeros((2, 2))), np.array(bad), "classification")


def test_noise_pred_loss_same_form():
    y = np.array([0.5, 1.5])
    pred = Tensor(np.array([[0.0], [1.0]]))
    assert L.noise_pred_loss(pred, y, "regression").item() == L.task_loss(pred, y, "regression").item()
    assert L.noise_pred_loss(Tensor(y.reshape(2, 1)), y, "regression").item() == 0.0


def test_noise_pred_gradient_pushes_noise_away_from_label():
    model = make_model(d_k=3)
    rng = np.random.default_rng(6)
    raw = {m: rng.normal(size=(6, 3)) for m in MODALITIES}
    y = rng.normal(size=6)

    def grads(grl):
        N = {m: Tensor(raw[m], requires_grad=True) for m in MODALITIES}
        T.backward(L.noise_pred_loss(model.noise_predict(N, grl=grl), y, "regression"))
        return np.concatenate([N[m].grad for m in MODALITIES])

    np.testing.assert_array_equal(grads(True), -grads(False))


# -- composite --------------------------------------------------------------------
def test_total_all_ones():
    # seven unit terms; the last two share one weight
    lb = L.total_loss({k: 1.0 for k in L.LOSS_TERMS}, L.LossWeights(1, 1, 1, 1))
    assert lb.total == 7.0


def test_total_all_ones_example_without_cyclic_term():
    parts = {k: 1.0 for k in L.LOSS_TERMS if k != "cyr"}
    assert L.total_loss(parts, L.LossWeights(1, 1, 1, 1)).total == 6.0


def test_total_zero_weights_degenerates():
    rng = np.random.default_rng(0)
    parts = {k: float(v) for k, v in zip(L.LOSS_TERMS, rng.uniform(0, 5, 7))}
    lb = L.total_loss(parts, L.LossWeights(0, 0, 0, 0))
    assert lb.total == parts["task"] + parts["np"]


def test_total_linear_in_each_weight():
    rng = np.random.default_rng(1)
    parts = {k: float(v) for k, v in zip(L.LOSS_TERMS, rng.uniform(0, 5, 7))}
    base = L.LossWeights(0.3, 0.2, 0.7, 0.4)
    t0 = L.total_loss(parts, base).total
    for field, terms in (("alpha", ["info"]), ("beta", ["cons"]), ("gamma", ["diff"]), ("lam", ["recon", "cyr"])):
        w = L.LossWeights(**{**base.__dict__, field: getattr(base, field) + 1.0})
        delta = L.total_loss(parts, w).total - t0
        assert abs(delta - sum(parts[t] for t in terms)) < 1e-12


def test_disabled_term_reduces_total_by_weighted_value():
    model = make_model()
    out, y = forward(model)
    w = L.LossWeights()
    full = L.total_loss(L.compute_parts(model, out, y, w, np.random.default_rng(0)), w)
    for term, weight in (("task", 1), ("np", 1), ("info", w.alpha), ("cons", w.beta), ("diff", w.gamma), ("recon", w.lam), ("cyr", w.lam)):
        parts = L.compute_parts(model, out, y, w, np.random.default_rng(0), {term})
        lb = L.total_loss(parts, w)
        assert getattr(lb, term) == 0.0
        assert abs(full.total - lb.total - weight * getattr(full, term)) < 1e-9 * max(1.0, full.total)


def test_total_identity_on_real_parts():
    model = make_model()
    out, y = forward(model, seed=3)
    w = L.LossWeights(0.3, 0.02, 0.5, 2.0)
    lb = L.total_loss(L.compute_parts(model, out, y, w, np.random.default_rng(3)), w)
    ref = lb.task + lb.np + w.alpha * lb.info + w.beta * lb.cons + w.gamma * lb.diff + w.lam * (lb.recon + lb.cyr)
    assert abs(lb.total - ref) <= 1e-12 * max(1.0, abs(ref))
    assert min(lb.recon, lb.cyr, lb.cons, lb.diff) >= 0


@pytest.mark.parametrize("value", [math.nan, math.inf])
def test_total_rejects_non_finite(value):
    with pytest.raises(L.DivergenceError, match="diff"):
        L.total_loss({"task": 1.0, "diff": value}, L.LossWeights())


def test_breakdown_record_is_plain():
    lb = L.total_loss({"task": 2.0}, L.LossWeights())
    rec = lb.to_record()
    assert "objective" not in rec and rec["task"] == 2.0 and rec["total"] == 2.0


# -- gradient checks --------------------------------------------------------------
@pytest.mark.parametrize("term", L.LOSS_TERMS)
def test_loss_gradcheck(term):
    for seed in range(2):
        assert loss_gradcheck(term, seed) <= 1e-4


def test_classification_task_gradcheck():
    from mind.gradcheck import gradcheck

    rng = np.random.default_rng(9)
    scores = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 1, 0])
    assert gradcheck(lambda: L.task_loss(scores, y, "classification"), [scores]) <= 1e-6
