import numpy as np
import pytest

from mind import losses
from mind import tensor as T
from mind.verify import default_checks, format_results, hsic_bruteforce, run_checks


@pytest.fixture(scope="module")
def results():
    return run_checks()


def test_every_check_passes(results):
    failing = [(r.name, r.detail) for r in results if not r.passed]
    assert not failing


def test_at_least_ten_named_checks(results):
    names = [r.name for r in results]
    assert len(names) >= 10 and len(set(names)) == len(names)
    assert sum(n.startswith("gradcheck L_") for n in names) == len(losses.LOSS_TERMS)


def test_report_layout(results):
    text = format_results(results)
    assert text.splitlines()[-1] == f"{len(results)}/{len(results)} checks passed"
    assert text.count("PASS") == len(results)


def test_sign_error_in_hsic_is_caught(monkeypatch):
    real = losses.hsic
    monkeypatch.setattr(losses, "hsic", lambda a, b: T.neg(real(a, b)))
    checks = [c for c in default_checks() if c[0] == "HSIC vs brute force"]
    (row,) = run_checks(checks)
    assert not row.passed
    assert "FAIL" in format_results([row])


def test_crashing_check_is_reported():
    def boom():
        raise RuntimeError("kaput")

    (row,) = run_checks([("explodes", boom)])
    assert not row.passed and "kaput" in row.detail


def test_bruteforce_oracle_on_hand_case():
    # r1 = r2 = [1, -1]^T: K = [[1,-1],[-1,1]], already centered, Tr(K K) = 4, divided by (n-1)^2 = 1
    r = np.array([[1.0], [-1.0]])
    assert hsic_bruteforce(r, r) == 4.0
