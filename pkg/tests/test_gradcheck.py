import numpy as np
import pytest

from lesionseg import gradcheck as G
from lesionseg import tensor as T
from lesionseg.tensor import Tensor, grad_check


def test_linear_function_near_exact():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 3, 3)))
    x = Tensor(x.data.astype(np.float64))
    report = grad_check(T.reduce_sum, x, name="sum")
    assert report.max_rel_error < 1e-10


def test_requires_double_precision():
    x = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError, match="float64"):
        grad_check(T.reduce_sum, x)


def test_corrupted_backward_fails(monkeypatch):
    # negative control: a poisoned analytic gradient must be reported
    monkeypatch.setenv("LESIONSEG_FAULT_INJECT", "relu")
    reports = G.run_checks(ops="elementwise", seed=0)
    relu_reports = [r for r in reports if r.name == "relu"]
    assert relu_reports and not relu_reports[0].passed


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unknown ops"):
        G.run_checks(ops="not_an_op")


@pytest.mark.parametrize("group", G.available_ops())
def test_all_groups_pass(group):
    reports = G.run_checks(ops=group, seed=0, tolerance=1e-6)
    failures = [(r.name, r.max_rel_error) for r in reports if not r.passed]
    assert not failures, f"gradient check failures: {failures}"
