import io
import math

import numpy as np
import pytest

from exfm.errors import InsufficientGrid, NotConverged
from exfm.numerics import child_seeds, seeded_rng
from exfm.theory import (
    CSV_HEADER,
    AHConstructionConfig,
    SAConstructionConfig,
    median_w1_error,
    run_ah_multi_head,
    run_ah_single_head,
    sa_closed_forms,
    sa_gd_vs_closed_form,
    sa_objective_grads,
    sa_scaling_experiment,
    sample_sa_problem,
    uniform_teacher_weights,
    with_gamma,
)
from exfm.theory import _build

# Auxiliary heads


def test_uniform_weights():
    assert uniform_teacher_weights(5) == (0.0, 0.25, 0.25, 0.25, 0.25)
    assert uniform_teacher_weights(1) == (1.0,)


@pytest.mark.parametrize(
    "kwargs",
    [dict(d=21), dict(d=0), dict(mu=-0.1), dict(alpha_weights=(0.5, 0.5)), dict(T=100)],
)
def test_ah_config_validation(kwargs):
    with pytest.raises(ValueError):
        AHConstructionConfig(**kwargs)


def test_single_head_bias_default():
    r = run_ah_single_head(AHConstructionConfig())
    assert r.expected_single_head_bias == pytest.approx(0.05, abs=1e-12)
    assert r.single_head_bias == pytest.approx(0.05, rel=0.1)


def test_single_head_no_perturbation():
    assert run_ah_single_head(AHConstructionConfig(mu=0.0)).single_head_bias <= 1e-4


def test_single_head_weight_on_truth_only():
    r = run_ah_single_head(AHConstructionConfig(alpha_weights=(1, 0, 0, 0, 0)))
    assert r.single_head_bias <= 1e-4


def test_single_head_bias_is_linear_in_mu():
    biases = {mu: run_ah_single_head(AHConstructionConfig(mu=mu)).single_head_bias for mu in (0.05, 0.1, 0.2)}
    for mu, b in biases.items():
        assert b == pytest.approx(mu * 0.5, rel=0.1)
    assert biases[0.2] / biases[0.1] == pytest.approx(2.0, rel=0.05)


def test_single_head_bias_vector_direction():
    cfg = AHConstructionConfig(seed=3)
    r = run_ah_single_head(cfg)
    c = _build(cfg)
    expected = c.Z.T @ (cfg.mu * cfg.alphas[1:] @ c.u[1:])
    bias = r.single_head_predictor - r.true_predictor
    assert np.linalg.norm(bias - expected) <= 0.1 * np.linalg.norm(expected)


def test_multi_head_no_teachers():
    r = run_ah_multi_head(AHConstructionConfig(d=1))
    assert r.multi_head_relative_error <= 1e-2


def test_multi_head_recovers_truth_while_single_head_is_biased():
    r = run_ah_multi_head(AHConstructionConfig(seed=1))
    assert r.multi_head_relative_error <= 1e-2
    assert r.single_head_bias == pytest.approx(0.05, rel=0.1)


def test_multi_head_reports_non_convergence():
    with pytest.raises(NotConverged):
        run_ah_multi_head(AHConstructionConfig(max_iters=3))


# Student Adapter closed forms


def test_noiseless_limit_is_exact():
    cfg = SAConstructionConfig(gamma=0.0)
    p = sample_sa_problem(cfg)
    r = sa_closed_forms(cfg, p)
    assert r.err_w1 <= 1e-10
    assert r.err_wV <= 1e-10
    np.testing.assert_allclose(r.u, p.H @ (p.w - p.w_hat), atol=1e-10)


def test_zero_alpha_matches_baseline():
    r = sa_closed_forms(SAConstructionConfig(alpha=0.0, seed=4))
    np.testing.assert_allclose(r.w_V, r.w1, atol=1e-10)


def test_default_alpha():
    assert SAConstructionConfig(d=16, s=4).alpha_value == pytest.approx(2**0.5 - 1)
    assert SAConstructionConfig(alpha=9).alpha_value == 9.0


@pytest.mark.parametrize("alpha", [9.0, None])
def test_median_ratio(alpha):
    cfg = SAConstructionConfig(alpha=alpha)
    ratios = [sa_closed_forms(cfg, sample_sa_problem(cfg, seeded_rng(s))).ratio for s in child_seeds(0, 200)]
    med = float(np.median(ratios))
    target = (4 / 16) ** 0.25
    assert med < 1
    assert target / 2 <= med <= 2 * target


def test_gamma_homogeneity():
    cfg = SAConstructionConfig(seed=7)
    a = sa_closed_forms(cfg, sample_sa_problem(cfg))
    big = with_gamma(cfg, 10.0)
    b = sa_closed_forms(big, sample_sa_problem(big))
    assert b.err_w1 == pytest.approx(10 * a.err_w1, rel=0.05)
    assert b.err_wV == pytest.approx(10 * a.err_wV, rel=0.05)
    assert b.ratio == pytest.approx(a.ratio, rel=0.05)


def test_w1_error_shrinks_with_samples():
    small = median_w1_error(SAConstructionConfig(N=1024), trials=40)
    large = median_w1_error(SAConstructionConfig(N=4096), trials=40)
    assert large / small == pytest.approx(0.5, rel=0.15)


def test_sa_config_validation():
    with pytest.raises(ValueError):
        SAConstructionConfig(s=0)
    with pytest.raises(ValueError):
        SAConstructionConfig(gamma=-1)


# Scaling experiment


def test_single_point_grid_rejected():
    with pytest.raises(InsufficientGrid):
        sa_scaling_experiment([(64, 4)], trials=2)
    with pytest.raises(InsufficientGrid):
        sa_scaling_experiment([(64, 4), (128, 8)], trials=2)


def test_grid_preconditions():
    with pytest.raises(ValueError):
        sa_scaling_experiment([(64, 4), (64, 32)], trials=2)
    with pytest.raises(ValueError):
        sa_scaling_experiment([(64, 4), (64, 16)], N=512, trials=2)


def test_scaling_csv_layout():
    res = sa_scaling_experiment([(64, 4), (64, 16)], N=1024, trials=3)
    buf = io.StringIO()
    res.write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 6 + 1
    assert lines[-1].startswith("slope,")
    assert float(lines[-1].split(",")[-1]) == res.slope


def test_scaling_is_deterministic():
    a = sa_scaling_experiment([(64, 4), (64, 16)], N=1024, trials=3, seed=5)
    b = sa_scaling_experiment([(64, 4), (64, 16)], N=1024, trials=3, seed=5)
    assert a.rows == b.rows and a.slope == b.slope


# Gradient descent against the closed form

GD_CFG = SAConstructionConfig(N=512, d=8, s=2, seed=2)


def test_zero_beta_freezes_adapter():
    p = sample_sa_problem(GD_CFG)
    rng = seeded_rng(0)
    for _ in range(5):
        _, gu = sa_objective_grads(p, rng.standard_normal(8), rng.standard_normal(2), 0.5, 0.0)
        assert np.all(gu == 0)


def test_gd_matches_closed_form_with_stop_gradient():
    rep = sa_gd_vs_closed_form(GD_CFG)
    assert rep.deviation <= 1e-4


def test_gd_noiseless_limit():
    cfg = with_gamma(GD_CFG, 0.0)
    p = sample_sa_problem(cfg)
    rep = sa_gd_vs_closed_form(cfg, problem=p)
    np.testing.assert_allclose(rep.w, p.w, atol=1e-6)
    np.testing.assert_allclose(rep.u, p.H @ (p.w - p.w_hat), atol=1e-6)


def test_gd_recovers_from_large_step():
    rep = sa_gd_vs_closed_form(GD_CFG, lr=10.0, steps=50_000)
    assert rep.lr < 10.0
    assert rep.deviation <= 1e-4


def test_gd_reports_non_convergence():
    with pytest.raises(NotConverged):
        sa_gd_vs_closed_form(GD_CFG, steps=3)


@pytest.mark.xfail(
    strict=True,
    reason="at the stop-gradient fixed point the adapter residual is orthogonal to "
    "the adapter subspace, so dropping the stop-gradient leaves the fixed point unchanged",
)
def test_gd_without_stop_gradient_moves_fixed_point():
    rep = sa_gd_vs_closed_form(GD_CFG, stop_gradient=False)
    assert rep.deviation > 1e-2


def test_stop_gradient_changes_the_trajectory():
    p = sample_sa_problem(GD_CFG)
    w, u = np.zeros(8), np.ones(2)
    _, gu_sg = sa_objective_grads(p, w, u, 1.0, 1.0, stop_gradient=True)
    _, gu_free = sa_objective_grads(p, w, u, 1.0, 1.0, stop_gradient=False)
    assert not np.allclose(gu_sg, gu_free)
    assert math.isfinite(float(gu_free @ gu_free))
