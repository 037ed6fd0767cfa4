"""Independent theory checks: path enumeration, perturbation probe, minimizer."""

import numpy as np
import pytest

from flucal import oracles
from flucal.autodiff import ContractError
from flucal.oracles import (
    CapacityError, MixtureResidualNet, calibration_minimizer_oracle,
    check_hierarchical_naive_equivalence, enumerate_paths, hierarchical_eval,
    mass_preserving_direction, naive_decomposition_eval, perturbation_probe,
)


def linear_experts(rng, n_layers, n_experts, dim):
    mats = [[rng.normal(size=(dim, dim)) for _ in range(n_experts)]
            for _ in range(n_layers)]
    return [[(lambda h, m=m: m @ h) for m in layer] for layer in mats], mats


# -- path enumeration ----------------------------------------------------------


def test_enumeration_single_layer_is_plain_mixture():
    rng = np.random.default_rng(0)
    experts, mats = linear_experts(rng, 1, 3, 4)
    w = rng.dirichlet(np.ones(3))
    x = rng.normal(size=4)
    out = naive_decomposition_eval(experts, lambda p: w[p[0]], x)
    expected = sum(w[k] * (mats[0][k] @ x) for k in range(3))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_enumeration_delta_weights_single_path():
    rng = np.random.default_rng(1)
    experts, mats = linear_experts(rng, 2, 2, 3)
    x = rng.normal(size=3)
    out = naive_decomposition_eval(experts, {(0, 1): 1.0, (0, 0): 0.0,
                                             (1, 0): 0.0, (1, 1): 0.0}, x)
    np.testing.assert_allclose(out, mats[1][1] @ (mats[0][0] @ x), atol=1e-12)


def test_enumeration_k2_l3_matches_explicit_8_term_sum():
    rng = np.random.default_rng(2)
    experts, mats = linear_experts(rng, 3, 2, 4)
    weights = [rng.dirichlet(np.ones(2)) for _ in range(3)]
    x = rng.normal(size=4)

    def pw(path):
        return weights[0][path[0]] * weights[1][path[1]] * weights[2][path[2]]

    out = naive_decomposition_eval(experts, pw, x)
    explicit = np.zeros(4)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                explicit += (weights[0][a] * weights[1][b] * weights[2][c]
                             * (mats[2][c] @ (mats[1][b] @ (mats[0][a] @ x))))
    np.testing.assert_allclose(out, explicit, atol=1e-12)


def test_enumeration_capacity_budget():
    rng = np.random.default_rng(3)
    experts, _ = linear_experts(rng, 7, 4, 2)  # 4^7 = 16384 > 4096
    with pytest.raises(CapacityError):
        enumerate_paths(experts, lambda p: 1.0, np.zeros(2))


# -- hierarchical vs naive -----------------------------------------------------


def test_equivalence_scalar_distributivity():
    experts = [[lambda h: 2.0 * h, lambda h: 3.0 * h],
               [lambda h: 5.0 * h, lambda h: 7.0 * h]]
    weights = [np.array([0.4, 0.6]), np.array([0.1, 0.9])]
    diff = check_hierarchical_naive_equivalence(experts, weights, np.array([1.0]))
    assert diff < 1e-12


@pytest.mark.parametrize("n_experts,n_layers", [(2, 3), (3, 2), (2, 2)])
def test_equivalence_random_linear(n_experts, n_layers):
    rng = np.random.default_rng(10 * n_experts + n_layers)
    experts, _ = linear_experts(rng, n_layers, n_experts, 4)
    weights = [rng.dirichlet(np.ones(n_experts)) for _ in range(n_layers)]
    diff = check_hierarchical_naive_equivalence(experts, weights,
                                                rng.normal(size=4))
    assert diff < 1e-10


def test_equivalence_one_hot_weights():
    rng = np.random.default_rng(5)
    experts, mats = linear_experts(rng, 3, 2, 3)
    weights = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 0.0])]
    x = rng.normal(size=3)
    assert check_hierarchical_naive_equivalence(experts, weights, x) < 1e-12
    hier = hierarchical_eval(experts, weights, x)
    np.testing.assert_allclose(hier, mats[2][0] @ (mats[1][1] @ (mats[0][0] @ x)),
                               atol=1e-12)


def test_equivalence_rejects_nonlinear_module():
    experts = [[lambda h: np.tanh(h), lambda h: 2.0 * h]]
    with pytest.raises(ContractError):
        check_hierarchical_naive_equivalence(experts, [np.array([0.5, 0.5])],
                                             np.ones(3))


# -- perturbation probe --------------------------------------------------------


def make_probe(scale=0.1, seed=0, dim=16, n_layers=4, n_experts=8):
    net = MixtureResidualNet(dim, n_layers, n_experts, scale, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=dim)
    direction = mass_preserving_direction(n_experts, n_layers, seed + 2)
    return net, x, direction


def test_probe_zero_eps_zero_residual():
    net, x, direction = make_probe()
    res = perturbation_probe(net, x, direction, [0.0])
    assert res.residual_norms[0] == 0.0


def test_probe_single_layer_exact():
    net, x, direction = make_probe(n_layers=1)
    res = perturbation_probe(net, x, direction, [1e-1, 1e-2])
    # one layer: output change is exactly the mixture-weight change dotted
    # with the (fixed-input) expert outputs
    assert max(res.residual_norms) < 1e-12


def test_probe_requires_decreasing_ladder():
    net, x, direction = make_probe()
    with pytest.raises(ContractError):
        perturbation_probe(net, x, direction, [1e-3, 1e-2])


def test_probe_rejects_mass_escaping_unit_interval():
    net, x, direction = make_probe()
    inflating = [np.ones(net.n_experts) for _ in range(net.n_layers)]
    with pytest.raises(ContractError):
        perturbation_probe(net, x, inflating, [1.0])


def test_probe_residual_shrinks_with_eps():
    net, x, direction = make_probe()
    res = perturbation_probe(net, x, direction, [1e-1, 1e-2, 1e-3, 1e-4])
    assert all(a > b for a, b in zip(res.residual_norms, res.residual_norms[1:]))
    assert res.loglog_slope() > 0.9


def test_probe_scale_sweep_residual_quadratic_in_branch_scale():
    rows = oracles.probe_scale_sweep(dim=16, n_layers=4, n_experts=8,
                                     scales=[0.2, 0.1, 0.05], eps=1e-2, seed=0)
    # halving the expert branch scale should roughly quarter the residual
    r = [row[1] for row in rows]
    assert 2.5 < r[0] / r[1] < 6.5
    assert 2.5 < r[1] / r[2] < 6.5


def test_probe_csv_export(tmp_path):
    net, x, direction = make_probe()
    res = perturbation_probe(net, x, direction, [1e-1, 1e-2])
    path = tmp_path / "probe.csv"
    res.export_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "eps,residual_norm,linear_norm"
    assert len(lines) == 3


# -- calibration minimizer -----------------------------------------------------


@pytest.mark.parametrize("p", [0.0, 0.05, 0.3, 0.5, 0.7, 0.95, 1.0])
def test_minimizer_equals_p(p):
    assert calibration_minimizer_oracle(p) == pytest.approx(p, abs=1e-4)


def test_minimizer_full_grid():
    for p in np.arange(0.0, 1.0 + 1e-9, 0.05):
        assert calibration_minimizer_oracle(float(p)) == pytest.approx(p, abs=1e-4)


def test_minimizer_rejects_out_of_range():
    with pytest.raises(ContractError):
        calibration_minimizer_oracle(1.5)
