"""Independent numerical checks of the theory behind the training objective.

Three families: brute-force path enumeration against the layer-wise mixture
(distributivity for linear experts), an additive router-mass perturbation
probe on a residual mixture network, and a grid-search minimizer for the
calibration risk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError

PATH_BUDGET = 4096


class CapacityError(ValueError):
    """Enumeration would exceed the path budget."""


# -- path enumeration vs layer-wise mixture -----------------------------------


@dataclass
class PathEnumeration:
    """All K^L expert compositions with their path weights and outputs."""

    paths: list  # tuples (k_1, ..., k_L)
    weights: np.ndarray  # [K^L]
    outputs: np.ndarray  # [K^L, d]

    def combined(self):
        return self.weights @ self.outputs


def _all_paths(k_per_layer, n_layers):
    paths = [()]
    for _ in range(n_layers):
        paths = [p + (k,) for p in paths for k in range(k_per_layer)]
    return paths


def enumerate_paths(experts_per_layer, path_weights, x):
    """Evaluate every composition of one expert per layer, weighted per path.

    ``experts_per_layer``: list (length L) of lists (length K) of callables.
    ``path_weights``: maps a path tuple to its weight, or an L-dim array.
    """
    n_layers = len(experts_per_layer)
    k = len(experts_per_layer[0])
    if any(len(layer) != k for layer in experts_per_layer):
        raise ContractError("every layer must have the same expert count")
    if k ** n_layers > PATH_BUDGET:
        raise CapacityError(f"{k}^{n_layers} paths exceed the budget of {PATH_BUDGET}")
    x = np.asarray(x, dtype=np.float64)
    paths = _all_paths(k, n_layers)
    weights = np.empty(len(paths))
    outputs = []
    for i, path in enumerate(paths):
        if callable(path_weights):
            weights[i] = path_weights(path)
        elif isinstance(path_weights, dict):
            weights[i] = path_weights[path]
        else:
            weights[i] = np.asarray(path_weights)[path]
        h = x
        for layer, idx in enumerate(path):
            h = np.asarray(experts_per_layer[layer][idx](h), dtype=np.float64)
        outputs.append(h)
    return PathEnumeration(paths=paths, weights=weights, outputs=np.stack(outputs))


def naive_decomposition_eval(experts_per_layer, path_weights, x):
    """Sum over all K^L paths of path weight times the full composition."""
    return enumerate_paths(experts_per_layer, path_weights, x).combined()


def hierarchical_eval(experts_per_layer, layer_weights, x):
    """Layer-wise mixture: each layer independently mixes its experts."""
    h = np.asarray(x, dtype=np.float64)
    for layer, weights in zip(experts_per_layer, layer_weights):
        h = sum(w * np.asarray(g(h), dtype=np.float64) for w, g in zip(weights, layer))
    return h


def _assert_linear(g, dim, rng):
    """Probe g(ax + by) = a g(x) + b g(y) on random vectors."""
    x, y = rng.normal(size=dim), rng.normal(size=dim)
    a, b = rng.normal(), rng.normal()
    lhs = np.asarray(g(a * x + b * y), dtype=np.float64)
    rhs = a * np.asarray(g(x), dtype=np.float64) + b * np.asarray(g(y), dtype=np.float64)
    scale = np.abs(rhs).max() + 1.0
    if np.abs(lhs - rhs).max() > 1e-8 * scale:
        raise ContractError("module is not linear; the equivalence only holds for linear maps")


def check_hierarchical_naive_equivalence(experts_per_layer, layer_weights, x):
    """Max abs difference between the layer-wise mixture and the path sum.

    Path weights are the products of the per-layer weights. Each module must
    be strictly linear; a nonlinear module raises a ContractError.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(12345)
    for layer in experts_per_layer:
        for g in layer:
            _assert_linear(g, x.shape[0], rng)
    layer_weights = [np.asarray(w, dtype=np.float64) for w in layer_weights]

    def product_weight(path):
        w = 1.0
        for layer, idx in enumerate(path):
            w *= layer_weights[layer][idx]
        return w

    naive = naive_decomposition_eval(experts_per_layer, product_weight, x)
    hier = hierarchical_eval(experts_per_layer, layer_weights, x)
    return float(np.abs(naive - hier).max())


# -- router-mass perturbation probe -------------------------------------------


@dataclass
class PerturbationProbeResult:
    epsilons: list
    residual_norms: list
    linear_norms: list

    def loglog_slope(self):
        """Least-squares slope of log residual vs log eps over nonzero rungs."""
        pts = [(e, r) for e, r in zip(self.epsilons, self.residual_norms)
               if e > 0 and r > 0]
        if len(pts) < 2:
            return float("nan")
        le = np.log([p[0] for p in pts])
        lr = np.log([p[1] for p in pts])
        return float(np.polyfit(le, lr, 1)[0])

    def export_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["eps", "residual_norm", "linear_norm"])
            for e, r, l in zip(self.epsilons, self.residual_norms, self.linear_norms):
                writer.writerow([repr(e), repr(r), repr(l)])


class MixtureResidualNet:
    """Stack of softmax-routed residual expert mixtures for the probe.

    Each layer computes h <- sum_k alpha_k(h) * (h + scale * M_k tanh(W h))
    with alpha the full softmax of a linear router, so the mixture weights
    sum to one and additive mass-preserving perturbations stay on the simplex.
    """

    def __init__(self, dim, n_layers, n_experts, expert_scale, seed):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.n_layers = n_layers
        self.n_experts = n_experts
        self.expert_scale = float(expert_scale)
        self.trans = [rng.normal(0, 1 / np.sqrt(dim), (dim, dim)) for _ in range(n_layers)]
        self.experts = [[rng.normal(0, 1 / np.sqrt(dim), (dim, dim)) for _ in range(n_experts)]
                        for _ in range(n_layers)]
        self.routers = [rng.normal(0, 0.5, (n_experts, dim)) for _ in range(n_layers)]

    def _alpha(self, layer, h):
        z = self.routers[layer] @ h
        e = np.exp(z - z.max())
        return e / e.sum()

    def _expert_outputs(self, layer, h):
        """g_k(h) for all k, shaped [K, dim]."""
        u = np.tanh(self.trans[layer] @ h)
        branch = self.expert_scale * np.stack([m @ u for m in self.experts[layer]])
        return h[None, :] + branch

    def forward(self, x, perturbation=None, trace=None):
        """Run the net; ``perturbation`` maps layer -> additive alpha offset."""
        h = np.asarray(x, dtype=np.float64)
        for layer in range(self.n_layers):
            alpha = self._alpha(layer, h)
            if perturbation is not None:
                alpha = alpha + perturbation[layer]
                mass = alpha.sum()
                if not 0.0 < mass <= 1.0 + 1e-12:
                    raise ContractError(
                        f"perturbed mixture mass {mass} outside (0, 1] at layer {layer}")
            if trace is not None:
                trace.append((h.copy(), alpha.copy()))
            h = alpha @ self._expert_outputs(layer, h)
        return h


def perturbation_probe(net, x, direction, eps_ladder):
    """Measure how well additive mixture-weight changes explain output changes.

    For each scale eps, runs the net with alpha offset by eps * direction at
    every layer, measures the exact output change, and subtracts the linear
    term: the measured per-layer mixture-weight change dotted with the
    unperturbed expert outputs. Returns residual and linear-term norms.
    """
    eps_ladder = list(eps_ladder)
    if any(b >= a for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise ContractError("eps ladder must be strictly decreasing")
    direction = [np.asarray(d, dtype=np.float64) for d in direction]
    if len(direction) != net.n_layers:
        raise ContractError(f"need one direction per layer ({net.n_layers})")

    base_trace = []
    base_out = net.forward(x, trace=base_trace)

    residuals, linears = [], []
    for eps in eps_ladder:
        pert = {layer: eps * direction[layer] for layer in range(net.n_layers)}
        trace = []
        out = net.forward(x, perturbation=pert, trace=trace)
        delta = out - base_out
        linear = np.zeros(net.dim)
        for layer in range(net.n_layers):
            h0, alpha0 = base_trace[layer]
            _, alpha_p = trace[layer]
            linear += (alpha_p - alpha0) @ net._expert_outputs(layer, h0)
        residuals.append(float(np.linalg.norm(delta - linear)))
        linears.append(float(np.linalg.norm(linear)))
    return PerturbationProbeResult(
        epsilons=eps_ladder, residual_norms=residuals, linear_norms=linears)


def mass_preserving_direction(n_experts, n_layers, seed):
    """Random per-layer alpha directions with zero sum, keeping mass at 1."""
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(n_layers):
        d = rng.normal(size=n_experts)
        dirs.append(d - d.mean())
    return dirs


def probe_scale_sweep(dim, n_layers, n_experts, scales, eps, seed):
    """Residual-to-linear ratio as the expert branch shrinks.

    The decomposition's error term is controlled by the expert branch's
    Lipschitz constant; halving the branch scale should roughly quarter the
    residual while only halving the linear term.
    """
    rows = []
    for scale in scales:
        net = MixtureResidualNet(dim, n_layers, n_experts, scale, seed)
        rng = np.random.default_rng(seed + 1)
        x = rng.normal(size=dim)
        direction = mass_preserving_direction(n_experts, n_layers, seed + 2)
        res = perturbation_probe(net, x, direction, [eps])
        rows.append((scale, res.residual_norms[0], res.linear_norms[0]))
    return rows


# -- calibration-risk minimizer -----------------------------------------------


def calibration_minimizer_oracle(p, grid_step=1e-4):
    """Grid-search argmin over u of p(1-u)^2 + (1-p)u^2; sanity-checks u* = p."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"probability {p} outside [0, 1]")
    grid = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    risk = p * (1.0 - grid) ** 2 + (1.0 - p) * grid ** 2
    u_star = float(grid[np.argmin(risk)])
    if abs(u_star - p) > grid_step:
        raise AssertionError(f"grid minimizer {u_star} deviates from p={p}")
    return u_star


def empirical_prop1_check(model, examples, batch_size=64):
    """Per-regime (mean uncertainty score, empirical accuracy) pairs.

    Intended for a model trained with the calibration term active; the
    regime ordering by mean score should then match the ordering by accuracy.
    """
    from .train import predict

    conf, correct, flu = predict(model, examples, batch_size=batch_size)
    regimes = np.asarray([ex.regime for ex in examples])
    rows = []
    for regime in sorted(set(regimes.tolist())):
        sel = regimes == regime
        rows.append((int(regime), float(flu[sel].mean()), float(correct[sel].mean())))
    return rows
