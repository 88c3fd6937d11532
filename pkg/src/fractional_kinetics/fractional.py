"""Variable-order right-sided Caputo derivative and the limit generator.

The derivative of order beta in (0,1) acting on g over [s, t] is

    D g(s) = -beta * int_0^{t-s} (g(s+y) - g(s)) y^(-1-beta) dy
             - (g(t) - g(s)) * (t-s)^(-beta),

where the second term is the closed form of the tail integral beyond t-s.
It annihilates constants and is linear in g.  The quadrature uses a mesh
graded like (j/J)^(1/(1-beta)) toward the singular endpoint with the local
linear part of g integrated exactly, which restores first-order accuracy
despite the y^(-1-beta) kernel.

The limit generator combines a power-tail integral in the time coordinate
with the spatial term (1/(a,mu)) * int a(z) (L phi)(z) mu(dz), phi the
closed-form variational derivative of the functional.  The residual
checker reconstructs the value function from one subordinator path
ensemble through the shift identity F(mu, s) = Phi(t - s), verified
empirically before use, and compares both sides of the mixed fractional
equation with propagated Monte-Carlo error bars.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.stats import ks_2samp

from .errors import HorizonError, ParameterError, QuadratureError
from .kinetic import FlowSolution, solve_flow_ensemble, solve_flow_grid, stable_dt
from .model import EmpiricalMeasure, GridDensity, ModelSpec, TestFunctional, order_of
from .streams import RngStream, kanter_stable
from .subordinator import increment_scale

__all__ = [
    "TimeProfile",
    "right_caputo_variable",
    "caputo_weights",
    "limit_generator_apply",
    "rhs_spatial",
    "power_tail_difference_integral",
    "ResidualParams",
    "ResidualReport",
    "residual_eq4",
]


def _check_order(beta):
    if not (0.0 < beta < 1.0):
        raise ParameterError(f"order must lie in (0,1), got {beta}")


# ---------------------------------------------------------------------------
# graded-mesh quadrature for the singular kernel
# ---------------------------------------------------------------------------

def graded_nodes(length: float, beta: float, n: int) -> np.ndarray:
    """Mesh on [0, length] graded like (j/n)^(1/(1-beta)) toward 0."""
    _check_order(beta)
    j = np.arange(n + 1) / n
    return length * j ** (1.0 / (1.0 - beta))


def caputo_weights(y: np.ndarray, beta: float) -> np.ndarray:
    """Node weights A with D g(s) = sum_j A_j g(s + y_j).

    y must be an increasing mesh on [0, t-s] starting at 0; the weights
    integrate the piecewise-linear interpolant of g(s+y) - g(s) against
    -beta * y^(-1-beta) exactly and add the boundary term at t.  The
    weights sum to zero, so constants are annihilated exactly.
    """
    _check_order(beta)
    y = np.asarray(y, dtype=float)
    if y[0] != 0.0 or np.any(np.diff(y) <= 0):
        raise ParameterError("mesh must increase from 0")
    n = y.size - 1
    Y = y[-1]
    # W_j: quadrature weight of d_j = g(s+y_j)-g(s) in int d(y) y^(-1-beta) dy
    W = np.zeros(n + 1)
    ya, yb = y[:-1], y[1:]
    span = yb - ya
    m1 = (yb ** (1.0 - beta) - ya ** (1.0 - beta)) / (1.0 - beta)
    # first cell: d(0)=0, only the right node carries weight m1/y_1
    W[1] += m1[0] / span[0]
    if n > 1:
        m0 = (ya[1:] ** (-beta) - yb[1:] ** (-beta)) / beta
        W[1:-1] += (yb[1:] * m0 - m1[1:]) / span[1:]
        W[2:] += (m1[1:] - ya[1:] * m0) / span[1:]
    A = -beta * W
    tail = Y ** (-beta)
    A[0] += beta * np.sum(W) + tail
    A[-1] -= tail
    return A


@dataclass
class TimeProfile:
    """Samples of a time profile g on a graded grid of [s, t].

    ``nodes`` increase from the evaluation point s to the terminal time t;
    grading follows the order the profile will be differentiated at.
    ``smooth`` tags whether the samples come from a smooth function or a
    Monte-Carlo estimate (coarse-grid checks are skipped for the latter).
    """

    t_end: float
    nodes: np.ndarray
    values: np.ndarray
    smooth: bool = True

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.nodes.size != self.values.size or self.nodes.size < 3:
            raise ParameterError("profile needs matching nodes/values, >= 3 points")
        if abs(self.nodes[-1] - self.t_end) > 1e-12 * max(1.0, abs(self.t_end)):
            raise ParameterError("last node must be the terminal time")
        if np.any(np.diff(self.nodes) <= 0):
            raise ParameterError("nodes must be strictly increasing")

    @classmethod
    def from_callable(cls, g, s: float, t: float, beta: float, n: int = 512,
                      smooth: bool = True) -> "TimeProfile":
        nodes = s + graded_nodes(t - s, beta, n)
        nodes[-1] = t
        vals = np.asarray([float(g(x)) for x in nodes])
        return cls(t_end=t, nodes=nodes, values=vals, smooth=smooth)


def right_caputo_variable(g: TimeProfile, beta: float, s: float,
                          rtol: Optional[float] = None) -> float:
    """Right-sided derivative of order beta of the profile at its left node.

    The profile's own grid is the quadrature mesh, so it must start at s.
    With rtol set, the value is compared against the half-resolution mesh
    and a quadrature error is raised when they disagree beyond rtol.
    """
    _check_order(beta)
    if abs(g.nodes[0] - s) > 1e-12 * max(1.0, abs(s)):
        raise ParameterError("profile grid must start at the evaluation point s")
    if s >= g.t_end:
        raise ParameterError("need s < t")
    y = g.nodes - g.nodes[0]
    A = caputo_weights(y, beta)
    value = float(A @ g.values)
    if rtol is not None:
        coarse = float(caputo_weights(y[::2], beta) @ g.values[::2])
        scale = max(1.0, abs(value))
        if abs(value - coarse) > rtol * scale:
            raise QuadratureError(
                f"graded mesh too coarse: refinement changes the value by "
                f"{abs(value - coarse):.3e} (> rtol={rtol})"
            )
    return value


# ---------------------------------------------------------------------------
# limit generator
# ---------------------------------------------------------------------------

def power_tail_difference_integral(psi, s: float, beta: float, lower: float = 0.0,
                                   support_end: Optional[float] = None) -> float:
    """beta * int_lower^inf (psi(s+y) - psi(s)) y^(-1-beta) dy.

    When psi vanishes at and beyond support_end the tail beyond the
    support is the closed form -psi(s) * (support_end - s)^(-beta); the
    y -> 0 endpoint is integrable because psi is C^1.  Convergence is
    judged by the returned error estimate, not by scipy's warning.
    """
    _check_order(beta)
    psi_s = float(psi(s))

    def run_quad(hi):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            return integrate.quad(
                lambda y: (float(psi(s + y)) - psi_s) * y ** (-1.0 - beta),
                lower, hi, epsabs=1e-12, epsrel=1e-10, limit=400,
            )

    if support_end is not None:
        y_star = support_end - s
        if y_star <= lower:
            return -psi_s * lower ** (-beta) if psi_s != 0.0 else 0.0
        val, err = run_quad(y_star)
        total = beta * val - psi_s * y_star ** (-beta)
    else:
        val, err = run_quad(np.inf)
        total = beta * val
    if not np.isfinite(total) or beta * err > 1e-6 * (1.0 + abs(total)):
        raise QuadratureError(
            f"power-tail quadrature did not converge (value {total}, err {err})"
        )
    return total


def rhs_spatial(F: TestFunctional, mu, spec: ModelSpec) -> float:
    """(1/(a,mu)) * int a(z) (L phi)(z) mu(dz), phi the variational derivative.

    This is the spatial half of the limit generator and the right-hand
    side of the mixed fractional equation; it acts on the measure part of
    F only.  Invariant under rescaling a by a positive constant.
    """
    _, dphi, d2phi = F.variational(mu)

    def integrand(z):
        b = spec.drift(z, mu)
        return spec.a(z) * (0.5 * spec.G(z) * d2phi(z) + b * dphi(z))

    return mu.pair(integrand) / spec.intensity_pairing(mu)


def limit_generator_apply(F: TestFunctional, mu, s: float, spec: ModelSpec) -> float:
    """The limit generator: power-tail time term plus the spatial term.

    Lambda F(mu, s) = alpha*(a,mu) * int_0^inf (F(mu,s+r)-F(mu,s)) r^(-1-beta) dr
                      + psi(s) * rhs_spatial(F, mu, spec),
    with beta = alpha*(a,mu).  Returns 0 for constants.
    """
    beta = order_of(mu, spec)
    _check_order(beta)
    spatial = rhs_spatial(F, mu, spec)
    if F.s_factor is None:
        return spatial
    temporal = F.mu_value(mu) * power_tail_difference_integral(
        F.s_factor, s, beta, 0.0, F.support_end
    )
    return temporal + float(F.s_factor(s)) * spatial


# ---------------------------------------------------------------------------
# residual of the mixed fractional equation
# ---------------------------------------------------------------------------

@dataclass
class ResidualParams:
    """Numerics of the residual check."""

    n_paths: int = 20000
    du: float = 1e-3
    quad_nodes: int = 256
    s_fractions: tuple = (0.25, 0.5, 0.75)
    seed: int = 20260810
    flow_dt: Optional[float] = None
    flow_particles: int = 4000
    flow_horizon: float = 2.0
    max_extensions: int = 8
    batch: int = 20000
    verify_shift: bool = True
    shift_paths: int = 4000
    shift_level: float = 1e-3
    use_shift_identity: bool = True


@dataclass
class ResidualReport:
    """Residual profile of the mixed fractional equation with error bars."""

    s_values: np.ndarray
    lhs: np.ndarray
    rhs: float
    residual: np.ndarray
    mc_error: np.ndarray
    beta: float
    terminal_value: float
    terminal_target: float
    shift_test: Optional[dict] = None
    params: Optional[ResidualParams] = field(default=None, repr=False)

    def within(self, k: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.residual) <= k * self.mc_error))


def _flow_solver_for(mu0, spec, params: ResidualParams, rng_flow):
    if isinstance(mu0, GridDensity):
        dt = params.flow_dt or stable_dt(spec, mu0)

        def solver(u_end):
            return solve_flow_grid(mu0, u_end, dt, spec)
    else:
        dt = params.flow_dt or 1e-3
        x0 = mu0.positions if isinstance(mu0, EmpiricalMeasure) else np.asarray(mu0)

        def solver(u_end):
            return solve_flow_ensemble(
                x0, u_end, dt, spec,
                n_particles=len(x0), rng=rng_flow.generator,
            )
    return solver


def _collect_level_values(levels, coeffs, value_nodes, scales, betas, du,
                          n_paths, gen, batch):
    """Stream paths; a path crossing level k at step j contributes
    coeffs[:, k] * V_j to its accumulator.

    Levels are ascending, so each path keeps a pointer to its next
    uncrossed level and a step that jumps over several levels settles them
    all at once through prefix sums of the coefficient rows.  Returns the
    per-path accumulations (n_paths, n_outputs) and the per-level sums of
    the flow values at crossing (for the raw level estimates).
    """
    n_levels = levels.size
    n_out = coeffs.shape[0]
    J = scales.size
    # prefix[:, k] = sum of coeffs[:, :k]; a pointer move a -> b adds
    # prefix[:, b] - prefix[:, a]
    prefix = np.concatenate([np.zeros((n_out, 1)), np.cumsum(coeffs, axis=1)], axis=1)
    acc_all = np.empty((n_paths, n_out))
    level_diff = np.zeros(n_levels + 1)
    done = 0
    for start in range(0, n_paths, batch):
        m = min(batch, n_paths - start)
        S = np.zeros(m)
        ptr = np.zeros(m, dtype=np.int64)
        acc = np.zeros((m, n_out))
        active = np.arange(m)
        j = 0
        while active.size:
            if j >= J:
                raise HorizonError(
                    "path ensemble outlived the flow horizon during the "
                    "residual run; enlarge flow_horizon"
                )
            b = float(betas[j])
            u_draw = np.clip(gen.random(active.size), 1e-16, 1 - 1e-16)
            w_draw = np.maximum(gen.standard_exponential(active.size), 1e-300)
            S[active] += scales[j] * kanter_stable(u_draw, w_draw, b)
            j += 1
            v_now = float(value_nodes[j])
            s_act = S[active]
            moved = s_act >= levels[ptr[active]]
            if moved.any():
                rows = active[moved]
                old = ptr[rows]
                new = np.searchsorted(levels, S[rows], side="right")
                acc[rows] += v_now * (prefix[:, new] - prefix[:, old]).T
                np.add.at(level_diff, old, v_now)
                np.add.at(level_diff, new, -v_now)
                ptr[rows] = new
                active = active[ptr[active] < n_levels]
        acc_all[done:done + m] = acc
        done += m
    level_sum = np.cumsum(level_diff)[:n_levels]
    return acc_all, level_sum


def _shift_identity_test(flow_ctx_betas, scales, du, t, s_mid, n, gen, level):
    """Two-sample KS: T from s0=s_mid to t versus T from 0 to t-s_mid."""
    def crossing_times(s0, target):
        S = np.full(n, s0)
        T = np.zeros(n)
        alive = np.ones(n, dtype=bool)
        j = 0
        while alive.any() and j < scales.size:
            b = float(flow_ctx_betas[j])
            u_draw = np.clip(gen.random(int(alive.sum())), 1e-16, 1 - 1e-16)
            w_draw = np.maximum(gen.standard_exponential(int(alive.sum())), 1e-300)
            S[alive] += scales[j] * kanter_stable(u_draw, w_draw, b)
            j += 1
            arrived = alive & (S >= target)
            T[arrived] = j * du
            alive &= ~arrived
        if alive.any():
            raise HorizonError("shift test outlived the flow horizon")
        return T

    t1 = crossing_times(s_mid, t)
    t2 = crossing_times(0.0, t - s_mid)
    ks = ks_2samp(t1, t2)
    return {"statistic": float(ks.statistic), "pvalue": float(ks.pvalue),
            "passed": bool(ks.pvalue > level)}


def residual_eq4(F: TestFunctional, spec: ModelSpec, mu0, t: float,
                 params: ResidualParams = None) -> ResidualReport:
    """Residual of the mixed fractional equation at interior time points.

    Builds the value map Phi(w) = E F(M(T(w))) from one subordinator path
    ensemble via the shift identity F(mu, s) = Phi(t - s), applies the
    graded-mesh Caputo derivative of order beta = alpha*(a, mu0) at each
    s, subtracts the spatial right-hand side, and reports residuals with
    per-path propagated error bars.  The terminal condition g(t) = F(mu0)
    is exact by construction and echoed in the report.

    The shift identity is verified by a two-sample KS test before use;
    if it fails (or use_shift_identity is False) every needed time point
    is estimated from its own ensemble instead.
    """
    params = params or ResidualParams()
    if t <= 0:
        raise ParameterError("t must be positive")
    beta0 = order_of(mu0, spec)
    _check_order(beta0)
    rhs = rhs_spatial(F, mu0, spec)
    terminal = F.mu_value(mu0)

    rng_flow = RngStream(params.seed, 0)
    rng_paths = RngStream(params.seed, 1)
    rng_shift = RngStream(params.seed, 2)
    solver = _flow_solver_for(mu0, spec, params, rng_flow)

    horizon = params.flow_horizon
    flow = solver(horizon)
    for _ in range(params.max_extensions + 1):
        try:
            return _residual_attempt(F, spec, mu0, t, params, flow, solver,
                                     beta0, rhs, terminal, rng_paths, rng_shift)
        except HorizonError:
            horizon *= 2.0
            flow = solver(horizon)
    raise HorizonError("flow horizon exhausted after the configured extensions")


def _residual_attempt(F, spec, mu0, t, params, flow, solver, beta0, rhs,
                      terminal, rng_paths, rng_shift):
    du = params.du
    J = int(np.floor(flow.t_end / du + 1e-9))
    u_grid = du * np.arange(J + 1)
    betas = np.asarray(flow.beta_at(u_grid), dtype=float)
    scales = increment_scale(betas[:-1], du)
    value_nodes = np.asarray(flow.functional_at(F, u_grid), dtype=float)

    s_values = np.asarray([f * t for f in params.s_fractions])
    meshes, coeff_rows, level_lists = [], [], []
    for s in s_values:
        Y = t - s
        y = graded_nodes(Y, beta0, params.quad_nodes)
        A = caputo_weights(y, beta0)
        w = Y - y  # physical levels; w[-1] = 0 handled exactly
        meshes.append(y)
        coeff_rows.append(A)
        level_lists.append(w)

    # merge all strictly positive levels into one ascending array
    all_levels = np.unique(np.concatenate([w[:-1] for w in level_lists]))
    n_levels = all_levels.size
    coeffs = np.zeros((s_values.size, n_levels))
    const_terms = np.zeros(s_values.size)
    for i, (A, w) in enumerate(zip(coeff_rows, level_lists)):
        idx = np.searchsorted(all_levels, w[:-1])
        coeffs[i, idx] += A[:-1]
        const_terms[i] = A[-1] * terminal  # the w=0 node is exact

    shift_test = None
    if params.verify_shift and params.use_shift_identity:
        shift_test = _shift_identity_test(
            betas, scales, du, t, float(s_values[len(s_values) // 2]),
            params.shift_paths, rng_shift.generator, params.shift_level,
        )

    use_shift = params.use_shift_identity and (shift_test is None or shift_test["passed"])
    gen = rng_paths.generator
    if use_shift:
        acc, level_sum = _collect_level_values(
            all_levels, coeffs, value_nodes, scales, betas, du,
            params.n_paths, gen, params.batch,
        )
        lhs_means = acc.mean(axis=0) + const_terms
        lhs_err = acc.std(axis=0, ddof=1) / np.sqrt(params.n_paths)
        near_terminal = level_sum[0] / params.n_paths
    else:
        # per-level ensembles: estimate Phi at every level independently
        n_each = max(500, params.n_paths // max(1, n_levels))
        phi = np.zeros(n_levels)
        phi_err = np.zeros(n_levels)
        for k, w_level in enumerate(all_levels):
            vals, _ = _collect_level_values(
                np.asarray([w_level]), np.ones((1, 1)), value_nodes,
                scales, betas, du, n_each, gen, params.batch,
            )
            phi[k] = vals[:, 0].mean()
            phi_err[k] = vals[:, 0].std(ddof=1) / np.sqrt(n_each)
        lhs_means = coeffs @ phi + const_terms
        lhs_err = np.sqrt((coeffs**2) @ (phi_err**2))
        near_terminal = phi[0]

    residual = lhs_means - rhs
    return ResidualReport(
        s_values=s_values,
        lhs=lhs_means,
        rhs=float(rhs),
        residual=residual,
        mc_error=lhs_err,
        beta=float(beta0),
        terminal_value=float(near_terminal),
        terminal_target=float(terminal),
        shift_test=shift_test,
        params=params,
    )
