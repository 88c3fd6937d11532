"""The particle chain with power-tail waiting times and its scaled CTRW.

One event of the chain: draw a waiting variate r with tail order
``beta = alpha * (a, mu)``, select one particle with probability
proportional to its intensity ``a(x_i)``, and move it by ``h * y`` where
``y = +-sqrt(G(x_i))`` with a drift-biased coin.  The accumulated waiting
time advances by ``step_dt**(1/beta) * r``.

Clock normalisation.  With N particles the links are ``tau = 1/N = h**2``
and one event advances chain time by ``step_dt = tau**2 = 1/N**2``.  Under
this clock each particle receives ~N jumps of size h per unit chain time,
so the empirical measure moves diffusively at rate O(1), and the rescaled
waiting sums converge to a stable-like subordinator.  An event clock of
``tau`` instead of ``tau**2`` would freeze the measure coordinate in the
limit: the per-event measure increment is O(tau * h**2) for smooth
functionals, so only a 1/(tau * h**2) = 1/tau**2 event rate produces a
nondegenerate generator alongside the O(1) temporal term.
"""

from dataclasses import dataclass

import numpy as np

from .errors import HorizonError, ParameterError, StepSizeError
from .fractional import power_tail_difference_integral
from .model import EmpiricalMeasure, ModelSpec, TestFunctional
from .streams import RngStream, pareto_quantile, sample_pareto_waiting

__all__ = [
    "CtrwParams",
    "ChainState",
    "CtrwResult",
    "jump_kernel_sample",
    "jump_kernel_probabilities",
    "chain_step",
    "scaled_ctrw_evaluate",
    "prelimit_generator_apply",
    "run_chain_ensemble",
    "run_ctrw_ensemble",
]


@dataclass
class CtrwParams:
    """Discretisation parameters of the chain.

    tau = 1/N = h**2 exactly; step_dt = tau**2 is the chain time advanced
    by one event (see the module docstring).  ``t_max`` is the physical
    horizon used by inverse-time runs and ``max_steps`` caps the event
    count before a horizon diagnostic is raised.
    """

    N: int
    t_max: float = np.inf
    max_steps: int = 10**8

    def __post_init__(self):
        if self.N < 1:
            raise ParameterError("need at least one particle")
        self.tau = 1.0 / self.N
        self.h = np.sqrt(self.tau)
        self.step_dt = self.tau**2


@dataclass
class ChainState:
    """One chain configuration: positions, accumulated waiting time, step index."""

    config: EmpiricalMeasure
    s: float = 0.0
    k: int = 0


@dataclass
class CtrwResult:
    """Output of an inverse-time evaluation of the chain."""

    measure: EmpiricalMeasure
    s: float
    inverse_time: float
    steps: int


def jump_kernel_probabilities(x_i, mu, spec: ModelSpec, h: float):
    """Two-atom jump kernel at x_i: returns (y_plus, p_plus).

    y = +sqrt(G) with probability 0.5*(1 + h*b/sqrt(G)) and -sqrt(G)
    otherwise, so that E[h*y] = h**2 * b and E[(h*y)**2] = h**2 * G
    exactly.  Requires h*|b|/sqrt(G) <= 1; otherwise the probabilities
    would leave [0,1] and we fail fast rather than clamp.
    """
    g = float(spec.G(np.asarray(x_i, dtype=float)))
    if g <= 0.0:
        raise StepSizeError(f"G({x_i}) = {g} is not positive; two-atom kernel undefined")
    root = np.sqrt(g)
    b = float(spec.drift(x_i, mu))
    tilt = h * b / root
    if abs(tilt) > 1.0:
        raise StepSizeError(
            f"step size h={h} too large at x={x_i}: h*|b|/sqrt(G) = {abs(tilt):.4g} > 1"
        )
    return root, 0.5 * (1.0 + tilt)


def jump_kernel_sample(x_i, mu, spec: ModelSpec, h: float, rng) -> float:
    """Sample y from the two-atom kernel; the particle displacement is h*y."""
    root, p_plus = jump_kernel_probabilities(x_i, mu, spec, h)
    u = rng.uniform() if isinstance(rng, RngStream) else rng.random()
    return root if u < p_plus else -root


def chain_step_detailed(state: ChainState, params: CtrwParams, spec: ModelSpec,
                        rng) -> tuple:
    """Advance the chain by one event; also return the event record.

    Draws the waiting variate at tail order beta = alpha*tau*A(x)
    (= alpha*(a,mu) under tau = 1/N), selects a particle proportionally to
    a, applies its two-atom jump, and adds step_dt**(1/beta)*r to the
    waiting coordinate.  The record carries (selected index, position
    before, position after) for trajectory dumps.
    """
    mu = state.config
    if mu.n != params.N:
        raise ParameterError("params.N does not match the configuration size")
    a_vals = spec.a(mu.positions)
    A = float(a_vals.sum())
    beta = spec.alpha * params.tau * A
    if not (0.0 < beta < 1.0):
        raise ParameterError(f"tail order alpha*tau*A = {beta:.6g} left (0,1)")

    r = float(sample_pareto_waiting(beta, rng))
    u = rng.uniform() if isinstance(rng, RngStream) else rng.random()
    i = int(np.searchsorted(np.cumsum(a_vals), u * A))
    i = min(i, mu.n - 1)
    y = jump_kernel_sample(mu.positions[i], mu, spec, params.h, rng)

    new_pos = mu.positions.copy()
    x_before = float(new_pos[i])
    new_pos[i] += params.h * y
    ds = params.step_dt ** (1.0 / beta) * r
    new_state = ChainState(EmpiricalMeasure(new_pos), state.s + ds, state.k + 1)
    record = {"k": new_state.k, "s": new_state.s, "selected_i": i,
              "x_i_before": x_before, "x_i_after": float(new_pos[i])}
    return new_state, record


def chain_step(state: ChainState, params: CtrwParams, spec: ModelSpec, rng) -> ChainState:
    """Advance the chain by one event (see chain_step_detailed)."""
    new_state, _ = chain_step_detailed(state, params, spec, rng)
    return new_state


def scaled_ctrw_evaluate(mu0: EmpiricalMeasure, s0: float, t: float,
                         params: CtrwParams, spec: ModelSpec, rng) -> CtrwResult:
    """Run the chain until its waiting coordinate first reaches t.

    Returns the configuration at that event together with the inverse time
    T = k*step_dt and the event count.  A tie S == t counts as arrival.
    Raises HorizonError if max_steps elapse first (diagnostic, never a
    silent truncation).
    """
    if s0 >= t:
        raise ParameterError("need s0 < t")
    state = ChainState(mu0, s0, 0)
    while state.s < t:
        if state.k >= params.max_steps:
            raise HorizonError(
                f"S reached only {state.s:.6g} < t={t} after max_steps={params.max_steps}"
            )
        state = chain_step(state, params, spec, rng)
    return CtrwResult(state.config, state.s, state.k * params.step_dt, state.k)


# ---------------------------------------------------------------------------
# exact one-step generator
# ---------------------------------------------------------------------------

class _OperatorScale:
    """The scale triple (tau, h, step_dt) decoupled from a particle count."""

    def __init__(self, tau: float):
        if tau <= 0:
            raise ParameterError("tau must be positive")
        self.tau = tau
        self.h = np.sqrt(tau)
        self.step_dt = tau**2


def prelimit_generator_apply(F: TestFunctional, mu: EmpiricalMeasure, s: float,
                             params, spec: ModelSpec) -> float:
    """Exact one-step generator (U F - F)(mu, s) / step_dt.

    The particle and jump-atom sums are finite and evaluated exactly from
    the two-atom kernel; the waiting integral against the Pareto density
    is adaptive quadrature, split where the time factor's support ends.
    The tail order is beta = alpha*(a,mu), which coincides with
    alpha*tau*A(x) when tau = 1/N.  ``params`` may be a CtrwParams or a
    bare tau, which lets the operator be swept to 0 at a fixed measure
    (the moved mass is tau, admissible for tau <= 1/N).

    Differences are computed in difference form, so no catastrophic
    cancellation occurs as step_dt -> 0.
    """
    if not isinstance(params, CtrwParams):
        params = _OperatorScale(float(params))
    if params.tau > 1.0 / mu.n + 1e-12:
        raise ParameterError("tau exceeds the atom weight 1/N of the fixed measure")
    x = mu.positions
    a_vals = spec.a(x)
    A = float(a_vals.sum())
    weights = a_vals / A
    beta = spec.alpha * spec.intensity_pairing(mu)
    if not (0.0 < beta < 1.0):
        raise ParameterError(f"tail order alpha*(a,mu) = {beta:.6g} left (0,1)")

    g = spec.G(x)
    if np.any(g <= 0.0):
        raise StepSizeError("two-atom kernel needs G > 0 at every atom")
    root = np.sqrt(g)
    b = spec.drift(x, mu)
    tilt = params.h * b / root
    if np.any(np.abs(tilt) > 1.0):
        j = int(np.argmax(np.abs(tilt)))
        raise StepSizeError(
            f"step size h={params.h} too large at x={x[j]}: h*|b|/sqrt(G) > 1"
        )
    p_plus = 0.5 * (1.0 + tilt)

    tau = params.tau
    f_x = F.f(x)
    f_up = F.f(x + params.h * root)
    f_dn = F.f(x - params.h * root)
    mean_jump = p_plus * (f_up - f_x) + (1.0 - p_plus) * (f_dn - f_x)
    pair_f = float(np.mean(f_x))

    if F.kind == "linear":
        # F(mu^{i,y}) - F(mu) = tau * (f(x_i + h y) - f(x_i))
        d_spatial = tau * float(np.sum(weights * mean_jump))
    else:
        # (p + tau*d)^2 - p^2 = 2 p tau d + tau^2 d^2
        sq_jump = p_plus * (f_up - f_x) ** 2 + (1.0 - p_plus) * (f_dn - f_x) ** 2
        d_spatial = float(
            np.sum(weights * (2.0 * pair_f * tau * mean_jump + tau**2 * sq_jump))
        )

    f_mu = pair_f**2 if F.kind == "quadratic" else pair_f
    eps = params.step_dt
    if F.s_factor is None:
        return d_spatial / eps

    # J = beta*int_w^inf (psi(s+y)-psi(s)) y^(-1-beta) dy equals
    # (1/eps)*int Q(dr)[psi(s + w r) - psi(s)] exactly after y = w*r,
    # since the Pareto density is beta*r**(-1-beta) on [1, inf)
    w = eps ** (1.0 / beta)
    j_temporal = power_tail_difference_integral(F.s_factor, s, beta, w, F.support_end)
    psi_s = float(F.s_factor(s))
    # (S_sp * I_psi - F_sp * psi)/eps with S_sp = F_sp + d_spatial and
    # I_psi = psi(s) + eps * J  (exact change of variables)
    return d_spatial * psi_s / eps + (f_mu + d_spatial) * j_temporal


# ---------------------------------------------------------------------------
# vectorised replica ensembles
# ---------------------------------------------------------------------------

class _EnsembleChain:
    """Replica-vectorised chain used by the convergence harness.

    All replicas advance in lockstep; draws come as blocks from a single
    stream, so results are bit-reproducible given (seed, n_replicas).
    O(active) work per event when the intensity is constant and the
    kernel is absent or of the tagged linear form b0 + s*(mean - x);
    other coefficient combinations fall back to per-replica sums.
    """

    def __init__(self, mu0: EmpiricalMeasure, s0, params, spec, n_replicas, rng):
        self.params = params
        self.spec = spec
        self.R = n_replicas
        self.N = params.N
        if mu0.n != params.N:
            raise ParameterError("initial configuration size must equal params.N")
        self.X = np.tile(mu0.positions, (n_replicas, 1))
        self.S = np.full(n_replicas, float(s0))
        self.rng = rng
        self.const_a = spec.a_min == spec.a_max
        self.a_const = spec.a_min
        self.linear_k = None if spec.k is None else getattr(spec.k, "linear_strength", None)
        self.means = np.full(n_replicas, float(np.mean(mu0.positions)))

    def _drift(self, x_sel, rows):
        spec = self.spec
        b = np.asarray(spec.b0(x_sel), dtype=float)
        if spec.k is None:
            return b
        if self.linear_k is not None:
            return b + self.linear_k * (self.means[rows] - x_sel)
        inter = np.array([
            np.mean(spec.k(xs, self.X[r])) for xs, r in zip(x_sel, rows)
        ])
        return b + inter

    def step(self, active):
        """Advance the replicas flagged in the boolean mask by one event."""
        params, spec = self.params, self.spec
        rows = np.flatnonzero(active)
        n_act = rows.size
        if n_act == 0:
            return
        if self.const_a:
            A = self.a_const * self.N
            beta = spec.alpha * params.tau * A
            if not (0.0 < beta < 1.0):
                raise ParameterError(f"tail order {beta:.6g} left (0,1)")
            i_sel = self.rng.integers(0, self.N, n_act)
            ds_scale = params.step_dt ** (1.0 / beta)
        else:
            a_vals = spec.a(self.X[rows])
            A = a_vals.sum(axis=1)
            beta = spec.alpha * params.tau * A
            if np.any(beta >= 1.0) or np.any(beta <= 0.0):
                raise ParameterError("tail order left (0,1) during ensemble run")
            cum = np.cumsum(a_vals, axis=1)
            u = self.rng.uniform(n_act) * A
            i_sel = np.minimum((cum < u[:, None]).sum(axis=1), self.N - 1)
            ds_scale = params.step_dt ** (1.0 / beta)

        r = pareto_quantile(1.0 - self.rng.uniform(n_act), beta)
        x_sel = self.X[rows, i_sel]
        g = np.asarray(spec.G(x_sel), dtype=float)
        if np.any(g <= 0.0):
            raise StepSizeError("two-atom kernel needs G > 0")
        root = np.sqrt(g)
        b = self._drift(x_sel, rows)
        tilt = params.h * b / root
        if np.any(np.abs(tilt) > 1.0):
            raise StepSizeError("h*|b|/sqrt(G) exceeded 1 during ensemble run")
        up = self.rng.uniform(n_act) < 0.5 * (1.0 + tilt)
        move = params.h * np.where(up, root, -root)

        self.X[rows, i_sel] = x_sel + move
        self.means[rows] += move / self.N
        self.S[rows] += ds_scale * r


def run_chain_ensemble(mu0: EmpiricalMeasure, s0: float, chain_time: float,
                       params: CtrwParams, spec: ModelSpec, n_replicas: int,
                       rng) -> tuple:
    """Advance n_replicas copies of the chain to a fixed chain time.

    Returns (positions array of shape (R, N), waiting coordinates S of
    shape (R,)).  The number of events is floor(chain_time / step_dt).
    """
    ens = _EnsembleChain(mu0, s0, params, spec, n_replicas, rng)
    n_steps = int(np.floor(chain_time / params.step_dt + 1e-9))
    active = np.ones(n_replicas, dtype=bool)
    for _ in range(n_steps):
        ens.step(active)
    return ens.X, ens.S


def run_ctrw_ensemble(mu0: EmpiricalMeasure, s0: float, t: float,
                      params: CtrwParams, spec: ModelSpec, n_replicas: int,
                      rng) -> tuple:
    """Scaled-CTRW marginals: every replica runs until its S first reaches t.

    Returns (positions (R, N) frozen at each replica's arrival event,
    inverse times T (R,)).  Raises HorizonError when a replica exceeds
    max_steps.
    """
    if s0 >= t:
        raise ParameterError("need s0 < t")
    ens = _EnsembleChain(mu0, s0, params, spec, n_replicas, rng)
    active = ens.S < t
    T = np.zeros(n_replicas)
    k = 0
    while active.any():
        if k >= params.max_steps:
            raise HorizonError(
                f"{int(active.sum())} replicas below t={t} after max_steps={params.max_steps}"
            )
        k += 1
        ens.step(active)
        arrived = active & (ens.S >= t)
        T[arrived] = k * params.step_dt
        active &= ~arrived
    return ens.X, T
