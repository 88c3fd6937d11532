"""The deterministic kinetic flow, by finite volumes and by particles.

The flow solves, in strong form on a bounded window with zero-flux walls,

    du/dt = 0.5 * d2/dx2 [ G(x) atil(x) u ] - d/dx [ b_u(x) atil(x) u ],
    atil(x) = a(x) / (a, u),

which is the adjoint of the weak measure-valued equation with one-particle
generator (a(x)/(a,mu)) * L.  The normaliser (a, u) is recomputed every
step, so multiplying a by a positive constant leaves the flow unchanged.

Two independent routes are provided: an explicit conservative
finite-volume scheme on a grid density, and Euler-Maruyama for the
McKean-Vlasov particle system with the same generator.  The per-time tail
order beta(u) = alpha * (a, mu_u) is stored with the solution because the
subordinator runs along it.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import HorizonError, ParameterError, PositivityError, StepSizeError
from .model import EmpiricalMeasure, GridDensity, ModelSpec, TestFunctional

__all__ = [
    "FlowSolution",
    "solve_flow_grid",
    "solve_flow_ensemble",
    "flow_functional",
    "stable_dt",
]

# negative values closer to zero than this (relative to the density peak)
# are treated as roundoff and clipped; anything worse is a scheme failure
_ROUNDOFF_NEG = 1e-13


@dataclass
class FlowSolution:
    """Kinetic flow sampled on a time grid, with its tail-order curve.

    ``kind`` is "grid" (states are densities, shape (nodes, cells)) or
    "ensemble" (states are particle positions, shape (nodes, n)).
    """

    kind: str
    u_nodes: np.ndarray
    states: np.ndarray
    beta_nodes: np.ndarray
    x_lo: float = 0.0
    x_hi: float = 0.0
    mass_drift: float = 0.0
    boundary_mass: float = 0.0
    spec: Optional[ModelSpec] = field(default=None, repr=False)

    @property
    def t_end(self) -> float:
        return float(self.u_nodes[-1])

    def measure_at_node(self, j: int):
        if self.kind == "grid":
            return GridDensity(self.x_lo, self.x_hi, self.states[j], check=False)
        return EmpiricalMeasure(self.states[j])

    def beta_at(self, u):
        return np.interp(u, self.u_nodes, self.beta_nodes)

    def pair_curve(self, f) -> np.ndarray:
        """(f, mu_u) at every stored node."""
        if self.kind == "grid":
            dx = (self.x_hi - self.x_lo) / self.states.shape[1]
            centers = self.x_lo + dx * (np.arange(self.states.shape[1]) + 0.5)
            return self.states @ (f(centers) * dx)
        return np.mean(f(self.states), axis=1)

    def functional_curve(self, F: TestFunctional) -> np.ndarray:
        """F(mu_u) at every stored node (measure part only)."""
        vals = self.pair_curve(F.f)
        return vals**2 if F.kind == "quadratic" else vals

    def functional_at(self, F: TestFunctional, u):
        """F(mu_u) with linear interpolation of nodal values in u."""
        u = np.asarray(u, dtype=float)
        if np.any(u > self.t_end * (1 + 1e-12)) or np.any(u < 0):
            raise HorizonError(
                f"requested flow time outside [0, {self.t_end}]"
            )
        return np.interp(u, self.u_nodes, self.functional_curve(F))


def flow_functional(F: TestFunctional, flow: FlowSolution, u: float) -> float:
    """Evaluate F at the flow measure at time u (interpolated between nodes)."""
    return float(flow.functional_at(F, u))


def stable_dt(spec: ModelSpec, grid: GridDensity, safety: float = 0.9) -> float:
    """A dt satisfying the explicit-scheme bound dt <= dx^2 / max(G*a/(a,u)).

    Uses the worst normaliser a_min for (a,u), so the returned value stays
    admissible along the whole flow.
    """
    centers = grid.centers
    g = np.asarray(spec.G(centers), dtype=float)
    a = np.asarray(spec.a(centers), dtype=float)
    worst = np.max(g * a) / spec.a_min
    if worst <= 0:
        raise ParameterError("need G*a > 0 somewhere for a parabolic step bound")
    return safety * grid.dx**2 / worst


def _interface_drift(spec: ModelSpec, interfaces, centers, cell_mass):
    """b_mu at the cell interfaces for the current density."""
    b = np.asarray(spec.b0(interfaces), dtype=float)
    if spec.k is None:
        return b
    inter = spec.k(interfaces[:, None], centers[None, :]) @ cell_mass
    return b + inter


def solve_flow_grid(mu0: GridDensity, t_end: float, dt: float, spec: ModelSpec,
                    save_nodes: int = 257) -> FlowSolution:
    """Advance the finite-volume scheme to t_end.

    Conservative fluxes with zero-flux boundaries keep the total mass
    fixed to machine precision per step; the parabolic stability bound is
    checked at every step against the current normaliser, and a negative
    cell beyond roundoff aborts with the offending index.
    """
    if t_end <= 0 or dt <= 0:
        raise ParameterError("t_end and dt must be positive")
    M = mu0.cells
    dx = mu0.dx
    centers = mu0.centers
    interfaces = np.linspace(mu0.x_lo, mu0.x_hi, M + 1)
    g_c = np.asarray(spec.G(centers), dtype=float)
    a_c = np.asarray(spec.a(centers), dtype=float)

    n_steps = max(1, int(np.ceil(t_end / dt - 1e-12)))
    dt_eff = t_end / n_steps
    save_every = max(1, n_steps // max(1, save_nodes - 1))
    u = mu0.values.copy()

    nodes = [0.0]
    states = [u.copy()]
    betas = [spec.alpha * float(np.sum(a_c * u) * dx)]
    mass0 = float(u.sum() * dx)
    max_mass_drift = 0.0
    boundary_mass = (u[0] + u[-1]) * dx

    for step in range(1, n_steps + 1):
        pair_a = float(np.sum(a_c * u) * dx)
        atil = a_c / pair_a
        bound = dx * dx / np.max(g_c * atil)
        if dt_eff > bound * (1 + 1e-12):
            raise StepSizeError(
                f"dt={dt_eff:.3e} violates the stability bound {bound:.3e} at step {step}"
            )
        w = g_c * atil * u
        phi_cell = atil * u
        b_if = _interface_drift(spec, interfaces, centers, u * dx)
        flux = np.zeros(M + 1)
        flux[1:-1] = 0.5 * (w[1:] - w[:-1]) / dx \
            - b_if[1:-1] * 0.5 * (phi_cell[1:] + phi_cell[:-1])
        u = u + (dt_eff / dx) * (flux[1:] - flux[:-1])

        neg = u < 0.0
        if np.any(neg):
            worst = float(u.min())
            if worst < -_ROUNDOFF_NEG * max(1.0, float(u.max())):
                idx = int(np.argmin(u))
                raise PositivityError(
                    f"cell {idx} (x={centers[idx]:.4g}) went negative ({worst:.3e}) "
                    f"at step {step}"
                )
            u[neg] = 0.0

        max_mass_drift = max(max_mass_drift, abs(float(u.sum() * dx) - mass0))
        boundary_mass = max(boundary_mass, (u[0] + u[-1]) * dx)
        if step % save_every == 0 or step == n_steps:
            nodes.append(step * dt_eff)
            states.append(u.copy())
            betas.append(spec.alpha * float(np.sum(a_c * u) * dx))

    return FlowSolution(
        kind="grid",
        u_nodes=np.asarray(nodes),
        states=np.asarray(states),
        beta_nodes=np.asarray(betas),
        x_lo=mu0.x_lo,
        x_hi=mu0.x_hi,
        mass_drift=max_mass_drift,
        boundary_mass=float(boundary_mass),
        spec=spec,
    )


def solve_flow_ensemble(mu0, t_end: float, dt: float, spec: ModelSpec,
                        n_particles: int = 10**4, rng=None,
                        save_nodes: int = 129) -> FlowSolution:
    """Euler-Maruyama for the McKean-Vlasov system with generator (a/(a,mu))*L.

    Per step each particle receives drift (a(X)/(a,mu))*b_mu(X)*dt and
    Gaussian noise of variance (a(X)/(a,mu))*G(X)*dt, with mu the current
    empirical measure (read-only snapshot within the step).  mu0 may be a
    GridDensity (sampled at deterministic quantile midpoints) or an
    EmpiricalMeasure / position array used as-is.
    """
    if t_end <= 0 or dt <= 0:
        raise ParameterError("t_end and dt must be positive")
    if isinstance(mu0, GridDensity):
        x = mu0.quantile_positions(n_particles)
    elif isinstance(mu0, EmpiricalMeasure):
        x = mu0.positions.copy()
    else:
        x = np.asarray(mu0, dtype=float).copy()
    n = x.size

    n_steps = max(1, int(np.ceil(t_end / dt - 1e-12)))
    dt_eff = t_end / n_steps
    save_every = max(1, n_steps // max(1, save_nodes - 1))

    nodes = [0.0]
    states = [x.copy()]
    betas = [spec.alpha * float(np.mean(spec.a(x)))]
    linear_k = None if spec.k is None else getattr(spec.k, "linear_strength", None)

    for step in range(1, n_steps + 1):
        a_vals = np.asarray(spec.a(x), dtype=float)
        pair_a = float(np.mean(a_vals))
        atil = a_vals / pair_a
        b = np.asarray(spec.b0(x), dtype=float)
        if spec.k is not None:
            if linear_k is not None:
                b = b + linear_k * (np.mean(x) - x)
            else:
                b = b + np.mean(spec.k(x[:, None], x[None, :]), axis=1)
        x = x + atil * b * dt_eff
        var = atil * np.asarray(spec.G(x), dtype=float) * dt_eff
        if np.any(var > 0.0):
            if rng is None:
                raise ParameterError("diffusive model needs an rng for the noise")
            gen = rng if isinstance(rng, np.random.Generator) else rng.generator
            x = x + np.sqrt(np.maximum(var, 0.0)) * gen.standard_normal(n)
        if step % save_every == 0 or step == n_steps:
            nodes.append(step * dt_eff)
            states.append(x.copy())
            betas.append(spec.alpha * float(np.mean(spec.a(x))))

    return FlowSolution(
        kind="ensemble",
        u_nodes=np.asarray(nodes),
        states=np.asarray(states),
        beta_nodes=np.asarray(betas),
        spec=spec,
    )
