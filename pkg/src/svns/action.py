"""Pressure-constrained action of stochastic flows and its variations.

    S(g, p) = 1/2 E int_0^T int |D_t g_t(x)|^2 dx dt
              + E int_0^T int p(t, g_t(x)) (det grad g_t(x) - 1) dx dt

with D_t g_t(x) = v(t, g_t(x)) for flows driven by the drift v. Variations
shift the flow by eps h(t, g_t) and the multiplier by eps phi(t, g_t). For
this class the perturbed action is an exact polynomial in eps per replica:

    D_t g^eps          = v + eps Lh,  Lh = d_t h + (v . grad) h + nu Lap h
    det grad g^eps     = det J (1 + eps tr H + eps^2 det H),  H = grad h
    p^eps along g^eps  = p + eps (grad p . h + phi) + eps^2 h^T Hess p h / 2
                         (second-order expansion; the determinant factors are
                         exact, and Richardson extrapolation removes the
                         remaining O(eps^2) from the derivative estimate)

One flow pass therefore serves every perturbation and every eps with common
random numbers by construction: the pass accumulates per-replica polynomial
coefficients, and evaluations at any eps are algebra after the fact.

Time quadrature defaults to composite Simpson. A trapezoid rule carries an
O(dt^2) Euler-Maclaurin boundary term from the time envelope (about 7e-5 at
T = 0.5, dt = 1e-3) that would bury the 1e-7-level criticality signal;
Simpson's O(dt^4) error sits far below the Monte Carlo bars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    PhaseTable,
    PointEvaluator,
    SpectralField,
    TorusGrid,
    _ifft,
)
from .flows import (
    BrownianDriver,
    FlowEnsemble,
    FlowObserver,
    make_flow_ensemble,
    run_flow,
    simpson_weights,
    trapezoid_weights,
)
from .solver import DriftField, NSTrajectory

__all__ = [
    "SineSquaredEnvelope",
    "PerturbationField",
    "trig_vector_mode",
    "trig_scalar_mode",
    "default_perturbation_basis",
    "default_multiplier_basis",
    "TrajectoryPressure",
    "StaticPressure",
    "ZeroPressure",
    "ActionBreakdown",
    "ActionRun",
    "prepare_action_run",
    "action_evaluate",
    "perturbed_action",
    "GateauxEstimate",
    "gateaux_derivative",
    "ELResidual",
    "euler_lagrange_residual",
    "MultiplierProbe",
    "multiplier_probe",
]

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# time envelopes and perturbation fields
# ---------------------------------------------------------------------------

class SineSquaredEnvelope:
    """a(t) = sin^2(pi t / T): vanishes with its first derivative at 0 and T."""

    def __init__(self, t_final: float):
        if t_final <= 0:
            raise ValueError("envelope horizon must be positive")
        self.t_final = float(t_final)

    def value(self, t: float) -> float:
        return float(np.sin(np.pi * t / self.t_final) ** 2)

    def derivative(self, t: float) -> float:
        return float(np.pi / self.t_final * np.sin(2 * np.pi * t / self.t_final))


def _mode_coeffs(grid: TorusGrid, k: tuple[int, int], phase: str) -> np.ndarray:
    """Coefficients of cos(k.x) or sin(k.x) as a conjugate-symmetric pair."""
    c = np.zeros((grid.n, grid.n), dtype=complex)
    i1 = list(grid.k).index(k[0])
    i2 = list(grid.k).index(k[1])
    j1 = list(grid.k).index(-k[0])
    j2 = list(grid.k).index(-k[1])
    if phase == "cos":
        c[i1, i2] += 0.5
        c[j1, j2] += 0.5
    elif phase == "sin":
        c[i1, i2] += -0.5j
        c[j1, j2] += 0.5j
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return c


def trig_vector_mode(grid: TorusGrid, k: tuple[int, int], phase: str,
                     component: int) -> np.ndarray:
    """(2, n, n) coefficients of trig(k.x) e_component."""
    w = np.zeros((2, grid.n, grid.n), dtype=complex)
    w[component] = _mode_coeffs(grid, k, phase)
    return w


def trig_scalar_mode(grid: TorusGrid, k: tuple[int, int], phase: str) -> np.ndarray:
    return _mode_coeffs(grid, k, phase)


class PerturbationField:
    """Variation direction (h, phi): band-limited in x, smooth envelope in t.

    h(t, x) = a(t) w(x) with w a fixed vector field, phi(t, x) = a(t) psi(x);
    either part may be absent. The envelope must vanish at both endpoints so
    that time boundary terms drop out of the first variation.
    """

    def __init__(self, grid: TorusGrid, w_coeffs: np.ndarray | None = None,
                 phi_coeffs: np.ndarray | None = None,
                 envelope: SineSquaredEnvelope | None = None,
                 label: str = "pert"):
        if envelope is None:
            raise ValueError("an envelope is required")
        for t in (0.0, envelope.t_final):
            if abs(envelope.value(t)) > 1e-14:
                raise ValueError("envelope must vanish at both time endpoints")
        self.grid = grid
        self.envelope = envelope
        self.label = label
        self.w_coeffs = None if w_coeffs is None else np.asarray(w_coeffs, dtype=complex)
        self.phi_coeffs = None if phi_coeffs is None else np.asarray(phi_coeffs, dtype=complex)
        if self.w_coeffs is not None and self.w_coeffs.shape != (2, grid.n, grid.n):
            raise ValueError("vector part must have shape (2, n, n)")
        if self.phi_coeffs is not None and self.phi_coeffs.shape != (grid.n, grid.n):
            raise ValueError("scalar part must have shape (n, n)")
        g = grid
        if self.w_coeffs is None:
            self._w_eval = None
            self._w_stack = None
        else:
            w = self.w_coeffs
            self._w_stack = np.stack([
                w[0], w[1],
                1j * g.k1 * w[0], 1j * g.k2 * w[0],
                1j * g.k1 * w[1], 1j * g.k2 * w[1],
                -g.k_squared * w[0], -g.k_squared * w[1],
            ])
            self._w_eval = PointEvaluator(g, self._w_stack)
        if self.phi_coeffs is None:
            self._phi_eval = None
            self._phi_stack = None
        else:
            p = self.phi_coeffs
            self._phi_stack = np.stack([p, 1j * g.k1 * p, 1j * g.k2 * p])
            self._phi_eval = PointEvaluator(g, self._phi_stack)

    def plus(self, other: "PerturbationField", label: str | None = None) -> "PerturbationField":
        """Sum of the vector/scalar parts (envelopes must match)."""
        if other.envelope.t_final != self.envelope.t_final:
            raise ValueError("cannot combine perturbations with different horizons")

        def add(a, b):
            if a is None:
                return None if b is None else b.copy()
            return a if b is None else a + b

        return PerturbationField(self.grid, add(self.w_coeffs, other.w_coeffs),
                                 add(self.phi_coeffs, other.phi_coeffs), self.envelope,
                                 label or f"{self.label}+{other.label}")

    # -- direct evaluation (tests and small diagnostics) --------------------

    def _w_parts(self, points: np.ndarray) -> np.ndarray:
        if self._w_eval is None:
            shape = (8,) + np.asarray(points).shape[:-1]
            return np.zeros(shape)
        return self._w_eval(points)

    def h(self, t: float, points: np.ndarray) -> np.ndarray:
        return self.envelope.value(t) * np.moveaxis(self._w_parts(points)[:2], 0, -1)

    def h_dt(self, t: float, points: np.ndarray) -> np.ndarray:
        return self.envelope.derivative(t) * np.moveaxis(self._w_parts(points)[:2], 0, -1)

    def h_gradient(self, t: float, points: np.ndarray) -> np.ndarray:
        parts = self._w_parts(points)[2:6]
        h = np.moveaxis(parts.reshape((2, 2) + parts.shape[1:]), (0, 1), (-2, -1))
        return self.envelope.value(t) * h

    def h_laplacian(self, t: float, points: np.ndarray) -> np.ndarray:
        return self.envelope.value(t) * np.moveaxis(self._w_parts(points)[6:8], 0, -1)

    def phi(self, t: float, points: np.ndarray) -> np.ndarray:
        if self._phi_eval is None:
            return np.zeros(np.asarray(points).shape[:-1])
        return self.envelope.value(t) * self._phi_eval(points)[0]

    def phi_gradient(self, t: float, points: np.ndarray) -> np.ndarray:
        if self._phi_eval is None:
            return np.zeros(np.asarray(points).shape)
        return self.envelope.value(t) * np.moveaxis(self._phi_eval(points)[1:], 0, -1)


def default_perturbation_basis(grid: TorusGrid, t_final: float) -> list[PerturbationField]:
    """Fifteen variation directions: low trig modes times e_1/e_2 paired with
    phi = 0, four pure-multiplier directions, and one mixed pair."""
    env = SineSquaredEnvelope(t_final)
    basis: list[PerturbationField] = []
    for k, kname in (((1, 0), "x1"), ((0, 1), "x2")):
        for phase in ("cos", "sin"):
            for comp in (0, 1):
                basis.append(PerturbationField(
                    grid, w_coeffs=trig_vector_mode(grid, k, phase, comp),
                    envelope=env, label=f"h:{phase}({kname})e{comp + 1}"))
    for comp in (0, 1):
        basis.append(PerturbationField(
            grid, w_coeffs=trig_vector_mode(grid, (1, 1), "cos", comp),
            envelope=env, label=f"h:cos(x1+x2)e{comp + 1}"))
    for k, phase, name in (((1, 0), "cos", "cos(x1)"), ((1, 0), "sin", "sin(x1)"),
                           ((0, 1), "cos", "cos(x2)"), ((1, 1), "cos", "cos(x1+x2)")):
        basis.append(PerturbationField(
            grid, phi_coeffs=trig_scalar_mode(grid, k, phase),
            envelope=env, label=f"phi:{name}"))
    basis.append(PerturbationField(
        grid, w_coeffs=trig_vector_mode(grid, (0, 1), "cos", 0),
        phi_coeffs=trig_scalar_mode(grid, (0, 1), "sin"),
        envelope=env, label="mixed:h-cos(x2)e1,phi-sin(x2)"))
    return basis


def default_multiplier_basis(grid: TorusGrid, t_final: float) -> list[PerturbationField]:
    """The multiplier (phi-only) directions of the default basis."""
    env = SineSquaredEnvelope(t_final)
    out = []
    for k, phase, name in (((1, 0), "cos", "cos(x1)"), ((1, 0), "sin", "sin(x1)"),
                           ((0, 1), "cos", "cos(x2)"), ((1, 1), "cos", "cos(x1+x2)"),
                           ((0, 1), "sin", "sin(x2)")):
        out.append(PerturbationField(grid, phi_coeffs=trig_scalar_mode(grid, k, phase),
                                     envelope=env, label=f"phi:{name}"))
    return out


# ---------------------------------------------------------------------------
# pressure paths
# ---------------------------------------------------------------------------

class TrajectoryPressure:
    """Pressure read off a stored trajectory at its node times."""

    def __init__(self, traj: NSTrajectory):
        self.grid = traj.grid
        self.traj = traj

    def coeffs_at(self, t: float) -> np.ndarray:
        return self.traj.pressure_coeffs[self.traj.node_index(t)]


class StaticPressure:
    """Time-independent multiplier field."""

    def __init__(self, p: SpectralField):
        self.grid = p.grid
        self._c = p.coeffs

    def coeffs_at(self, t: float) -> np.ndarray:
        return self._c


class ZeroPressure:
    def __init__(self, grid: TorusGrid):
        self.grid = grid
        self._c = np.zeros((grid.n, grid.n), dtype=complex)

    def coeffs_at(self, t: float) -> np.ndarray:
        return self._c


# ---------------------------------------------------------------------------
# the accumulating flow pass
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ActionBreakdown:
    """Replica means of the kinetic and constraint terms with their errors."""

    s1: float
    s2: float
    stderr1: float
    stderr2: float
    replicas: int

    @property
    def total(self) -> float:
        return self.s1 + self.s2


class _ActionObserver(FlowObserver):
    """Accumulates, per replica, the eps-polynomial coefficients of S.

    kinetic: S1(eps) = 1/2 (k0 + 2 eps k1 + eps^2 k2) per perturbation;
    constraint: S2(eps) = b0 + eps c1 + eps^2 c2 + eps^3 c3 + eps^4 c4.
    The eps-independent accumulators are shared by every perturbation, which
    is what makes eps = 0 bitwise identical to the unperturbed evaluation.
    """

    def __init__(self, grid: TorusGrid, pressure, perts: tuple[PerturbationField, ...],
                 replicas: int, nu: float):
        self.grid = grid
        self.pressure = pressure
        self.perts = perts
        self.nu = nu
        npert = len(perts)
        self.k0 = np.zeros(replicas)
        self.b0 = np.zeros(replicas)
        self.k1 = np.zeros((npert, replicas))
        self.k2 = np.zeros((npert, replicas))
        self.c = np.zeros((npert, 4, replicas))  # c1..c4
        self.htr_max = np.zeros(npert)
        self.hdet_max = np.zeros(npert)
        self.det_defect_max = 0.0
        # all direction fields share one evaluator so a node costs a single
        # phase contraction for every registered perturbation at once
        rows: list[np.ndarray] = []
        w_ids, w_rows, phi_ids, phi_rows = [], [], [], []
        for i, pert in enumerate(perts):
            if pert._w_eval is not None:
                w_ids.append(i)
                w_rows.append(len(rows))
                rows.extend(pert._w_stack)
            if pert._phi_eval is not None:
                phi_ids.append(i)
                phi_rows.append(len(rows))
                rows.append(pert._phi_stack[0])
        self._union_eval = PointEvaluator(grid, np.stack(rows)) if rows else None
        self._w_ids = np.asarray(w_ids, dtype=int)
        self._w_rows = np.asarray(w_rows, dtype=int)
        self._phi_ids = np.asarray(phi_ids, dtype=int)
        self._phi_rows = np.asarray(phi_rows, dtype=int)
        self._npert = npert

    @staticmethod
    def _qx(vals: np.ndarray) -> np.ndarray:
        """Lattice quadrature over initial points: (2 pi)^2 times the mean."""
        return TWO_PI**2 * vals.mean(axis=-1)

    def accumulate(self, node, t, ens, drift_values, drift_grads, weight):
        table = PhaseTable(ens.positions)
        g = self.grid
        pc = self.pressure.coeffs_at(t)
        pstack = table.evaluate(PointEvaluator(g, np.stack([
            pc, 1j * g.k1 * pc, 1j * g.k2 * pc,
            -g.k1 * g.k1 * pc, -g.k1 * g.k2 * pc, -g.k2 * g.k2 * pc,
        ])))
        p_pts, p1, p2, p11, p12, p22 = pstack
        jac = ens.jacobians
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        dm1 = det - 1.0
        self.det_defect_max = max(self.det_defect_max, float(np.max(np.abs(dm1))))
        v = drift_values
        vx = v[..., 0]
        vy = v[..., 1]
        self.k0 += weight * self._qx(vx ** 2 + vy ** 2)
        self.b0 += weight * self._qx(p_pts * dm1)
        if self._union_eval is None:
            return
        allp = table.evaluate(self._union_eval)
        aval = np.array([p.envelope.value(t) for p in self.perts])
        dval = np.array([p.envelope.derivative(t) for p in self.perts])
        g1 = np.zeros((self._npert,) + p_pts.shape)
        wi = self._w_ids
        if wi.size:
            # rows per direction: w1 w2 d1w1 d2w1 d1w2 d2w2 Lap w1 Lap w2
            W = allp[self._w_rows[:, None] + np.arange(8)]
            a = aval[wi][:, None, None]
            da = dval[wi][:, None, None]
            # Lh = a' w + a ((v . grad) w + nu Lap w)
            lh1 = da * W[:, 0] + a * (vx * W[:, 2] + vy * W[:, 3] + self.nu * W[:, 6])
            lh2 = da * W[:, 1] + a * (vx * W[:, 4] + vy * W[:, 5] + self.nu * W[:, 7])
            self.k1[wi] += weight * self._qx(vx * lh1 + vy * lh2)
            self.k2[wi] += weight * self._qx(lh1 ** 2 + lh2 ** 2)
            trh = a * (W[:, 2] + W[:, 5])
            deth = a * a * (W[:, 2] * W[:, 5] - W[:, 3] * W[:, 4])
            self.htr_max[wi] = np.maximum(self.htr_max[wi], np.abs(trh).max(axis=(1, 2)))
            self.hdet_max[wi] = np.maximum(self.hdet_max[wi], np.abs(deth).max(axis=(1, 2)))
            h1 = a * W[:, 0]
            h2 = a * W[:, 1]
            g1[wi] = p1 * h1 + p2 * h2
            g2 = 0.5 * (p11 * h1 * h1 + 2.0 * p12 * h1 * h2 + p22 * h2 * h2)
        if self._phi_ids.size:
            g1[self._phi_ids] += aval[self._phi_ids][:, None, None] * allp[self._phi_rows]
        # S2 integrand: (p + eps g1 + eps^2 g2)(det J (1 + eps trH + eps^2 detH) - 1)
        self.c[:, 0] += weight * self._qx(g1 * dm1)
        if wi.size:
            ddtr = det * trh
            dddet = det * deth
            self.c[wi, 0] += weight * self._qx(p_pts * ddtr)
            self.c[wi, 1] += weight * self._qx(g2 * dm1 + g1[wi] * ddtr + p_pts * dddet)
            self.c[wi, 2] += weight * self._qx(g2 * ddtr + g1[wi] * dddet)
            self.c[wi, 3] += weight * self._qx(g2 * dddet)


@dataclass(eq=False)
class ActionRun:
    """A completed accumulation pass: everything needed to evaluate S(eps)
    for every registered perturbation without touching the paths again."""

    grid: TorusGrid
    nu: float
    dt: float
    t_final: float
    perturbations: tuple[PerturbationField, ...]
    kinetic0: np.ndarray          # per-replica S1 eps^0 coefficient (times 2)
    constraint0: np.ndarray       # per-replica S2 at eps = 0
    kinetic1: np.ndarray          # (npert, R)
    kinetic2: np.ndarray
    constraint_poly: np.ndarray   # (npert, 4, R): eps^1..eps^4 coefficients
    htr_max: np.ndarray
    hdet_max: np.ndarray
    det_defect_max: float
    final_ensemble: FlowEnsemble

    @property
    def replicas(self) -> int:
        return self.kinetic0.shape[0]

    def pert_index(self, pert) -> int:
        if isinstance(pert, (int, np.integer)):
            return int(pert)
        for i, q in enumerate(self.perturbations):
            if q is pert:
                return i
        raise ValueError("perturbation was not registered with this run")

    def replica_action(self, pert=None, epsilon: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Per-replica (S1, S2) values at the given eps along a perturbation."""
        s1 = 0.5 * self.kinetic0
        s2 = self.constraint0.copy()
        if pert is not None and epsilon != 0.0:
            i = self.pert_index(pert)
            s1 = s1 + epsilon * self.kinetic1[i] + 0.5 * epsilon**2 * self.kinetic2[i]
            powers = epsilon ** np.arange(1, 5)
            s2 = s2 + powers @ self.constraint_poly[i]
        return s1, s2


def _quadrature_weights(kind: str, steps: int, dt: float) -> np.ndarray:
    if kind == "simpson":
        return simpson_weights(steps, dt)
    if kind == "trapezoid":
        return trapezoid_weights(steps, dt)
    raise ValueError(f"unknown quadrature {kind!r}")


def prepare_action_run(drift: DriftField, pressure, *, nu: float, dt: float,
                       t_final: float, driver: BrownianDriver,
                       ensemble: FlowEnsemble | None = None, stride: int = 1,
                       perturbations=(), quadrature: str = "simpson") -> ActionRun:
    """Run the flow once, accumulating action polynomials for all perturbations.

    The ensemble defaults to the full grid lattice with the driver's replica
    count. All perturbation envelopes must live on [0, t_final].
    """
    steps = int(round(t_final / dt))
    if abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    for pert in perturbations:
        if abs(pert.envelope.t_final - t_final) > 1e-12:
            raise ValueError(
                f"perturbation {pert.label!r} lives on horizon "
                f"{pert.envelope.t_final}, run has {t_final}")
    if ensemble is None:
        ensemble = make_flow_ensemble(drift.grid, driver.replicas, stride=stride)
    if ensemble.jacobians is None:
        raise ValueError("the action needs Jacobian tracking")
    if pressure.grid != drift.grid:
        raise ValueError("pressure lives on a different grid")
    weights = _quadrature_weights(quadrature, steps, dt)
    obs = _ActionObserver(drift.grid, pressure, tuple(perturbations),
                          ensemble.replicas, nu)
    final = run_flow(ensemble, drift, nu, dt, steps, driver, observers=(obs,),
                     weights=weights)
    return ActionRun(drift.grid, nu, dt, t_final, tuple(perturbations),
                     obs.k0, obs.b0, obs.k1, obs.k2, obs.c,
                     obs.htr_max, obs.hdet_max, obs.det_defect_max, final)


def _breakdown(s1: np.ndarray, s2: np.ndarray) -> ActionBreakdown:
    r = s1.shape[0]
    return ActionBreakdown(float(s1.mean()), float(s2.mean()),
                           float(s1.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0,
                           float(s2.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0,
                           r)


def action_evaluate(run: ActionRun) -> ActionBreakdown:
    """S(g, p) itself: replica means of the kinetic and constraint terms."""
    return _breakdown(*run.replica_action())


def perturbed_action(run: ActionRun, pert, epsilon: float) -> ActionBreakdown:
    """S(g^eps, p^eps) along a registered perturbation, same paths as the base."""
    i = run.pert_index(pert)
    worst = abs(epsilon) * run.htr_max[i] + epsilon**2 * run.hdet_max[i]
    if worst > 0.8:
        raise ValueError(
            f"eps = {epsilon} may make I + eps grad h singular "
            f"(|eps tr H| + eps^2 |det H| up to {worst:.3f})")
    return _breakdown(*run.replica_action(i, epsilon))


# ---------------------------------------------------------------------------
# Gateaux derivative
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GateauxEstimate:
    """Central-difference ladder and its Richardson limit.

    rungs holds (eps, value, stderr) per ladder entry; extrapolated removes
    the O(eps^2) term from the two smallest rungs. order_estimate reports the
    observed convergence order of the rung deviations (None when the rungs
    already agree to roundoff, e.g. multiplier-only perturbations).
    """

    label: str
    rungs: list[tuple[float, float, float]]
    extrapolated: float
    stderr: float
    order_estimate: float | None


def gateaux_derivative(run: ActionRun, pert, epsilon_ladder) -> GateauxEstimate:
    """delta S along a perturbation from the common-random-number ladder."""
    ladder = [float(e) for e in epsilon_ladder]
    if len(ladder) < 2:
        raise ValueError("the ladder needs at least two eps values")
    if any(e <= 0 for e in ladder) or any(a <= b for a, b in zip(ladder, ladder[1:])):
        raise ValueError("epsilon ladder must be strictly decreasing and positive")
    i = run.pert_index(pert)
    r = run.replicas
    per_rung = []
    diffs = []
    for eps in ladder:
        plus = np.add(*run.replica_action(i, eps))
        minus = np.add(*run.replica_action(i, -eps))
        d = (plus - minus) / (2.0 * eps)
        diffs.append(d)
        per_rung.append((eps, float(d.mean()),
                         float(d.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0))
    e1, e0 = ladder[-2], ladder[-1]
    extrap = (e1**2 * diffs[-1] - e0**2 * diffs[-2]) / (e1**2 - e0**2)
    mean = float(extrap.mean())
    se = float(extrap.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
    order = None
    devs = [abs(v - mean) for _, v, _ in per_rung]
    if len(per_rung) >= 2 and min(devs) > 1e-13 * max(1.0, abs(mean)):
        fit = np.polyfit(np.log(ladder), np.log(devs), 1)
        order = float(fit[0])
    label = run.perturbations[i].label if run.perturbations else "pert"
    return GateauxEstimate(label, per_rung, mean, se, order)


# ---------------------------------------------------------------------------
# Euler-Lagrange pairing and multiplier probes
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ELResidual:
    """Monte Carlo pairing of the momentum residual with h, plus the grid
    sup-norm of the residual field itself for reference."""

    pairing: float
    stderr: float
    residual_norm: float


class _PairingObserver(FlowObserver):
    def __init__(self, grid, drift, pressure, pert, nu, replicas):
        self.grid = grid
        self.drift = drift
        self.pressure = pressure
        self.pert = pert
        self.nu = nu
        self.acc = np.zeros(replicas)
        self.residual_norm = 0.0

    def _residual_coeffs(self, t: float) -> np.ndarray:
        """d_t v + (v . grad) v - nu Lap v + grad p, spectrally."""
        from .solver import _advection_coeffs

        g = self.grid
        c = self.drift.coeffs_at(t)
        adv = _advection_coeffs(g, c)
        pc = self.pressure.coeffs_at(t)
        res = self.drift.velocity_dt_coeffs_at(t) + adv + self.nu * g.k_squared * c
        res = res + np.stack([1j * g.k1 * pc, 1j * g.k2 * pc])
        return res

    def accumulate(self, node, t, ens, drift_values, drift_grads, weight):
        res = self._residual_coeffs(t)
        self.residual_norm = max(
            self.residual_norm, float(np.max(np.abs(_ifft(res)))))
        if self.pert._w_eval is None:
            return
        table = PhaseTable(ens.positions)
        rvals = table.evaluate(PointEvaluator(self.grid, res))
        a = self.pert.envelope.value(t)
        w = table.evaluate(self.pert._w_eval)[:2]
        pair = a * (rvals[0] * w[0] + rvals[1] * w[1])
        self.acc += weight * TWO_PI**2 * pair.mean(axis=-1)


def euler_lagrange_residual(drift: DriftField, pressure, pert: PerturbationField, *,
                            nu: float, dt: float, t_final: float,
                            driver: BrownianDriver,
                            ensemble: FlowEnsemble | None = None, stride: int = 1,
                            quadrature: str = "simpson") -> ELResidual:
    """E int int (d_t v + (v . grad) v - nu Lap v + grad p) . h (t, g_t) dx dt.

    Runs its own flow pass (positions only) with the same driver keys as an
    action pass, so the paths match an action run at identical parameters.
    """
    steps = int(round(t_final / dt))
    if abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    if ensemble is None:
        ensemble = make_flow_ensemble(drift.grid, driver.replicas, stride=stride,
                                      jacobians=False)
    weights = _quadrature_weights(quadrature, steps, dt)
    obs = _PairingObserver(drift.grid, drift, pressure, pert, nu, ensemble.replicas)
    run_flow(ensemble, drift, nu, dt, steps, driver, observers=(obs,), weights=weights)
    r = ensemble.replicas
    se = float(obs.acc.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
    return ELResidual(float(obs.acc.mean()), se, obs.residual_norm)


@dataclass(eq=False)
class MultiplierProbe:
    label: str
    value: float
    stderr: float


def multiplier_probe(drift: DriftField, *, nu: float, dt: float, t_final: float,
                     driver: BrownianDriver, phis=None,
                     ensemble: FlowEnsemble | None = None, stride: int = 1,
                     quadrature: str = "simpson") -> list[MultiplierProbe]:
    """E int int phi(t, g_t(x)) (det grad g_t(x) - 1) dx dt per multiplier phi.

    Vanishing for every phi in a separating family forces det grad g = 1:
    the probes are the incompressibility half of criticality. phi defaults to
    the multiplier part of the default basis.
    """
    if phis is None:
        phis = default_multiplier_basis(drift.grid, t_final)
    run = prepare_action_run(drift, ZeroPressure(drift.grid), nu=nu, dt=dt,
                             t_final=t_final, driver=driver, ensemble=ensemble,
                             stride=stride, perturbations=phis, quadrature=quadrature)
    out = []
    r = run.replicas
    for i, phi in enumerate(phis):
        vals = run.constraint_poly[i, 0]  # eps^1 coefficient: int phi (det - 1)
        se = float(vals.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
        out.append(MultiplierProbe(phi.label, float(vals.mean()), se))
    return out
