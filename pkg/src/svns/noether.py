"""Conserved-quantity diagnostics for stochastic Lagrangian flows.

The central object is the forward material-diffusion operator

    L_t f = d f/dt + (v . grad) f + nu Lap f,

the generator of the noisy particle motion composed with a field: for smooth
f, the generalized derivative of t -> f(t, g_t(x)) along the flow equals
(L_t f)(t, g_t(x)). Note the + nu Lap sign — this is the Ito/forward
generator, not the Navier-Stokes operator, and the two differ by exactly
2 nu Lap f.

A candidate symmetry is a pair (eta, G): a space shift direction eta(t, x)
and a compensator G(t, x). Invariance of the kinetic Lagrangian under the
shift means the pathwise identity int v(g) . (L_t eta)(g) dx =
int (L_t G)(g) dx per replica; when it holds, the Eulerian residual
int L_t(v . eta - G) dx vanishes for every t and the x-integrated charge
series is a martingale along the flow. Constant translations (eta = e_i,
G = 0) are the canonical pair on the periodic domain: every operation here
accepts them and generic user-supplied band-limited pairs alike.

All products are formed on the grid with the same 2/3-rule dealiasing as the
flow solver, so operator identities hold to roundoff, not just to truncation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import (
    PhaseTable,
    PointEvaluator,
    SpectralField,
    SpectralVectorField,
    TorusGrid,
    _fft,
    _ifft,
)
from .flows import (
    BranchEstimate,
    BrownianDriver,
    FlowObserver,
    det_jacobian,
    generalized_derivative,
    make_flow_ensemble,
    run_flow,
)
from .solver import DriftField, NSTrajectory

TWO_PI = 2.0 * np.pi

__all__ = [
    "ConstantEnvelope",
    "SymmetryPair",
    "NoetherReport",
    "ProbePoint",
    "translation_pair",
    "material_operator",
    "invariance_check",
    "noether_residual",
    "momentum_series",
    "martingale_probe",
]


class ConstantEnvelope:
    """a(t) = 1: the time profile of a symmetry that never switches off."""

    def value(self, t: float) -> float:
        return 1.0

    def derivative(self, t: float) -> float:
        return 0.0


class SymmetryPair:
    """Candidate Lagrangian symmetry: shift direction eta and compensator G.

    eta(t, x) = a(t) H(x) with H a band-limited vector field; G(t, x) =
    a(t) Psi(x) scalar. Either part may be absent (taken as zero). Both are
    spectral, hence periodic by construction; the envelope defaults to the
    constant profile used for plain translations.
    """

    def __init__(self, grid: TorusGrid, eta_coeffs: np.ndarray | None = None,
                 g_coeffs: np.ndarray | None = None, envelope=None,
                 label: str = "pair"):
        self.grid = grid
        self.envelope = envelope if envelope is not None else ConstantEnvelope()
        self.label = label
        self.eta_coeffs = None if eta_coeffs is None else np.asarray(eta_coeffs, dtype=complex)
        self.g_coeffs = None if g_coeffs is None else np.asarray(g_coeffs, dtype=complex)
        if self.eta_coeffs is not None and self.eta_coeffs.shape != (2, grid.n, grid.n):
            raise ValueError("eta must have shape (2, n, n)")
        if self.g_coeffs is not None and self.g_coeffs.shape != (grid.n, grid.n):
            raise ValueError("G must have shape (n, n)")
        g = grid
        if self.eta_coeffs is None:
            self._eta_eval = None
        else:
            w = self.eta_coeffs
            self._eta_eval = PointEvaluator(g, np.stack([
                w[0], w[1],
                1j * g.k1 * w[0], 1j * g.k2 * w[0],
                1j * g.k1 * w[1], 1j * g.k2 * w[1],
                -g.k_squared * w[0], -g.k_squared * w[1],
            ]))
        if self.g_coeffs is None:
            self._g_eval = None
        else:
            p = self.g_coeffs
            self._g_eval = PointEvaluator(g, np.stack([
                p, 1j * g.k1 * p, 1j * g.k2 * p, -g.k_squared * p,
            ]))


def translation_pair(grid: TorusGrid, axis: int, label: str | None = None) -> SymmetryPair:
    """Constant shift along a coordinate axis, compensator zero."""
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    eta = np.zeros((2, grid.n, grid.n), dtype=complex)
    eta[axis, 0, 0] = 1.0
    return SymmetryPair(grid, eta_coeffs=eta,
                        label=label or f"translation-{'xy'[axis]}")


@dataclass(eq=False)
class NoetherReport:
    """Time series attached to a symmetry pair on one trajectory or flow run.

    residual/charge come from the deterministic Eulerian check; defect/stderr
    from the Monte Carlo invariance check. Unused channels stay None.
    """

    times: np.ndarray
    residual: np.ndarray | None = None
    charge: np.ndarray | None = None
    defect: np.ndarray | None = None
    stderr: np.ndarray | None = None
    warning: str | None = None


# ---------------------------------------------------------------------------
# the material-diffusion operator on the grid
# ---------------------------------------------------------------------------

def material_operator(f: SpectralField, v: SpectralVectorField, nu: float,
                      f_dt: SpectralField | None = None) -> SpectralField:
    """(d/dt + (v . grad) + nu Lap) f on the grid.

    f_dt carries the time derivative of f (None for steady f); the advection
    product is dealiased exactly like the flow solver's, so substituting a
    stored trajectory node for f and its tendency for f_dt makes operator
    identities hold to roundoff.
    """
    if f.grid is not v.grid and f.grid.n != v.grid.n:
        raise ValueError("f and v live on different grids")
    g = f.grid
    w = _ifft(v.coeffs)
    gf1 = _ifft(1j * g.k1 * f.coeffs)
    gf2 = _ifft(1j * g.k2 * f.coeffs)
    adv = _fft(w[0] * gf1 + w[1] * gf2) * g.dealias_mask
    out = adv - nu * g.k_squared * f.coeffs
    if f_dt is not None:
        out = out + f_dt.coeffs
    return SpectralField(g, out)


# ---------------------------------------------------------------------------
# Monte Carlo invariance check along the flow
# ---------------------------------------------------------------------------

class _InvarianceObserver(FlowObserver):
    def __init__(self, pair: SymmetryPair, nu: float, nnodes: int, replicas: int):
        self.pair = pair
        self.nu = nu
        self.times = np.zeros(nnodes)
        self.lhs = np.zeros((nnodes, replicas))
        self.rhs = np.zeros((nnodes, replicas))
        self.det_defect = 0.0

    def accumulate(self, node, t, ens, drift_values, drift_grads, weight):
        self.times[node] = t
        table = PhaseTable(ens.positions)
        pair = self.pair
        a = pair.envelope.value(t)
        da = pair.envelope.derivative(t)
        v = drift_values
        if ens.jacobians is not None:
            self.det_defect = max(self.det_defect,
                                  float(np.max(np.abs(det_jacobian(ens) - 1.0))))
        if pair._eta_eval is not None:
            e = table.evaluate(pair._eta_eval)
            # L_t eta at the particles, same chain-rule form as the operator
            le1 = da * e[0] + a * (v[..., 0] * e[2] + v[..., 1] * e[3] + self.nu * e[6])
            le2 = da * e[1] + a * (v[..., 0] * e[4] + v[..., 1] * e[5] + self.nu * e[7])
            self.lhs[node] = TWO_PI**2 * (v[..., 0] * le1 + v[..., 1] * le2).mean(axis=-1)
        if pair._g_eval is not None:
            m = table.evaluate(pair._g_eval)
            lg = da * m[0] + a * (v[..., 0] * m[1] + v[..., 1] * m[2] + self.nu * m[3])
            self.rhs[node] = TWO_PI**2 * lg.mean(axis=-1)


def invariance_check(pair: SymmetryPair, drift: DriftField, *, nu: float,
                     dt: float, t_final: float, driver: BrownianDriver,
                     stride: int = 1, det_tolerance: float = 1e-4) -> NoetherReport:
    """Per-time defect of the invariance identity along a noisy flow run.

    LHS(t) = int v(g) . (L_t eta)(g) dx and RHS(t) = int (L_t G)(g) dx are
    lattice-quadrature per replica; the defect is |mean(LHS - RHS)| over
    replicas with its standard error. The variation terms of the constrained
    Lagrangian vanish only on measure-preserving flows, so a Jacobian
    determinant defect beyond det_tolerance attaches a warning.
    """
    steps = int(round(t_final / dt))
    if abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    ens = make_flow_ensemble(pair.grid, driver.replicas, stride=stride, jacobians=True)
    obs = _InvarianceObserver(pair, nu, steps + 1, driver.replicas)
    run_flow(ens, drift, nu, dt, steps, driver, observers=(obs,))
    diff = obs.lhs - obs.rhs
    defect = np.abs(diff.mean(axis=1))
    stderr = diff.std(axis=1, ddof=1) / np.sqrt(driver.replicas)
    warning = None
    if obs.det_defect > det_tolerance:
        warning = (f"flow is not measure-preserving at tolerance {det_tolerance:g} "
                   f"(max |det - 1| = {obs.det_defect:.3g}); dropped variation "
                   "terms are not negligible")
    return NoetherReport(times=obs.times, defect=defect, stderr=stderr, warning=warning)


# ---------------------------------------------------------------------------
# deterministic Eulerian residual and charge
# ---------------------------------------------------------------------------

def noether_residual(pair: SymmetryPair, traj: NSTrajectory) -> NoetherReport:
    """r(t) = int L_t(v . eta - G) dx and Q(t) = int (v . eta - G) dx per node.

    Everything is evaluated spectrally from the stored velocity and tendency;
    no sampling is involved. For a true symmetry of the dynamics r vanishes
    identically; the function reports r for any pair, symmetry or not.
    """
    g = traj.grid
    nnodes = len(traj.times)
    residual = np.zeros(nnodes)
    charge = np.zeros(nnodes)
    env = pair.envelope
    eta_phys = None if pair.eta_coeffs is None else _ifft(pair.eta_coeffs)
    psi_c = pair.g_coeffs
    for i, t in enumerate(traj.times):
        a = env.value(float(t))
        da = env.derivative(float(t))
        vc = traj.velocity_coeffs[i]
        fc = np.zeros((g.n, g.n), dtype=complex)
        ftc = np.zeros((g.n, g.n), dtype=complex)
        if eta_phys is not None:
            w = _ifft(vc)
            dw = _ifft(traj.rhs_coeffs[i])
            f_phys = a * (w[0] * eta_phys[0] + w[1] * eta_phys[1])
            ft_phys = (a * (dw[0] * eta_phys[0] + dw[1] * eta_phys[1])
                       + da * (w[0] * eta_phys[0] + w[1] * eta_phys[1]))
            fc = _fft(f_phys)
            ftc = _fft(ft_phys)
        if psi_c is not None:
            fc = fc - a * psi_c
            ftc = ftc - da * psi_c
        lf = material_operator(SpectralField(g, fc),
                               SpectralVectorField(g, vc), traj.nu,
                               SpectralField(g, ftc))
        residual[i] = TWO_PI**2 * lf.coeffs[0, 0].real
        charge[i] = TWO_PI**2 * fc[0, 0].real
    return NoetherReport(times=traj.times.copy(), residual=residual, charge=charge)


def momentum_series(traj: NSTrajectory) -> np.ndarray:
    """int v_i dx per stored node, shape (nodes, 2): the translation charges."""
    return TWO_PI**2 * traj.velocity_coeffs[:, :, 0, 0].real.copy()


# ---------------------------------------------------------------------------
# pathwise martingale probe
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ProbePoint:
    """Charge series and its drift estimate at one sampled time.

    drift/drift_stderr aggregate the per-replica branch means into one
    number: replicas are independent, so the spread of their branch means
    already accounts for the branching noise.
    """

    t: float
    series: np.ndarray          # per-replica charge value
    estimate: BranchEstimate    # branching derivative, per replica
    drift: float
    drift_stderr: float


class _ChargeObservable:
    """Per-replica lattice quadrature of v . eta - G composed with the flow."""

    def __init__(self, pair: SymmetryPair, drift: DriftField):
        self.pair = pair
        self.drift = drift

    def values(self, t: float, positions: np.ndarray) -> np.ndarray:
        pair = self.pair
        a = pair.envelope.value(t)
        out = np.zeros(positions.shape[:-1])
        table = None
        if pair._eta_eval is not None:
            table = PhaseTable(positions)
            e = table.evaluate(pair._eta_eval)
            v = self.drift.velocity(t, positions)
            out += a * (v[..., 0] * e[0] + v[..., 1] * e[1])
        if pair._g_eval is not None:
            if table is None:
                table = PhaseTable(positions)
            out -= a * table.evaluate(pair._g_eval)[0]
        return TWO_PI**2 * out.mean(axis=-1)


def martingale_probe(pair: SymmetryPair, drift: DriftField, *, nu: float,
                     dt: float, driver: BrownianDriver,
                     sample_times: tuple[float, ...], stride: int = 1,
                     eps_steps: int = 8, branches: int = 16) -> list[ProbePoint]:
    """Drift of the charge series at each sampled time, by branching.

    The charge int (v . eta - G)(t, g_t(x)) dx is a martingale along the flow
    exactly when (eta, G) is a symmetry, so its branching difference quotient
    should vanish within error bars at every time. Sample times must be
    nonnegative ascending step multiples.
    """
    samples = [float(t) for t in sample_times]
    if not samples:
        raise ValueError("need at least one sample time")
    if any(b <= a for a, b in zip(samples, samples[1:])) or samples[0] < 0:
        raise ValueError("sample times must be nonnegative and strictly increasing")
    obs = _ChargeObservable(pair, drift)
    ens = make_flow_ensemble(pair.grid, driver.replicas, stride=stride, jacobians=False)
    out = []
    for t in samples:
        steps = int(round((t - ens.t) / dt))
        if abs(ens.t + steps * dt - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"sample time {t} is not a step multiple")
        ens = run_flow(ens, drift, nu, dt, steps, driver)
        series = obs.values(ens.t, ens.positions)
        est = generalized_derivative(obs, ens, drift, nu, dt, driver,
                                     eps_steps=eps_steps, branches=branches,
                                     keep_samples=False)
        nrep = est.mean.size
        se = float(est.mean.std(ddof=1) / np.sqrt(nrep)) if nrep > 1 else 0.0
        out.append(ProbePoint(t=ens.t, series=series, estimate=est,
                              drift=float(est.mean.mean()), drift_stderr=se))
    return out
