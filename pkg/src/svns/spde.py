"""Transport-noise stochastic velocity dynamics and the pathwise action.

The stochastic perturbation of the particle paths lifts to the velocity
field itself: v is advected by the same spatially uniform Brownian motion
that drives the paths. Per replica, with one 2-dimensional W,

    Ito:           dv = [nu Lap v - P(v.grad)v] dt + sqrt(2 nu) (dW . grad) v
    Stratonovich:  dv = -P(v.grad)v dt + sqrt(2 nu) (o dW . grad) v

(P the divergence-free projection; pressure is diagnostic). The two forms
are the same equation: applying the transport operator twice gives the
Laplacian, so the Ito-Stratonovich correction of sqrt(2 nu)(dW.grad)v is
exactly nu Lap v and no explicit viscous term appears in Stratonovich
form - viscosity is the average shadow of the noise.

Spatially uniform noise makes an exact oracle available: for steady Euler
data u (P(u.grad)u = 0) the Stratonovich equation transports u rigidly,

    v(t, x) = u(x + sqrt(2 nu) W_t),    v_hat_k(t) = u_hat_k e^{i sqrt(2 nu) k . W_t},

pathwise. Averaging the random phase over replicas yields heat decay of
the ensemble mean, E v_hat_k(t) = u_hat_k e^{-nu |k|^2 t}: the viscous
equation re-emerges in the mean without any viscous term in the dynamics.

Both integrators keep the per-mode noise action diagonal (the transport
phase i sqrt(2 nu)(k . dW) multiplies each coefficient), so the noise adds
no aliasing; products are dealiased exactly as in the deterministic solver,
every step ends with a projection, and all randomness flows through the
counter-based driver, making every result a pure function of (seed,
replica count, parameters).

The pathwise action functional of a flow run whose martingale part is the
scaled Brownian motion sqrt(2 nu) W is also evaluated here: its two
stochastic-integral terms (drift paired against dM, and sqrt(2 nu) times
drift paired against dW) cancel identically for such runs, which is
verified numerically, and the remainder is the per-replica integrand of
the averaged action.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fields import (
    TWO_PI,
    PointEvaluator,
    SpectralVectorField,
    TorusGrid,
    _fft,
    _ifft,
)
from .flows import BrownianDriver, FlowObserver, make_flow_ensemble, run_flow
from .solver import CFLError, DriftField

__all__ = [
    "SPDEConfig",
    "SPDEState",
    "make_spde_state",
    "spde_step_ito",
    "spde_step_stratonovich",
    "spde_solve",
    "diagnostic_pressure",
    "shift_oracle",
    "StrongErrorRow",
    "StrongErrorReport",
    "strong_error",
    "ModeStat",
    "ensemble_mode_means",
    "SemimartingaleFlowRun",
    "run_semimartingale_flow",
    "TildeActionValue",
    "tilde_action_evaluate",
]

_SCHEMES = ("ito", "stratonovich-heun")


@dataclass(frozen=True)
class SPDEConfig:
    """Integration parameters for the transport-noise velocity equation.

    The CFL budget counts drift plus noise displacement per step against
    the grid spacing. Its default is looser than the deterministic
    solver's 0.5: the noise term is applied as an exact per-mode phase,
    so the guard protects only the accuracy of the advection products,
    and the maximal Gaussian increment over ~10^6 draws would trip a 0.5
    budget spuriously at desk-scale step sizes.
    """

    grid: TorusGrid
    nu: float
    dt: float
    t_final: float
    replicas: int
    scheme: str = "stratonovich-heun"
    cfl_limit: float = 1.0

    def __post_init__(self):
        if self.nu < 0:
            raise ValueError(f"viscosity must be nonnegative, got {self.nu}")
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) > 1e-8:
            raise ValueError(
                f"t_final = {self.t_final} is not an integer multiple of dt = {self.dt}")
        if self.replicas < 1:
            raise ValueError(f"need at least one replica, got {self.replicas}")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {_SCHEMES}")

    @property
    def steps(self) -> int:
        return int(round(self.t_final / self.dt))


@dataclass(eq=False)
class SPDEState:
    """Per-replica spectral velocity plus its accumulated driving noise.

    coeffs is (replicas, 2, n, n); brownian is the running sum of the raw
    driver increments, so it is reproducible from the driver alone.
    """

    grid: TorusGrid
    coeffs: np.ndarray
    t: float
    step_index: int
    brownian: np.ndarray

    @property
    def replicas(self) -> int:
        return self.coeffs.shape[0]

    def field(self, replica: int) -> SpectralVectorField:
        return SpectralVectorField(self.grid, self.coeffs[replica])


class _HalfGrid:
    """Wavenumber arrays restricted to the real-transform half layout.

    Real fields carry redundant conjugate modes in the full n x n layout;
    every per-step operator here is mode-local, so the integrator works on
    the (n, n//2 + 1) half layout throughout (roughly halving both FFT and
    elementwise cost) and reconstructs the full layout only at step
    boundaries.
    """

    def __init__(self, grid: TorusGrid):
        h = grid.n // 2 + 1
        self.n = grid.n
        self.h = h
        self.k1 = np.ascontiguousarray(grid.k1[:, :h]).astype(np.float64)
        self.k2 = np.ascontiguousarray(grid.k2[:, :h]).astype(np.float64)
        self.k_squared = np.ascontiguousarray(grid.k_squared[:, :h])
        safe = self.k_squared.copy()
        safe[0, 0] = 1.0
        self.k_squared_safe = safe
        self.dealias_mask = np.ascontiguousarray(grid.dealias_mask[:, :h])


_HALF_GRIDS: dict[TorusGrid, _HalfGrid] = {}


def _half_grid(grid: TorusGrid) -> _HalfGrid:
    hg = _HALF_GRIDS.get(grid)
    if hg is None:
        hg = _HALF_GRIDS[grid] = _HalfGrid(grid)
    return hg


def _to_half(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Keep columns k2 = 0..n/2 of a conjugate-symmetric full layout."""
    return np.ascontiguousarray(c[..., : grid.n // 2 + 1])


def _to_full(grid: TorusGrid, ch: np.ndarray) -> np.ndarray:
    """Rebuild the full layout from half-layout coefficients of a real field:
    the missing columns are conj values at the negated wavenumber."""
    n = grid.n
    h = n // 2 + 1
    out = np.empty(ch.shape[:-1] + (n,), dtype=np.complex128)
    out[..., :h] = ch
    body = ch[..., 1:h - 1]
    out[..., h:] = np.conj(np.roll(np.flip(body, axis=(-2, -1)), 1, axis=-2))
    return out


def _leray_half(hg: _HalfGrid, c: np.ndarray) -> np.ndarray:
    """Divergence-free projection of (..., 2, n, h) half-layout batches."""
    fac = (hg.k1 * c[..., 0, :, :] + hg.k2 * c[..., 1, :, :]) / hg.k_squared_safe
    return np.stack([c[..., 0, :, :] - hg.k1 * fac,
                     c[..., 1, :, :] - hg.k2 * fac], axis=-3)


def _values_half(hg: _HalfGrid, c: np.ndarray) -> np.ndarray:
    """Grid values of half-layout coefficients (inverse real transform)."""
    return np.fft.irfft2(c * (hg.n * hg.n), s=(hg.n, hg.n))


def _advection_half(hg: _HalfGrid, c: np.ndarray,
                    values: np.ndarray | None = None) -> np.ndarray:
    """Dealiased (v.grad)v for dealiased half-layout batches (..., 2, n, h)."""
    n = hg.n
    w = _values_half(hg, c) if values is None else values
    g1 = np.fft.irfft2(1j * hg.k1 * c * (n * n), s=(n, n))
    g2 = np.fft.irfft2(1j * hg.k2 * c * (n * n), s=(n, n))
    w1 = w[..., 0, :, :]
    w2 = w[..., 1, :, :]
    adv = np.stack([w1 * g1[..., 0, :, :] + w2 * g2[..., 0, :, :],
                    w1 * g1[..., 1, :, :] + w2 * g2[..., 1, :, :]], axis=-3)
    return np.fft.rfft2(adv) / (n * n) * hg.dealias_mask


def _transport_phase_half(hg: _HalfGrid, nu: float, dw: np.ndarray) -> np.ndarray:
    """sqrt(2 nu) (k . dW) per half-layout mode, increments dw (..., 2)."""
    return np.sqrt(2.0 * nu) * (dw[..., 0, None, None] * hg.k1
                                + dw[..., 1, None, None] * hg.k2)


def _leray_batch(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Divergence-free projection of (..., 2, n, n) coefficient batches."""
    ksq = grid.k_squared.copy()
    ksq[0, 0] = 1.0
    fac = (grid.k1 * c[..., 0, :, :] + grid.k2 * c[..., 1, :, :]) / ksq
    return np.stack([c[..., 0, :, :] - grid.k1 * fac,
                     c[..., 1, :, :] - grid.k2 * fac], axis=-3)


def _advection_batch(grid: TorusGrid, c: np.ndarray) -> np.ndarray:
    """Dealiased (v.grad)v for dealiased batches c of shape (..., 2, n, n)."""
    w = _ifft(c)
    g1 = _ifft(1j * grid.k1 * c)
    g2 = _ifft(1j * grid.k2 * c)
    w1 = w[..., 0, :, :]
    w2 = w[..., 1, :, :]
    adv = np.stack([w1 * g1[..., 0, :, :] + w2 * g2[..., 0, :, :],
                    w1 * g1[..., 1, :, :] + w2 * g2[..., 1, :, :]], axis=-3)
    return _fft(adv) * grid.dealias_mask


def _transport_phase(grid: TorusGrid, nu: float, dw: np.ndarray) -> np.ndarray:
    """sqrt(2 nu) (k . dW) per mode, for increments dw of shape (..., 2)."""
    return np.sqrt(2.0 * nu) * (dw[..., 0, None, None] * grid.k1
                                + dw[..., 1, None, None] * grid.k2)


def make_spde_state(v0: SpectralVectorField, replicas: int) -> SPDEState:
    """All replicas started from v0 (projected and dealiased) at t = 0."""
    if replicas < 1:
        raise ValueError(f"need at least one replica, got {replicas}")
    g = v0.grid
    c = _leray_batch(g, v0.coeffs * g.dealias_mask)
    coeffs = np.broadcast_to(c, (replicas,) + c.shape).copy()
    return SPDEState(g, coeffs, 0.0, 0, np.zeros((replicas, 2)))


def _check_compat(state: SPDEState, config: SPDEConfig, driver: BrownianDriver) -> None:
    if state.grid != config.grid:
        raise ValueError("state lives on a different grid than the config")
    if state.replicas != config.replicas:
        raise ValueError("state and config disagree on the replica count")
    if driver.replicas != state.replicas:
        raise ValueError("driver and state disagree on the replica count")


def _advance_half(hg: _HalfGrid, config: SPDEConfig, c: np.ndarray,
                  dw: np.ndarray, stratonovich: bool) -> np.ndarray:
    """One step on half-layout coefficients c of shape (replicas, 2, n, h)."""
    dt = config.dt
    nu = config.nu
    w = _values_half(hg, c)
    displacement = dt * float(np.max(np.abs(w))) + np.sqrt(2.0 * nu) * float(
        np.max(np.abs(dw)))
    budget = config.cfl_limit * (2.0 * np.pi / hg.n)
    if displacement > budget:
        raise CFLError(
            f"step displacement {displacement:.3g} exceeds the CFL budget "
            f"{budget:.3g} (limit {config.cfl_limit} cells)")
    theta = _transport_phase_half(hg, nu, dw)[..., None, :, :]
    a0 = -_leray_half(hg, _advection_half(hg, c, w))
    if stratonovich:
        n0 = 1j * theta * c
        pred = c + dt * a0 + n0
        a1 = -_leray_half(hg, _advection_half(hg, pred))
        cnew = c + 0.5 * dt * (a0 + a1) + 0.5 * (n0 + 1j * theta * pred)
    else:
        cnew = c + dt * (a0 - nu * hg.k_squared * c) + 1j * theta * c
    return _leray_half(hg, cnew) * hg.dealias_mask


def _advance(state: SPDEState, config: SPDEConfig, dw: np.ndarray,
             stratonovich: bool) -> SPDEState:
    """One step with explicit increments dw of shape (replicas, 2)."""
    g = state.grid
    hg = _half_grid(g)
    cnew = _to_full(g, _advance_half(hg, config, _to_half(g, state.coeffs),
                                     dw, stratonovich))
    return SPDEState(g, cnew, state.t + config.dt, state.step_index + 1,
                     state.brownian + dw)


def spde_step_ito(state: SPDEState, config: SPDEConfig,
                  driver: BrownianDriver) -> SPDEState:
    """Euler-Maruyama step of the Ito form (explicit viscosity, raw noise)."""
    _check_compat(state, config, driver)
    dw = driver.increments(state.step_index, config.dt)
    return _advance(state, config, dw, stratonovich=False)


def spde_step_stratonovich(state: SPDEState, config: SPDEConfig,
                           driver: BrownianDriver) -> SPDEState:
    """Heun step of the Stratonovich form: predictor with the increment,
    corrector averaging drift and noise coefficients; no explicit viscous
    term - the Heun average supplies the Ito-Stratonovich correction."""
    _check_compat(state, config, driver)
    dw = driver.increments(state.step_index, config.dt)
    return _advance(state, config, dw, stratonovich=True)


def spde_solve(v0, config: SPDEConfig, driver: BrownianDriver) -> SPDEState:
    """March a state (or a field, broadcast to all replicas) to t_final."""
    state = v0 if isinstance(v0, SPDEState) else make_spde_state(v0, config.replicas)
    _check_compat(state, config, driver)
    strat = config.scheme == "stratonovich-heun"
    g = state.grid
    hg = _half_grid(g)
    c = _to_half(g, state.coeffs)
    brownian = state.brownian.copy()
    step = state.step_index
    t = state.t
    for _ in range(config.steps):
        dw = driver.increments(step, config.dt)
        c = _advance_half(hg, config, c, dw, stratonovich=strat)
        brownian += dw
        step += 1
        t += config.dt
    return SPDEState(g, _to_full(g, c), t, step, brownian)


def diagnostic_pressure(state: SPDEState) -> np.ndarray:
    """Per-replica mean-zero pressure recovered from the current velocity,
    -Lap p = div((v.grad)v), shaped (replicas, n, n)."""
    g = state.grid
    adv = _advection_batch(g, state.coeffs)
    ksq = g.k_squared.copy()
    ksq[0, 0] = 1.0
    p = 1j * (g.k1 * adv[..., 0, :, :] + g.k2 * adv[..., 1, :, :]) / ksq
    p[..., 0, 0] = 0.0
    return p


# ---------------------------------------------------------------------------
# exact oracle and strong-convergence measurement
# ---------------------------------------------------------------------------

def _steady_euler_defect(u: SpectralVectorField) -> float:
    g = u.grid
    resid = _leray_batch(g, _advection_batch(g, u.coeffs))
    return float(np.sqrt(TWO_PI**2 * np.sum(np.abs(resid) ** 2)))


def shift_oracle(u: SpectralVectorField, w_values: np.ndarray,
                 nu: float) -> np.ndarray:
    """Exact solution for steady Euler data: u rigidly shifted by the noise.

    w_values holds accumulated Brownian values with trailing axis 2 (any
    leading axes: a path, a replica batch, or a single value); the result
    prepends those axes to (2, n, n) coefficient arrays realizing
    u(x + sqrt(2 nu) W) as the per-mode phase e^{i sqrt(2 nu) k . W}.
    """
    defect = _steady_euler_defect(u)
    if defect > 1e-8:
        raise ValueError(
            f"drift is not a steady Euler solution: projected advection has "
            f"L2 norm {defect:.3g}")
    w_values = np.asarray(w_values, dtype=np.float64)
    if w_values.shape[-1] != 2:
        raise ValueError("Brownian values must have a trailing axis of size 2")
    phase = np.exp(1j * _transport_phase(u.grid, nu, w_values))
    return phase[..., None, :, :] * u.coeffs


@dataclass(eq=False)
class StrongErrorRow:
    dt: float
    mean_error: float
    stderr: float


@dataclass(eq=False)
class StrongErrorReport:
    """Pathwise L2 errors against the exact oracle per step size, and the
    least-squares slope of log error vs log dt (None at roundoff level)."""

    scheme: str
    rows: list[StrongErrorRow]
    order: float | None


def strong_error(config: SPDEConfig, u: SpectralVectorField, dt_ladder,
                 driver: BrownianDriver) -> StrongErrorReport:
    """Integrate steady Euler data on every rung of the ladder with shared
    Brownian paths (coarse increments are sums of fine ones) and compare
    against the exact shifted field at t_final."""
    ladder = [float(d) for d in dt_ladder]
    if len(ladder) < 2:
        raise ValueError("the step ladder needs at least two entries")
    if any(d <= 0 for d in ladder) or any(a <= b for a, b in zip(ladder, ladder[1:])):
        raise ValueError("step ladder must be strictly decreasing and positive")
    fine = ladder[-1]
    for d in ladder:
        if abs(d / fine - round(d / fine)) > 1e-9:
            raise ValueError(
                f"every ladder step must be an integer multiple of the finest; "
                f"{d} / {fine} is not")
        steps = config.t_final / d
        if abs(steps - round(steps)) > 1e-8:
            raise ValueError(
                f"t_final = {config.t_final} is not an integer multiple of dt = {d}")
    if config.grid != u.grid:
        raise ValueError("drift lives on a different grid than the config")
    if driver.replicas != config.replicas:
        raise ValueError("driver and config disagree on the replica count")
    steps_fine = int(round(config.t_final / fine))
    increments = np.stack([driver.increments(i, fine) for i in range(steps_fine)])
    oracle = shift_oracle(u, increments.sum(axis=0), config.nu)
    strat = config.scheme == "stratonovich-heun"
    rows = []
    for d in ladder:
        factor = int(round(d / fine))
        nsteps = steps_fine // factor
        coarse = increments[:nsteps * factor].reshape(nsteps, factor,
                                                     config.replicas, 2).sum(axis=1)
        cfg = replace(config, dt=d)
        hg = _half_grid(config.grid)
        c = _to_half(config.grid, make_spde_state(u, config.replicas).coeffs)
        for i in range(nsteps):
            c = _advance_half(hg, cfg, c, coarse[i], stratonovich=strat)
        diff = _to_full(config.grid, c) - oracle
        errors = np.sqrt(TWO_PI**2 * np.sum(np.abs(diff) ** 2, axis=(1, 2, 3)))
        r = config.replicas
        se = float(errors.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
        rows.append(StrongErrorRow(d, float(errors.mean()), se))
    means = np.array([row.mean_error for row in rows])
    order = None
    if np.all(means > 1e-12):
        order = float(np.polyfit(np.log([row.dt for row in rows]), np.log(means), 1)[0])
    return StrongErrorReport(config.scheme, rows, order)


# ---------------------------------------------------------------------------
# ensemble-mean decay
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ModeStat:
    """Ensemble mean of one spectral coefficient with componentwise errors."""

    mode: tuple[int, int, int]
    mean: complex
    stderr_re: float
    stderr_im: float
    replicas: int


def ensemble_mode_means(v0: SpectralVectorField, config: SPDEConfig, seed: int,
                        modes, chunk_size: int = 1000) -> list[ModeStat]:
    """Mean of selected coefficients at t_final over config.replicas replicas.

    modes are (component, k1, k2) integer triples. Replicas run in
    independent chunks to bound memory; each chunk derives its driver seed
    from the base seed and the chunk index by a fixed 64-bit mix, so the
    result is a pure function of (seed, replica count, parameters).
    """
    g = v0.grid
    idx = {int(k): i for i, k in enumerate(g.k)}
    sel = []
    for comp, k1, k2 in modes:
        if comp not in (0, 1) or k1 not in idx or k2 not in idx:
            raise ValueError(f"mode {(comp, k1, k2)} not representable on the grid")
        sel.append((comp, idx[k1], idx[k2]))
    total = config.replicas
    sums = np.zeros(len(sel), dtype=complex)
    sums_re2 = np.zeros(len(sel))
    sums_im2 = np.zeros(len(sel))
    done = 0
    chunk_index = 0
    while done < total:
        r = min(chunk_size, total - done)
        chunk_seed = (seed ^ ((chunk_index + 1) * 0x9E3779B97F4A7C15)) % 2**64
        driver = BrownianDriver(seed=chunk_seed, replicas=r)
        cfg = replace(config, replicas=r)
        state = spde_solve(v0, cfg, driver)
        for j, (comp, i1, i2) in enumerate(sel):
            vals = state.coeffs[:, comp, i1, i2]
            sums[j] += vals.sum()
            sums_re2[j] += np.sum(vals.real**2)
            sums_im2[j] += np.sum(vals.imag**2)
        done += r
        chunk_index += 1
    out = []
    for j, mode in enumerate(modes):
        mean = sums[j] / total
        var_re = max(sums_re2[j] / total - mean.real**2, 0.0) * total / (total - 1)
        var_im = max(sums_im2[j] / total - mean.imag**2, 0.0) * total / (total - 1)
        out.append(ModeStat(tuple(mode), complex(mean),
                            float(np.sqrt(var_re / total)),
                            float(np.sqrt(var_im / total)), total))
    return out


# ---------------------------------------------------------------------------
# the pathwise action of a scaled-Brownian flow run
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SemimartingaleFlowRun:
    """Accumulated functionals of one flow pass dg = v dt + dM, with the
    martingale part recorded explicitly.

    For runs produced here the martingale part is the scaled Brownian
    motion sqrt(2 nu) W ("scaled-brownian"); a run with a general
    martingale part is representable (martingale_form = "general" with the
    pairing sums absent) but has no executable flow in this package.
    kinetic and constraint are per-replica time-quadratures of
    int |v(t, g_t)|^2 dx and int p(t, g_t)(det grad g_t - 1) dx;
    mart_pairing and wiener_pairing are left-endpoint Ito sums of
    int v(t, g_t) dx paired with the dM and dW increments respectively
    (the latter unscaled).
    """

    grid: TorusGrid
    nu: float
    dt: float
    t_final: float
    martingale_form: str
    kinetic: np.ndarray
    constraint: np.ndarray
    mart_pairing: np.ndarray | None = None
    wiener_pairing: np.ndarray | None = None

    @property
    def replicas(self) -> int:
        return self.kinetic.shape[0]


class _TildeObserver(FlowObserver):
    def __init__(self, grid, pressure, nu, dt, steps, driver, replicas):
        self.grid = grid
        self.pressure = pressure
        self.nu = nu
        self.dt = dt
        self.steps = steps
        self.driver = driver
        self.kinetic = np.zeros(replicas)
        self.constraint = np.zeros(replicas)
        self.mart = np.zeros(replicas)
        self.wiener = np.zeros(replicas)

    def accumulate(self, node, t, ens, drift_values, drift_grads, weight):
        v1 = drift_values[..., 0]
        v2 = drift_values[..., 1]
        if weight != 0.0:
            self.kinetic += weight * TWO_PI**2 * (v1**2 + v2**2).mean(axis=-1)
            j = ens.jacobians
            det = (j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0])
            pc = self.pressure.coeffs_at(t)
            pvals = PointEvaluator(self.grid, pc[None])(ens.positions)[0]
            self.constraint += weight * TWO_PI**2 * (pvals * (det - 1.0)).mean(axis=-1)
        if node < self.steps:
            # left-endpoint Ito sums against the coming increment; the
            # driver is counter-based, so this reads the exact increment
            # the flow will consume for this step
            dw = self.driver.increments(node, self.dt)
            vbar = TWO_PI**2 * np.stack([v1.mean(axis=-1), v2.mean(axis=-1)], axis=-1)
            dm = np.sqrt(2.0 * self.nu) * dw
            self.mart += vbar[:, 0] * dm[:, 0] + vbar[:, 1] * dm[:, 1]
            self.wiener += vbar[:, 0] * dw[:, 0] + vbar[:, 1] * dw[:, 1]


def run_semimartingale_flow(drift: DriftField, pressure, *, nu: float, dt: float,
                            t_final: float, driver: BrownianDriver,
                            ensemble=None, stride: int = 1,
                            quadrature: str = "simpson") -> SemimartingaleFlowRun:
    """One flow pass accumulating everything the pathwise action needs."""
    from .action import _quadrature_weights

    steps = int(round(t_final / dt))
    if abs(steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError("t_final must be an integer multiple of dt")
    if pressure.grid != drift.grid:
        raise ValueError("pressure lives on a different grid")
    if ensemble is None:
        ensemble = make_flow_ensemble(drift.grid, driver.replicas, stride=stride)
    if ensemble.jacobians is None:
        raise ValueError("the pathwise action needs Jacobian tracking")
    weights = _quadrature_weights(quadrature, steps, dt)
    obs = _TildeObserver(drift.grid, pressure, nu, dt, steps, driver,
                         ensemble.replicas)
    run_flow(ensemble, drift, nu, dt, steps, driver, observers=(obs,),
             weights=weights)
    return SemimartingaleFlowRun(drift.grid, nu, dt, t_final, "scaled-brownian",
                                 obs.kinetic, obs.constraint, obs.mart, obs.wiener)


@dataclass(eq=False)
class TildeActionValue:
    """Per-replica pathwise action with the cancellation defect of its two
    stochastic-integral terms."""

    values: np.ndarray
    mean: float
    stderr: float
    cancellation_defect: float


def tilde_action_evaluate(run: SemimartingaleFlowRun) -> TildeActionValue:
    """All four terms of the pathwise action, for scaled-Brownian runs.

    The dM pairing and the scaled dW pairing are identical sums computed in
    separate accumulators; their difference (the cancellation defect) is
    pure floating-point reassociation, and the value reduces to the
    kinetic-plus-constraint integrand, now pathwise rather than averaged.
    """
    if run.martingale_form != "scaled-brownian":
        raise ValueError(
            "unsupported martingale part: only runs whose martingale part is "
            "the scaled Brownian motion sqrt(2 nu) W can be evaluated")
    if run.mart_pairing is None or run.wiener_pairing is None:
        raise ValueError("run is missing its stochastic-integral pairings")
    term2 = run.mart_pairing
    term3 = np.sqrt(2.0 * run.nu) * run.wiener_pairing
    values = 0.5 * run.kinetic + run.constraint + term2 - term3
    defect = float(np.max(np.abs(term2 - term3))) if len(term2) else 0.0
    r = run.replicas
    se = float(values.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
    return TildeActionValue(values, float(values.mean()), se, defect)
