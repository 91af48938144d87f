"""Synthetic scenarios: load shapes, noise, parameter perturbation and a Newton power-flow oracle.

The oracle is deliberately independent of :mod:`gridfit.forward`: it builds
its own bus admittance matrix with a plain complex inverse of every line
impedance and solves the nodal power-mismatch equations with a damped
Newton iteration on stacked real/imaginary voltages.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import FLAT_START, TimeSeriesSet, source_phasors
from .errors import OracleNotConverged, ZeroCurrent
from .forward import MeterMap
from .netmodel import injection_matrix, line_matrices

METER_CLASSES = (0.0, 0.1, 0.2)


@dataclass(frozen=True)
class ScenarioConfig:
    """Synthetic measurement protocol.

    ``meter_class`` is in percent (3 sigma = class/100 x nominal).
    ``unbalance_target`` is the horizon-average unbalance the per-phase load
    scaling is tuned to (default: close to balance); ``None`` keeps the
    nominal allocation.
    """

    T: int = 2160
    pf_min: float = 0.9
    pf_max: float = 1.0
    meter_class: float = 0.0
    half_width: float = 0.5
    unbalance_target: float = 0.035
    rng_seed: int = 0
    noise_p: bool = True
    noise_q: bool = True
    noise_v: bool = True
    jitter: float = 0.08
    shift_hours: float = 1.0
    mix_spread: float = 0.05
    source_vmag: float = 1.02
    source_swing: float = 0.01

    def __post_init__(self):
        if self.meter_class not in METER_CLASSES:
            raise ValueError(f"meter_class must be one of {METER_CLASSES}")
        if not 0 < self.pf_min <= self.pf_max <= 1:
            raise ValueError("need 0 < pf_min <= pf_max <= 1")
        if self.T < 2:
            raise ValueError("T must be at least 2")


# ---------------------------------------------------------------- Newton oracle


def bus_admittance(model, w):
    """Full complex bus admittance ``(3(N+1), 3(N+1))``, source first."""
    R, X = line_matrices(w)
    idx = {n: i for i, n in enumerate(model.nodes)}
    size = 3 * len(model.nodes)
    ybus = np.zeros((size, size), dtype=complex)
    for li, ln in enumerate(model.lines):
        y = np.linalg.inv(R[li] + 1j * X[li])
        a, b = 3 * idx[ln.from_node], 3 * idx[ln.to_node]
        ybus[a : a + 3, a : a + 3] += y
        ybus[b : b + 3, b : b + 3] += y
        ybus[a : a + 3, b : b + 3] -= y
        ybus[b : b + 3, a : a + 3] -= y
    return ybus


def oracle_mismatch(ybus, u, u0, s):
    """``s - u * conj(I)`` on the non-source nodes; ``u``: ``(B, 3N)``."""
    full = np.concatenate([u0, u], axis=1)
    cur = full @ ybus[3:].T
    return s - u * np.conj(cur)


def mismatch_jacobian(ybus, u, u0):
    """Real Jacobian of ``u * conj(I)`` w.r.t. ``[Re u, Im u]``, shape ``(B, 6N, 6N)``."""
    yss = ybus[3:, 3:]
    diag = np.arange(u.shape[1])
    cur = np.concatenate([u0, u], axis=1) @ ybus[3:].T
    dre = u[:, :, None] * np.conj(yss)[None]
    dim = -1j * dre
    dre[:, diag, diag] += np.conj(cur)
    dim[:, diag, diag] += 1j * np.conj(cur)
    return np.block([[dre.real, dim.real], [dre.imag, dim.imag]])


def newton_oracle(model, w, s, u0, tol=1e-10, max_iter=50, max_halvings=10):
    """Solve the nodal mismatch equations for one instant or a batch.

    ``s``: ``(N, 3)`` or ``(B, N, 3)`` injections, ``u0`` the source phasors.
    Each Newton step is halved (up to ``max_halvings`` times) while it
    increases the mismatch norm.  Once below ``tol`` an instant keeps
    iterating until the mismatch stops shrinking, which in practice leaves it
    at round-off.  Returns voltages shaped like ``s``.
    """
    s = np.asarray(s, dtype=complex)
    single = s.ndim == 2
    if single:
        s, u0 = s[None], np.asarray(u0)[None]
    u0 = np.asarray(u0, dtype=complex)
    b, n = s.shape[0], s.shape[1]
    ybus = bus_admittance(model, w)
    sf = s.reshape(b, 3 * n)
    u = np.broadcast_to(np.tile(FLAT_START, n), (b, 3 * n)).astype(complex)
    mis = oracle_mismatch(ybus, u, u0, sf)
    norm = np.linalg.norm(mis, axis=1)
    active = np.ones(b, dtype=bool)
    for _ in range(max_iter):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        ua, ma = u[act], mis[act]
        jac = mismatch_jacobian(ybus, ua, u0[act])
        rhs = np.concatenate([ma.real, ma.imag], axis=1)
        try:
            step = np.linalg.solve(jac, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise OracleNotConverged("singular Newton Jacobian") from None
        du = step[:, : 3 * n] + 1j * step[:, 3 * n :]
        lam = np.ones(act.size)
        old = norm[act]
        for _h in range(max_halvings + 1):
            trial = ua + lam[:, None] * du
            tm = oracle_mismatch(ybus, trial, u0[act], sf[act])
            tn = np.linalg.norm(tm, axis=1)
            worse = tn > old
            if not np.any(worse) or _h == max_halvings:
                break
            lam = np.where(worse, lam / 2, lam)
        better = tn < old
        u[act[better]] = trial[better]
        mis[act[better]] = tm[better]
        norm[act[better]] = tn[better]
        small = np.max(np.abs(mis[act]), axis=1) < tol
        # stop once converged and the last step no longer halves the residual
        stalled = ~better | (tn > 0.5 * old)
        active[act[small & stalled]] = False
        if np.any(~small & ~better):
            break  # an unconverged instant cannot make progress
    worst = np.max(np.abs(mis), axis=1)
    if np.any(worst >= tol):
        k = int(np.flatnonzero(worst >= tol)[0])
        raise OracleNotConverged(f"Newton mismatch {worst[k]:.3g} above {tol:g}", t=k)
    u = u.reshape(b, n, 3)
    return u[0] if single else u


def source_currents(model, w, u, u0):
    """Complex phase currents leaving the source node, ``(B, 3)``."""
    ybus = bus_admittance(model, w)
    full = np.concatenate([u0, u.reshape(u.shape[0], -1)], axis=1)
    return full @ ybus[:3].T


def unbalance_level(currents):
    """Horizon average of ``sum_i |I_i - I_m| / (3 I_m)`` over phase current magnitudes.

    ``currents``: ``(T, 3)`` magnitudes (or complex currents).
    """
    mag = np.abs(np.atleast_2d(currents))
    mean = mag.mean(axis=1)
    if np.any(mean <= 0):
        raise ZeroCurrent("mean phase current is zero at some instant")
    u = np.sum(np.abs(mag - mean[:, None]), axis=1) / (3 * mean)
    return float(np.mean(u))


# ---------------------------------------------------------------- load shapes


def load_shapes(n_meters, n_inst, rng, jitter=0.15, shift_hours=2.0, mix_spread=0.2):
    """Per-meter normalised hourly profiles with peak 1, shape ``(n_inst, n_meters)``.

    Diurnal double hump plus a weekend dip, an AR(1) jitter term and a random
    per-meter phase shift so meters are not perfectly correlated.
    """
    hours = np.arange(n_inst)
    shift = rng.uniform(-shift_hours, shift_hours, n_meters)
    h = (hours[:, None] + shift[None, :]) % 24
    morning = np.exp(-0.5 * ((h - 8.0) / 2.0) ** 2)
    evening = np.exp(-0.5 * ((h - 19.0) / 2.5) ** 2)
    mix = rng.uniform(0.5 - mix_spread, 0.5 + mix_spread, n_meters)
    daily = 0.35 + mix * morning + (1 - mix) * evening
    day = (hours // 24) % 7
    weekly = np.where(day[:, None] >= 5, rng.uniform(0.8, 0.95, n_meters), 1.0)
    noise = np.empty((n_inst, n_meters))
    noise[0] = rng.standard_normal(n_meters)
    eps = rng.standard_normal((n_inst, n_meters))
    for t in range(1, n_inst):
        noise[t] = 0.7 * noise[t - 1] + np.sqrt(1 - 0.49) * eps[t]
    shape = daily * weekly * np.clip(1.0 + jitter * noise, 0.3, None)
    return shape / shape.max(axis=0)


def _phase_weights(model):
    """``(M, 3)`` phase shares of each meter's power."""
    mat = injection_matrix(model)
    n = model.n_state
    return mat.reshape(n, 3, -1).sum(axis=0).T


def _scaled_peaks(model, nominal_kw, lam):
    """Per-meter peaks after scaling each phase by ``1 + lam c_i``.

    ``c_i = 1 - P_i / mean(P)`` from the nominal per-phase totals, so
    ``lam = 1`` (to first order) equalises the phases, ``lam = 0`` keeps the
    nominal allocation and negative ``lam`` exaggerates its imbalance.
    """
    share = _phase_weights(model)
    totals = share.T @ nominal_kw
    c = 1.0 - totals / totals.mean()
    return nominal_kw * (share @ (1.0 + lam * c))


# ---------------------------------------------------------------- scenario


def perturb_parameters(w_true, half_width, seed):
    """``w_true * U(1 - h, 1 + h)`` elementwise, seeded."""
    if not 0 <= half_width < 1:
        raise ValueError("half_width must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    w_true = np.asarray(w_true, dtype=float)
    return w_true * rng.uniform(1 - half_width, 1 + half_width, w_true.shape)


def _source_series(n_inst, cfg, rng):
    hours = np.arange(n_inst)
    base = cfg.source_vmag + cfg.source_swing * np.sin(2 * np.pi * (hours - 6) / 24)
    vmag = base[:, None] * (1 + 0.002 * rng.standard_normal((n_inst, 3)))
    ab = 120.0 + 0.05 * rng.standard_normal(n_inst)
    ac = -120.0 + 0.05 * rng.standard_normal(n_inst)
    return source_phasors(vmag, ab, ac)


def _simulate(model, w, p, q, u0):
    s = -(p + 1j * q) @ injection_matrix(model).T
    s = s.reshape(p.shape[0], model.n_state, 3)
    return newton_oracle(model, w, s, u0)


@dataclass
class Scenario:
    data: TimeSeriesSet
    unbalance: float
    lam: float = 0.0
    peaks_kw: np.ndarray = field(default=None)


def generate_scenario(model, w_true, nominal_kw, cfg=ScenarioConfig()):
    """Generate a full synthetic measurement set at parameters ``w_true``.

    ``nominal_kw`` holds the peak real power of each meter.  Streams for load
    shapes, power factors, source voltage and each noise quantity come from
    independent children of ``cfg.rng_seed``.
    """
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(6)
    r_shape, r_pf, r_src, r_p, r_q, r_v = (np.random.default_rng(s) for s in seeds)
    n_inst = cfg.T + 1
    m = model.n_meters
    shape = load_shapes(m, n_inst, r_shape, cfg.jitter, cfg.shift_hours, cfg.mix_spread)
    pf = r_pf.uniform(cfg.pf_min, cfg.pf_max, (n_inst, m))
    u0 = _source_series(n_inst, cfg, r_src)
    w_true = np.asarray(w_true, dtype=float)
    nominal_kw = np.asarray(nominal_kw, dtype=float)

    def build(lam):
        peaks = _scaled_peaks(model, nominal_kw, lam)
        p = shape * peaks / model.s_base
        q = p * np.tan(np.arccos(pf))
        return peaks, p, q

    lam = 0.0
    if cfg.unbalance_target is not None:
        lam = _tune_unbalance(model, w_true, build, u0, cfg.unbalance_target)
    peaks, p, q = build(lam)
    u = _simulate(model, w_true, p, q, u0)
    level = unbalance_level(source_currents(model, w_true, u, u0))
    v_clean = MeterMap.from_model(model).outputs(u)

    nom_s = np.max(np.hypot(p, q), axis=0)
    two_phase = np.array([len(ld.measured_phases) == 2 for ld in model.loads])
    # line-to-line readings sit near sqrt(3) pu
    nom_v = np.where(two_phase, np.sqrt(3.0), 1.0)
    frac = cfg.meter_class / 100.0 / 3.0
    if cfg.meter_class > 0:
        p_n = p + (r_p.standard_normal(p.shape) * frac * nom_s if cfg.noise_p else 0.0)
        q_n = q + (r_q.standard_normal(q.shape) * frac * nom_s if cfg.noise_q else 0.0)
        v_n = v_clean + (r_v.standard_normal(v_clean.shape) * frac * nom_v if cfg.noise_v else 0.0)
    else:
        p_n, q_n, v_n = p.copy(), q.copy(), v_clean.copy()
    data = TimeSeriesSet(
        p=p_n, q=q_n, v=v_n, source=u0,
        meter_ids=tuple(ld.meter_id for ld in model.loads),
        w_true=w_true.copy(), v_clean=v_clean, p_clean=p, q_clean=q,
        meta={"meter_class": cfg.meter_class, "rng_seed": cfg.rng_seed, "unbalance": level, "lam": lam},
    )
    return Scenario(data, level, lam, peaks)


def _tune_unbalance(model, w, build, u0, target, n_probe=360, tol=0.05):
    """Phase-shift factor whose unbalance on a probe subset is within ``tol`` of ``target``.

    A coarse scan over ``lam`` finds the bracket closest to zero, then
    bisection refines it.
    """
    probe = np.linspace(0, u0.shape[0] - 1, n_probe).astype(int)

    def level(lam):
        _, p, q = build(lam)
        u = _simulate(model, w, p[probe], q[probe], u0[probe])
        return unbalance_level(source_currents(model, w, u, u0[probe])) - target

    grid = np.linspace(-6.0, 3.0, 19)
    vals = np.array([level(g) for g in grid])
    brackets = [i for i in range(len(grid) - 1) if vals[i] * vals[i + 1] <= 0]
    if not brackets:
        raise ValueError(f"unbalance target {target} not reachable by phase scaling")
    # prefer the bracket nearest the balancing point lam = 1
    i = min(brackets, key=lambda k: min(abs(grid[k] - 1), abs(grid[k + 1] - 1)))
    a, b, fa = grid[i], grid[i + 1], vals[i]
    for _ in range(40):
        mid = 0.5 * (a + b)
        fm = level(mid)
        if abs(fm) <= tol * target:
            return float(mid)
        if fm * fa > 0:
            a, fa = mid, fm
        else:
            b = mid
    return float(0.5 * (a + b))
