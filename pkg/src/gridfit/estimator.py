"""Projected mini-batch SGD with backtracking line search and a Gaussian prior.

The objective on a batch is ``J_w(T) = e_w(T) + gamma R(w)`` with
``R(w) = sigma_v^2/(T M) sum (w - mu)^2 / sigma_w^2``; ``T`` in ``R`` is the
full horizon, so batch objectives average to the full one.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NoProgress, SingularMatrix, SolverError, StepUnderflow, ZeroMagnitude
from .forward import DEFAULT_SOLVER, Problem, SolverConfig
from .forward import loss as batch_loss
from .gradengine import DEFAULT_BACKWARD, BackwardConfig, loss_and_gradient, sensitivity
from .netmodel import assemble_admittance

log = logging.getLogger(__name__)

# failures that make a trial point or a batch unusable, rather than a bug
_RECOVERABLE = (SolverError, SingularMatrix, ZeroMagnitude)


@dataclass(frozen=True)
class PriorModel:
    mu: np.ndarray
    sigma_w: np.ndarray
    gamma: float = 1.0
    sigma_v2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "sigma_w", np.asarray(self.sigma_w, dtype=float))
        if self.mu.shape != self.sigma_w.shape:
            raise ValueError("mu and sigma_w must have the same length")
        if np.any(self.sigma_w <= 0):
            raise ValueError("sigma_w must be positive elementwise")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.sigma_v2 < 0:
            raise ValueError("sigma_v2 must be non-negative")

    @classmethod
    def around(cls, w_initial, rel_std=0.5 / 3, gamma=1.0, sigma_v2=0.0):
        """Prior centred on ``w_initial`` with ``sigma_w = |w_initial| * rel_std``."""
        w_initial = np.asarray(w_initial, dtype=float)
        return cls(w_initial.copy(), np.abs(w_initial) * rel_std, gamma, sigma_v2)


@dataclass(frozen=True)
class BoundBox:
    w_min: np.ndarray
    w_max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w_min", np.asarray(self.w_min, dtype=float))
        object.__setattr__(self, "w_max", np.asarray(self.w_max, dtype=float))
        if self.w_min.shape != self.w_max.shape:
            raise ValueError("bounds must have the same length")
        if np.any(self.w_min > self.w_max):
            raise ValueError("w_min must not exceed w_max")

    @classmethod
    def around(cls, w_initial, lower=2 / 3, upper=2.0):
        """``[lower, upper] x w_initial`` per entry; ends are swapped for negative entries."""
        w_initial = np.asarray(w_initial, dtype=float)
        a, b = lower * w_initial, upper * w_initial
        return cls(np.minimum(a, b), np.maximum(a, b))

    def contains(self, w):
        return bool(np.all(w >= self.w_min) and np.all(w <= self.w_max))


@dataclass(frozen=True)
class EstimatorConfig:
    n_batch: int = 10
    n_patience: int = 10
    s_initial: float = 1000.0
    alpha: float = 0.3
    beta: float = 0.5
    eps_stop: float = 0.01
    rng_seed: int = 0
    max_epochs: int = 200
    fail_fraction: float = 0.1
    warm_start: bool = True
    solver: SolverConfig = DEFAULT_SOLVER
    backward: BackwardConfig = DEFAULT_BACKWARD

    def __post_init__(self):
        if not 0 < self.alpha < 1 or not 0 < self.beta < 1:
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.n_batch < 1 or self.n_patience < 1:
            raise ValueError("n_batch and n_patience must be at least 1")
        if not self.s_initial > 0:
            raise ValueError("s_initial must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class EpochRecord:
    epoch: int
    J_best: float
    J_full: float
    step_accept_rate: float
    mean_trials: float
    skipped: int
    wall_ms: float


@dataclass
class EstimationTrace:
    epochs: list = field(default_factory=list)
    w_best: np.ndarray = None
    J_best: float = np.inf
    stop_reason: str = ""
    sigma_v2: float = None

    @property
    def J_history(self):
        return np.array([r.J_best for r in self.epochs])

    @property
    def n_epochs(self):
        return len(self.epochs) - 1


# ---------------------------------------------------------------- pieces


def regularizer(w, prior, T, M):
    """``(R(w), dR/dw)`` for the Gaussian prior."""
    d = np.asarray(w, dtype=float) - prior.mu
    k = prior.sigma_v2 / (T * M)
    inv_var = 1.0 / prior.sigma_w**2
    return float(k * np.sum(d * d * inv_var)), 2.0 * k * d * inv_var


def estimate_sigma_v(e_full, T):
    """Meter-noise variance ``T/(T-1) e_w(T_full)`` for first-difference residuals."""
    if T < 2:
        raise ValueError("need T >= 2")
    if e_full < 0:
        raise ValueError("e_full must be non-negative")
    return T / (T - 1) * e_full


def cons_project(w, bounds):
    """Elementwise clamp into ``bounds``; ``None`` means unconstrained."""
    w = np.asarray(w, dtype=float)
    if bounds is None:
        return w.copy()
    return np.minimum(bounds.w_max, np.maximum(w, bounds.w_min))


@dataclass
class LineSearchResult:
    w: np.ndarray
    s: float
    J: float
    trials: int
    payload: object = None


def line_search(objective, w, grad, J_w, cfg, bounds=None):
    """Backtracking search along ``-grad`` with projection before every test.

    ``objective(w)`` returns ``J`` or ``(J, payload)`` for the batch; a trial
    that raises a recoverable solver error counts as a failed test.  Accepts
    the first ``CONS(w + s dw)`` with ``J <= J_w + alpha s grad . dw``.
    """
    dw = -np.asarray(grad, dtype=float)
    slope = float(np.dot(grad, dw))
    s = cfg.s_initial
    trials = 0
    while s >= 1e-16 * cfg.s_initial:
        temp = cons_project(w + s * dw, bounds)
        trials += 1
        try:
            out = objective(temp)
        except _RECOVERABLE as exc:
            log.debug("line-search trial at s=%g failed: %s", s, exc)
            out = np.inf
        J, payload = out if isinstance(out, tuple) else (out, None)
        if J <= J_w + cfg.alpha * s * slope:
            return LineSearchResult(temp, s, float(J), trials, payload)
        s *= cfg.beta
    raise StepUnderflow(f"no acceptable step down to s = {s / cfg.beta:g}")


def _batches(T, n_batch, rng):
    perm = rng.permutation(np.arange(1, T + 1))
    return [perm[i : i + n_batch] for i in range(0, T, n_batch)]


# ---------------------------------------------------------------- driver


class _Workspace:
    """Admittance caches and warm-start states shared by the loss evaluations."""

    def __init__(self, problem, cfg):
        self.problem = problem
        self.store = problem.flat_store() if cfg.warm_start else None

    def batch_loss(self, w, batch, cache=None, store=None):
        cache = assemble_admittance(self.problem.model, w) if cache is None else cache
        return batch_loss(self.problem, w, batch, cache, store), cache


def _full_objective(ws, w, prior, gamma):
    p = ws.problem
    e, _ = ws.batch_loss(w, np.arange(1, p.T + 1), store=ws.store)
    return e + gamma * regularizer(w, prior, p.T, p.M)[0], e


def sgd_estimate(data, model, w_initial, prior=None, bounds=None, cfg=EstimatorConfig(), callback=None):
    """Estimate line parameters by projected mini-batch SGD.

    ``prior`` of ``None`` (or ``gamma = 0``) drops the regulariser; ``bounds``
    of ``None`` skips the projection.  Returns ``(w_best, trace)``.
    """
    problem = data if isinstance(data, Problem) else Problem(model, data, cfg.solver)
    T, M = problem.T, problem.M
    w_iter = cons_project(np.asarray(w_initial, dtype=float), bounds)
    if bounds is not None and not np.array_equal(w_iter, np.asarray(w_initial, dtype=float)):
        raise ValueError("w_initial lies outside the bounds")
    gamma = 0.0 if prior is None else prior.gamma
    prior = prior if prior is not None else PriorModel(w_iter, np.ones_like(w_iter), 0.0)
    ws = _Workspace(problem, cfg)
    t0 = time.perf_counter()

    J0, _ = _full_objective(ws, w_iter, prior, gamma)
    trace = EstimationTrace(w_best=w_iter.copy(), J_best=J0)
    trace.epochs.append(EpochRecord(0, J0, J0, 0.0, 0.0, 0, (time.perf_counter() - t0) * 1e3))
    cache = assemble_admittance(model, w_iter)
    sens = sensitivity(model, w_iter, cache)
    total_batches = failures = 0
    n_epoch = 0
    while True:
        n_epoch += 1
        t_ep = time.perf_counter()
        rng = np.random.default_rng([cfg.rng_seed, n_epoch])
        accepted = first_try = trials = skipped = 0
        batches = _batches(T, cfg.n_batch, rng)
        for batch in batches:
            total_batches += 1
            try:
                res = loss_and_gradient(problem, w_iter, batch, cfg.backward, cache, sens, ws.store)
            except _RECOVERABLE as exc:
                log.info("epoch %d: batch skipped, gradient failed: %s", n_epoch, exc)
                failures += 1
                skipped += 1
                continue
            R, dR = regularizer(w_iter, prior, T, M)
            grad = res.grad + gamma * dR
            J_w = res.loss + gamma * R
            trial_store = None if ws.store is None else ws.store.copy()

            def objective(w_temp, batch=batch, trial_store=trial_store):
                if trial_store is not None:
                    trial_store[:] = ws.store
                e, c = ws.batch_loss(w_temp, batch, store=trial_store)
                return e + gamma * regularizer(w_temp, prior, T, M)[0], c

            try:
                ls = line_search(objective, w_iter, grad, J_w, cfg, bounds)
            except StepUnderflow as exc:
                log.info("epoch %d: batch skipped, %s", n_epoch, exc)
                skipped += 1
                continue
            trials += ls.trials
            accepted += 1
            first_try += ls.trials == 1
            if not np.array_equal(ls.w, w_iter):
                w_iter = ls.w
                cache = ls.payload
                sens = sensitivity(model, w_iter, cache)
                if trial_store is not None:
                    ws.store = trial_store
        if n_epoch == 1 and skipped == len(batches):
            raise NoProgress("every mini-batch of the first epoch failed")
        if failures > cfg.fail_fraction * total_batches:
            raise NoProgress(f"{failures} of {total_batches} mini-batches failed in the forward/backward pass")
        try:
            J_full, _ = _full_objective(ws, w_iter, prior, gamma)
        except _RECOVERABLE as exc:
            log.info("epoch %d: full-batch evaluation failed: %s", n_epoch, exc)
            J_full = np.inf
        if J_full < trace.J_best:
            trace.J_best, trace.w_best = J_full, w_iter.copy()
        rate = accepted / max(trials, 1)
        trace.epochs.append(
            EpochRecord(n_epoch, trace.J_best, J_full, rate, trials / max(accepted, 1), skipped,
                        (time.perf_counter() - t_ep) * 1e3)
        )
        if callback is not None:
            callback(trace)
        hist = trace.J_history
        if n_epoch > cfg.n_patience:
            ref = hist[n_epoch - cfg.n_patience]
            if ref <= 0 or 1.0 - hist[n_epoch] / ref < cfg.eps_stop:
                trace.stop_reason = "patience"
                break
        if n_epoch >= cfg.max_epochs:
            trace.stop_reason = "max_epochs"
            break
    return trace.w_best.copy(), trace


def full_loss(data, model, w, solver=DEFAULT_SOLVER):
    """``e_w(T_full)`` without the prior."""
    problem = data if isinstance(data, Problem) else Problem(model, data, solver)
    return batch_loss(problem, w, np.arange(1, problem.T + 1))


def two_stage_map(data, model, w_initial, bounds=None, cfg=EstimatorConfig(), prior=None, callback=None):
    """Stage 1 fits without the prior; its residual sets ``sigma_v^2`` for the stage-2 MAP fit.

    Stage 2 starts from the stage-1 estimate with the prior's ``gamma``
    (default 1) and ``sigma_v^2`` frozen.  Returns
    ``(w_best, (trace_1, trace_2))``.
    """
    problem = data if isinstance(data, Problem) else Problem(model, data, cfg.solver)
    prior = PriorModel.around(w_initial) if prior is None else prior
    w1, tr1 = sgd_estimate(problem, model, w_initial, None, bounds, cfg, callback)
    e_full = full_loss(problem, model, w1)
    sigma_v2 = estimate_sigma_v(e_full, problem.T)
    tr1.sigma_v2 = sigma_v2
    prior2 = replace(prior, sigma_v2=sigma_v2)
    w2, tr2 = sgd_estimate(problem, model, w1, prior2, bounds, cfg, callback)
    tr2.sigma_v2 = sigma_v2
    return w2, (tr1, tr2)
