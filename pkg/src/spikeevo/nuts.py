"""No-U-turn sampler with multinomial trajectory sampling and windowed
warmup adaptation (dual-averaging step size plus metric estimation),
following the scheme popularised by Stan.  The mass matrix is pluggable;
see :mod:`spikeevo.metric`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .metric import DiagonalMetric

logger = logging.getLogger(__name__)


@dataclass
class _End:
    """Phase-space state with cached velocity ``v = M^{-1} p`` and
    ``mg = M^{-1} grad``, so each leapfrog step needs a single solve."""

    q: np.ndarray
    p: np.ndarray
    v: np.ndarray
    grad: np.ndarray
    mg: np.ndarray
    logp: float


@dataclass
class _Subtree:
    valid: bool
    divergent: bool
    end: _End | None = None
    q_prop: np.ndarray | None = None
    logp_prop: float = 0.0
    grad_prop: np.ndarray | None = None
    log_w: float = -math.inf
    rho: np.ndarray | None = None
    p_beg: np.ndarray | None = None
    p_end: np.ndarray | None = None
    ps_beg: np.ndarray | None = None
    ps_end: np.ndarray | None = None


def _no_uturn(ps_a, ps_b, rho) -> bool:
    return float(ps_a @ rho) > 0 and float(ps_b @ rho) > 0


class DualAveraging:
    """Step-size adaptation towards a target mean acceptance statistic."""

    def __init__(self, step_size: float, target: float = 0.8, gamma: float = 0.05,
                 kappa: float = 0.75, t0: float = 10.0):
        self.target, self.gamma, self.kappa, self.t0 = target, gamma, kappa, t0
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10 * step_size)
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.counter = 0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1 - x_eta) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def warmup_windows(n_warmup: int, init_buffer: int = 75, term_buffer: int = 50,
                   base_window: int = 25) -> list:
    """End iterations (exclusive) of the metric-estimation windows.

    Fast initial and terminal buffers adapt only the step size; the slow
    windows in between double in length.  Short warmups shrink the
    buffers to 15% / 10% of the warmup.
    """
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    slow_end = n_warmup - term_buffer
    while start < slow_end:
        end = start + size
        # absorb a remainder too short for a doubled window
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append((start, end))
        start, size = end, 2 * size
    return ends


class NUTS:
    """One chain of the sampler.

    ``target(q)`` must return ``(log_density, gradient)``; non-finite
    values are treated as divergent states.  ``metric`` defaults to an
    adapted diagonal mass matrix.  ``moves`` is an optional list of extra
    target-preserving kernels applied after every transition; each offers
    ``step(q, logp, rng, adapt) -> (q, logp, changed)`` and ``update(draws)``,
    the latter called with each completed warmup window.
    """

    def __init__(self, target, dim: int, rng: np.random.Generator, max_depth: int = 10,
                 max_delta_h: float = 1000.0, metric=None, moves=None):
        self.target = target
        self.dim = dim
        self.rng = rng
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h
        self.metric = metric if metric is not None else DiagonalMetric(dim)
        self.moves = list(moves or [])
        self.step_size = 1.0
        self._n_leapfrog = 0
        self._sum_metro = 0.0

    # ----------------------------------------------------------- dynamics
    def _eval(self, q):
        logp, grad = self.target(q)
        if not np.isfinite(logp) or not np.all(np.isfinite(grad)):
            return -math.inf, grad
        return float(logp), grad

    def _start(self, q, p, v, logp, grad) -> _End:
        return _End(q, p, v, grad, self.metric.solve(grad), logp)

    def _leapfrog(self, end: _End, step: float) -> _End:
        p = end.p + 0.5 * step * end.grad
        v = end.v + 0.5 * step * end.mg
        q = end.q + step * v
        logp, grad = self._eval(q)
        if not math.isfinite(logp):
            return _End(q, p, v, grad, grad, logp)
        mg = self.metric.solve(grad)
        return _End(q, p + 0.5 * step * grad, v + 0.5 * step * mg, grad, mg, logp)

    def _hamiltonian(self, end: _End) -> float:
        if not math.isfinite(end.logp):
            return math.inf
        # a runaway trajectory can overflow the kinetic term; the resulting
        # inf/nan energy is then scored as a divergence
        with np.errstate(over="ignore", invalid="ignore"):
            return -end.logp + 0.5 * float(end.p @ end.v)

    def _build(self, depth: int, start: _End, direction: int, H0: float) -> _Subtree:
        if depth == 0:
            end = self._leapfrog(start, direction * self.step_size)
            self._n_leapfrog += 1
            h = self._hamiltonian(end)
            if math.isnan(h):
                h = math.inf
            self._sum_metro += 1.0 if H0 - h > 0 else math.exp(H0 - h)
            if h - H0 > self.max_delta_h:
                return _Subtree(valid=False, divergent=True)
            ps = end.v
            return _Subtree(True, False, end, end.q, end.logp, end.grad, H0 - h,
                            end.p.copy(), end.p, end.p, ps, ps)
        left = self._build(depth - 1, start, direction, H0)
        if not left.valid:
            return left
        right = self._build(depth - 1, left.end, direction, H0)
        if not right.valid:
            return right
        log_w = np.logaddexp(left.log_w, right.log_w)
        if self.rng.uniform() < math.exp(right.log_w - log_w):
            prop = (right.q_prop, right.logp_prop, right.grad_prop)
        else:
            prop = (left.q_prop, left.logp_prop, left.grad_prop)
        rho = left.rho + right.rho
        persist = (_no_uturn(left.ps_beg, right.ps_end, rho)
                   and _no_uturn(left.ps_beg, right.ps_beg, left.rho + right.p_beg)
                   and _no_uturn(left.ps_end, right.ps_end, right.rho + left.p_end))
        return _Subtree(persist, False, right.end, *prop, log_w, rho,
                        left.p_beg, right.p_end, left.ps_beg, right.ps_end)

    def transition(self, q, logp, grad):
        """One NUTS iteration from ``q``; returns the new state and stats."""
        self._n_leapfrog = 0
        self._sum_metro = 0.0
        p0, v0 = self.metric.sample(self.rng)
        start = self._start(q, p0, v0, logp, grad)
        H0 = self._hamiltonian(start)
        bck = fwd = start
        ps_bck = ps_fwd = v0
        p_bck = p_fwd = p0
        rho = p0.copy()
        log_w = 0.0
        sample = (q, logp, grad)
        depth = 0
        divergent = False
        while depth < self.max_depth:
            direction = 1 if self.rng.uniform() > 0.5 else -1
            sub = self._build(depth, fwd if direction > 0 else bck, direction, H0)
            if not sub.valid:
                divergent = sub.divergent
                break
            depth += 1
            if sub.log_w > log_w or self.rng.uniform() < math.exp(sub.log_w - log_w):
                sample = (sub.q_prop, sub.logp_prop, sub.grad_prop)
            log_w = np.logaddexp(log_w, sub.log_w)
            rho_old = rho
            rho = rho_old + sub.rho
            if direction > 0:
                persist = (_no_uturn(ps_bck, sub.ps_end, rho)
                           and _no_uturn(ps_bck, sub.ps_beg, rho_old + sub.p_beg)
                           and _no_uturn(ps_fwd, sub.ps_end, sub.rho + p_fwd))
                fwd, ps_fwd, p_fwd = sub.end, sub.ps_end, sub.p_end
            else:
                persist = (_no_uturn(sub.ps_end, ps_fwd, rho)
                           and _no_uturn(sub.ps_end, ps_bck, sub.rho + p_bck)
                           and _no_uturn(sub.ps_beg, ps_fwd, rho_old + sub.p_beg))
                bck, ps_bck, p_bck = sub.end, sub.ps_end, sub.p_end
            if not persist:
                break
        stats = {
            "accept_stat": self._sum_metro / max(self._n_leapfrog, 1),
            "tree_depth": depth,
            "n_leapfrog": self._n_leapfrog,
            "divergent": divergent,
            "step_size": self.step_size,
            "energy": H0,
            "lp": sample[1],
        }
        return sample, stats

    # ----------------------------------------------------------- warmup
    def init_step_size(self, q, logp, grad) -> None:
        """Double or halve the step size until a single leapfrog step
        crosses an acceptance probability of 0.8."""
        step = self.step_size
        direction = 0
        for _ in range(100):
            p, v = self.metric.sample(self.rng)
            start = self._start(q, p, v, logp, grad)
            H0 = self._hamiltonian(start)
            h = self._hamiltonian(self._leapfrog(start, step))
            delta = H0 - h if math.isfinite(h) else -math.inf
            new_dir = 1 if delta > math.log(0.8) else -1
            if direction == 0:
                direction = new_dir
            if new_dir != direction:
                break
            step = step * 2.0 if direction > 0 else step * 0.5
            if step > 1e7 or step < 1e-12:
                break
        self.step_size = step

    def sample(self, q0, n_iter: int, n_warmup: int, target_accept: float = 0.8,
               callback=None):
        """Run warmup then sampling; yields ``(q, stats)`` for kept draws.

        ``callback(iteration, stats)`` is called on every iteration.
        """
        logp, grad = self._eval(np.asarray(q0, dtype=float))
        if not math.isfinite(logp):
            raise FloatingPointError("log density is not finite at the initial point")
        q = np.asarray(q0, dtype=float)
        self.metric.init(q)
        self.init_step_size(q, logp, grad)
        adapt = DualAveraging(self.step_size, target_accept)
        windows = warmup_windows(n_warmup)
        # early re-linearization points of state-dependent metrics, all
        # inside the initial fast buffer
        first_window = windows[0][0] if windows else 0
        refresh_at = {2 ** k - 2 for k in range(2, 12) if 2 ** k - 2 < first_window}
        window_iter = iter(windows)
        current = next(window_iter, None)
        buf = []
        for it in range(n_iter):
            (q, logp, grad), stats = self.transition(q, logp, grad)
            stats["warmup"] = it < n_warmup
            if self.moves:
                changed = False
                for move in self.moves:
                    q, logp, c = move.step(q, logp, self.rng, it < n_warmup)
                    changed = changed or c
                if changed:
                    logp, grad = self._eval(q)
                    stats["lp"] = logp
            if it < n_warmup:
                self.step_size = adapt.update(stats["accept_stat"])
                if it in refresh_at and self.metric.refresh(q):
                    self.init_step_size(q, logp, grad)
                    adapt.restart(self.step_size)
                if current is not None and current[0] <= it < current[1]:
                    buf.append(q)
                if current is not None and it == current[1] - 1:
                    self.metric.update(np.asarray(buf))
                    for move in self.moves:
                        move.update(np.asarray(buf))
                    buf = []
                    current = next(window_iter, None)
                    self.init_step_size(q, logp, grad)
                    adapt.restart(self.step_size)
                if it == n_warmup - 1:
                    self.step_size = adapt.final
            if callback is not None:
                callback(it, stats)
            if it >= n_warmup:
                yield q, stats
