"""Hamiltonian Monte Carlo with No-U-Turn trajectories, plus a plain
random-walk Metropolis kernel.

The NUTS variant uses multinomial sampling within trajectories and biased
progressive sampling across tree doublings, dual-averaging step-size
adaptation during warmup only, and a fixed identity mass matrix.  Both
kernels carry an auxiliary output channel: the target returns an ``aux``
array alongside the density (and gradient), and the row recorded for each
retained sample is the aux of whichever point the kernel actually kept, so
rejections repeat the previous row.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError

DIVERGENCE_THRESHOLD = 1000.0


class DegenerateTargetError(RuntimeError):
    """Step-size search ran away; the target density looks improper."""


@dataclass
class SamplerConfig:
    n_warmup: int
    n_samples: int
    init: np.ndarray
    seed: int = 0
    target_accept: float = 0.8
    max_tree_depth: int = 10
    thin: int = 1

    def __post_init__(self):
        if self.n_warmup <= 0 or self.n_samples <= 0:
            raise ValueError("warmup and sample counts must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        self.init = np.asarray(self.init, dtype=float)
        if not np.all(np.isfinite(self.init)):
            raise ValueError("init must be finite")


@dataclass
class ChainResult:
    samples: np.ndarray
    log_densities: np.ndarray
    accept_stats: np.ndarray
    step_size_trace: np.ndarray
    divergence_count: int
    aux_samples: np.ndarray | None = None
    wall_seconds: float = 0.0

    @property
    def step_size_final(self):
        return float(self.step_size_trace[-1])


class DualAveraging:
    """Hoffman-Gelman step-size adaptation toward a target acceptance.

    Constants gamma=0.05, t0=10, kappa=0.75; the averaged iterate is the
    value frozen after warmup.
    """

    def __init__(self, initial_step, target_accept=0.8,
                 gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * initial_step)
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.log_step = math.log(initial_step)
        self.log_step_avg = math.log(initial_step)
        self.h_bar = 0.0
        self.t = 0

    def step(self, accept_prob):
        """Consume one acceptance statistic; returns the next step size."""
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept_prob)
        self.log_step = self.mu - math.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** (-self.kappa)
        self.log_step_avg = w * self.log_step + (1.0 - w) * self.log_step_avg
        return math.exp(self.log_step)

    def adapted_step(self):
        return math.exp(self.log_step_avg)


def leapfrog(logp_fn, theta, r, grad, eps):
    """One leapfrog step of the Hamiltonian dynamics under unit mass."""
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * r_half
    lp, g, aux = logp_fn(theta_new)
    r_new = r_half + 0.5 * eps * g
    return theta_new, r_new, g, lp, aux


def find_reasonable_step(logp_fn, theta, lp, grad, rng):
    """Initial step size heuristic: double or halve until the one-step
    acceptance probability crosses 1/2."""
    eps = 1.0
    r0 = rng.standard_normal(theta.size)
    h0 = -lp + 0.5 * r0 @ r0

    def accept_prob(eps):
        try:
            _, r1, _, lp1, _ = leapfrog(logp_fn, theta, r0, grad, eps)
        except NonFiniteError:
            return 0.0
        h1 = -lp1 + 0.5 * r1 @ r1
        return math.exp(min(0.0, h0 - h1))

    p = accept_prob(eps)
    direction = 1.0 if p > 0.5 else -1.0
    for _ in range(100):
        if direction > 0 and p <= 0.5:
            return eps
        if direction < 0 and p >= 0.5:
            return eps
        eps *= 2.0 ** direction
        if eps > 1e7 or eps < 1e-12:
            raise DegenerateTargetError(
                "step-size search diverged; target density looks degenerate")
        p = accept_prob(eps)
    raise DegenerateTargetError("step-size search did not settle")


class _Point:
    __slots__ = ("theta", "r", "grad", "logp", "aux")

    def __init__(self, theta, r, grad, logp, aux):
        self.theta = theta
        self.r = r
        self.grad = grad
        self.logp = logp
        self.aux = aux


def _no_uturn(point_minus, point_plus):
    span = point_plus.theta - point_minus.theta
    return (span @ point_minus.r >= 0.0) and (span @ point_plus.r >= 0.0)


class _NutsTree:
    """Recursive trajectory builder for one NUTS transition."""

    def __init__(self, logp_fn, eps, h0, rng):
        self.logp_fn = logp_fn
        self.eps = eps
        self.h0 = h0
        self.rng = rng
        self.alpha_sum = 0.0
        self.n_alpha = 0
        self.divergent = False

    def build(self, point, direction, depth):
        """Returns (minus, plus, proposal, log_weight, keep_going)."""
        if depth == 0:
            try:
                theta, r, g, lp, aux = leapfrog(
                    self.logp_fn, point.theta, point.r, point.grad,
                    direction * self.eps)
                h = -lp + 0.5 * r @ r
            except NonFiniteError:
                h = math.inf
            self.n_alpha += 1
            if math.isfinite(h):
                self.alpha_sum += math.exp(min(0.0, self.h0 - h))
            if not math.isfinite(h) or h - self.h0 > DIVERGENCE_THRESHOLD:
                self.divergent = True
                return point, point, point, -math.inf, False
            leaf = _Point(theta, r, g, lp, aux)
            return leaf, leaf, leaf, -h, True
        minus, plus, proposal, logw, ok = self.build(point, direction, depth - 1)
        if not ok:
            return minus, plus, proposal, logw, False
        if direction < 0:
            minus, _, proposal2, logw2, ok2 = self.build(minus, direction, depth - 1)
        else:
            _, plus, proposal2, logw2, ok2 = self.build(plus, direction, depth - 1)
        total = np.logaddexp(logw, logw2)
        if ok2 and math.log(self.rng.uniform()) < logw2 - total:
            proposal = proposal2
        keep_going = ok2 and _no_uturn(minus, plus)
        return minus, plus, proposal, total, keep_going


def nuts_sample(logp, config, post_step=None):
    """No-U-Turn sampling of ``exp(logp)``.

    ``logp(theta)`` must return ``(log_density, gradient, aux)``; aux rides
    along with each retained draw.  Raises ``ValueError`` if the density is
    non-finite at the initial point.  Divergent trajectories (energy error
    beyond 1000) are counted and sampling continues.

    ``post_step``, when given, is called with the current position after
    every transition; if it returns True (meaning it changed the target,
    e.g. refreshed an inner-loop policy), the density and gradient at the
    current position are recomputed before the next trajectory.
    """
    import time
    rng = np.random.default_rng(config.seed)
    theta = config.init.copy()
    dim = theta.size
    try:
        lp, g, aux = logp(theta)
    except NonFiniteError as err:
        raise ValueError("log density non-finite at init") from err
    if not math.isfinite(lp):
        raise ValueError("log density non-finite at init")

    t_start = time.perf_counter()
    eps = find_reasonable_step(logp, theta, lp, g, rng)
    adapt = DualAveraging(eps, target_accept=config.target_accept)

    total_iters = config.n_warmup + config.n_samples * config.thin
    samples = np.empty((config.n_samples, dim))
    log_densities = np.empty(config.n_samples)
    accept_stats = np.empty(total_iters)
    step_trace = np.empty(total_iters)
    aux_rows = None
    divergences = 0
    kept = 0

    current = _Point(theta, np.zeros(dim), g, lp, aux)
    for it in range(total_iters):
        r0 = rng.standard_normal(dim)
        h0 = -current.logp + 0.5 * r0 @ r0
        current = _Point(current.theta, r0, current.grad, current.logp,
                         current.aux)
        tree = _NutsTree(logp, eps, h0, rng)
        minus = plus = current
        selected = current
        log_weight = -h0
        for depth in range(config.max_tree_depth):
            direction = 1.0 if rng.uniform() < 0.5 else -1.0
            if direction < 0:
                minus, _, proposal, logw_new, ok = tree.build(minus, direction, depth)
            else:
                _, plus, proposal, logw_new, ok = tree.build(plus, direction, depth)
            if ok:
                # biased progressive sampling favours the new subtree
                if math.log(rng.uniform()) < logw_new - log_weight:
                    selected = proposal
            log_weight = np.logaddexp(log_weight, logw_new)
            if not ok or not _no_uturn(minus, plus):
                break
        current = selected
        if post_step is not None and post_step(current.theta):
            lp_new, g_new, aux_new = logp(current.theta)
            current = _Point(current.theta, current.r, g_new, lp_new, aux_new)
        accept_prob = tree.alpha_sum / max(tree.n_alpha, 1)
        accept_stats[it] = accept_prob
        step_trace[it] = eps
        if it < config.n_warmup:
            eps = adapt.step(accept_prob)
            if it == config.n_warmup - 1:
                eps = adapt.adapted_step()
        else:
            if tree.divergent:
                divergences += 1
            post = it - config.n_warmup
            if (post + 1) % config.thin == 0:
                samples[kept] = current.theta
                log_densities[kept] = current.logp
                if current.aux is not None:
                    if aux_rows is None:
                        aux_rows = np.empty((config.n_samples,
                                             np.size(current.aux)))
                    aux_rows[kept] = np.ravel(current.aux)
                kept += 1

    return ChainResult(samples=samples, log_densities=log_densities,
                       accept_stats=accept_stats, step_size_trace=step_trace,
                       divergence_count=divergences, aux_samples=aux_rows,
                       wall_seconds=time.perf_counter() - t_start)


def rw_metropolis(logp, proposal_scale, config):
    """Random-walk Metropolis with symmetric Gaussian jumps.

    ``logp(theta)`` must return ``(log_density, aux)``.
    """
    import time
    if proposal_scale <= 0:
        raise ValueError("proposal_scale must be positive")
    rng = np.random.default_rng(config.seed)
    theta = config.init.copy()
    dim = theta.size
    try:
        lp, aux = logp(theta)
    except NonFiniteError as err:
        raise ValueError("log density non-finite at init") from err
    if not math.isfinite(lp):
        raise ValueError("log density non-finite at init")

    t_start = time.perf_counter()
    total_iters = config.n_warmup + config.n_samples * config.thin
    samples = np.empty((config.n_samples, dim))
    log_densities = np.empty(config.n_samples)
    accept_stats = np.empty(total_iters)
    aux_rows = None
    kept = 0
    for it in range(total_iters):
        proposal = theta + proposal_scale * rng.standard_normal(dim)
        try:
            lp2, aux2 = logp(proposal)
        except NonFiniteError:
            lp2, aux2 = -math.inf, aux
        accept = math.log(rng.uniform()) < lp2 - lp
        if accept:
            theta, lp, aux = proposal, lp2, aux2
        accept_stats[it] = 1.0 if accept else 0.0
        if it >= config.n_warmup and (it - config.n_warmup + 1) % config.thin == 0:
            samples[kept] = theta
            log_densities[kept] = lp
            if aux is not None:
                if aux_rows is None:
                    aux_rows = np.empty((config.n_samples, np.size(aux)))
                aux_rows[kept] = np.ravel(aux)
            kept += 1

    return ChainResult(samples=samples, log_densities=log_densities,
                       accept_stats=accept_stats,
                       step_size_trace=np.full(total_iters, proposal_scale),
                       divergence_count=0, aux_samples=aux_rows,
                       wall_seconds=time.perf_counter() - t_start)
