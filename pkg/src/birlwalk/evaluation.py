"""Statistical evaluation: two-sample KS tests, held-out predictive metrics,
brute-force posterior oracles for tiny instances, and joint-posterior
structure reports."""

from dataclasses import dataclass
import itertools

import numpy as np

from .finite_posterior import normal_log_density, log_likelihood
from .mdp import value_iteration


def _kolmogorov_sf(lam):
    """Survival function of the Kolmogorov distribution."""
    if lam < 0.18:
        return 1.0
    total = 0.0
    for j in range(1, 101):
        term = 2.0 * (-1.0) ** (j - 1) * np.exp(-2.0 * j * j * lam * lam)
        total += term
        if abs(term) < 1e-12:
            break
    return float(min(max(total, 0.0), 1.0))


def ks_two_sample(x, y):
    """Two-sample Kolmogorov-Smirnov test.

    Returns ``(statistic, p_value)``: the sup distance between the two
    empirical CDFs, and the asymptotic Kolmogorov p-value evaluated with
    the effective-sample-size correction sqrt(n_eff) + 0.12 + 0.11/sqrt(n_eff).
    """
    x = np.sort(np.asarray(x, dtype=float).ravel())
    y = np.sort(np.asarray(y, dtype=float).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be nonempty")
    grid = np.concatenate([x, y])
    cdf_x = np.searchsorted(x, grid, side="right") / x.size
    cdf_y = np.searchsorted(y, grid, side="right") / y.size
    stat = float(np.max(np.abs(cdf_x - cdf_y)))
    n_eff = x.size * y.size / (x.size + y.size)
    lam = (np.sqrt(n_eff) + 0.12 + 0.11 / np.sqrt(n_eff)) * stat
    return stat, _kolmogorov_sf(lam)


def heldout_metrics(theta_samples, test_states, test_actions, q_fn, alpha):
    """Posterior-predictive action metrics on held-out demonstrations.

    The predictive distribution averages each sample's Boltzmann action
    probabilities; returns ``(mean log-likelihood per step, mean predictive
    entropy)``.  ``q_fn(theta, states)`` maps a parameter vector to the
    (n_test, n_actions) Q matrix at the test states.
    """
    theta_samples = np.atleast_2d(np.asarray(theta_samples, dtype=float))
    test_actions = np.asarray(test_actions, dtype=int)
    if len(test_actions) == 0:
        raise ValueError("held-out demonstration set is empty")
    predictive = None
    for theta in theta_samples:
        z = alpha * np.atleast_2d(q_fn(theta, test_states))
        z = z - z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        predictive = probs if predictive is None else predictive + probs
    predictive /= theta_samples.shape[0]
    chosen = predictive[np.arange(len(test_actions)), test_actions]
    mean_loglik = float(np.mean(np.log(chosen)))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(predictive > 0, predictive * np.log(predictive), 0.0)
    mean_entropy = float(np.mean(-plogp.sum(axis=1)))
    return mean_loglik, mean_entropy


@dataclass(frozen=True)
class GridPosterior:
    """Normalized density on a regular grid; density * cell_volume sums to 1."""

    axes: tuple
    density: np.ndarray
    cell_volume: float

    def marginal(self, dim):
        other = tuple(i for i in range(self.density.ndim) if i != dim)
        marg = self.density.sum(axis=other) if other else self.density.copy()
        spacing = self.axes[dim][1] - self.axes[dim][0]
        marg = marg * self.cell_volume / spacing
        return self.axes[dim], marg


def brute_force_posterior(spec, bounds, resolution=200, tol=1e-9):
    """Exhaustive reward posterior on a grid, for <= 3 reward dimensions.

    Evaluates prior x likelihood at every grid point via a forward planning
    solve and normalizes by Riemann quadrature.  ``bounds`` is one (low,
    high) pair per reward dimension.
    """
    dims = len(bounds)
    if dims > 3:
        raise ValueError("grid oracle limited to 3 reward dimensions")
    if resolution < 50:
        raise ValueError("grid resolution must be at least 50 per dimension")
    axes = tuple(np.linspace(lo, hi, resolution) for lo, hi in bounds)
    spacings = [ax[1] - ax[0] for ax in axes]
    cell_volume = float(np.prod(spacings))
    mdp = spec.mdp
    log_density = np.empty([resolution] * dims)
    warm = None
    for idx in itertools.product(range(resolution), repeat=dims):
        r = np.array([axes[d][idx[d]] for d in range(dims)])
        if spec.value_space == "state_only":
            r_mat = np.repeat(r, mdp.n_actions).reshape(mdp.n_states,
                                                        mdp.n_actions)
        else:
            r_mat = r.reshape(mdp.n_states, mdp.n_actions)
        q = value_iteration(mdp, r_mat, tol=1e-10, q_init=warm)
        warm = q
        log_density[idx] = normal_log_density(r, spec.prior) \
            + log_likelihood(q, spec.demos, spec.alpha)
    log_density -= log_density.max()
    density = np.exp(log_density)
    density /= density.sum() * cell_volume
    return GridPosterior(axes=axes, density=density, cell_volume=cell_volume)


def marginal_tv_distance(samples, grid_posterior, dim, n_bins=30):
    """Total variation between a sample histogram and the grid marginal.

    Bins are unions of whole grid cells (no aliasing): the grid axis is
    split into ``n_bins`` contiguous groups and the samples are binned on
    the same edges.  Sample mass falling outside the grid counts fully
    toward the distance.
    """
    axis, marg = grid_posterior.marginal(dim)
    spacing = axis[1] - axis[0]
    cell_edges = np.concatenate([axis - spacing / 2, [axis[-1] + spacing / 2]])
    group = np.array_split(np.arange(len(axis)), n_bins)
    edges = np.array([cell_edges[g[0]] for g in group] + [cell_edges[-1]])
    samples = np.asarray(samples, dtype=float)
    hist, _ = np.histogram(samples, bins=edges)
    outside = np.sum((samples < edges[0]) | (samples > edges[-1]))
    sample_mass = hist / max(len(samples), 1)
    grid_mass = np.array([np.sum(marg[g]) * spacing for g in group])
    grid_mass /= grid_mass.sum()
    return float(0.5 * (np.abs(sample_mass - grid_mass).sum()
                        + outside / max(len(samples), 1)))


@dataclass(frozen=True)
class JointPosteriorReport:
    histograms: dict          # (i, j) -> (x_edges, y_edges, counts)
    correlations: np.ndarray
    n_bins: int


def joint_posterior_report(samples, n_bins=40):
    """Pairwise 2-D histograms and the Pearson correlation matrix."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    dim = samples.shape[1]
    if dim < 2:
        raise ValueError("need at least 2 reward dimensions")
    correlations = np.corrcoef(samples.T)
    histograms = {}
    for i in range(dim):
        for j in range(i + 1, dim):
            counts, x_edges, y_edges = np.histogram2d(
                samples[:, i], samples[:, j], bins=n_bins)
            histograms[(i, j)] = (x_edges, y_edges, counts)
    return JointPosteriorReport(histograms=histograms,
                                correlations=correlations, n_bins=n_bins)
