"""MCMC convergence and efficiency diagnostics.

``r_hat`` is the classic split-chain potential scale reduction factor;
``ess`` is the autocorrelation-sum effective sample size with Geyer's
initial positive sequence truncation.
"""

import numpy as np


def _split_halves(chains):
    halves = []
    for chain in chains:
        chain = np.atleast_2d(np.asarray(chain, dtype=float))
        n = (chain.shape[0] // 2) * 2
        halves.append(chain[: n // 2])
        halves.append(chain[n // 2: n])
    return halves


def r_hat(chains):
    """Split-chain potential scale reduction factor, one value per dimension.

    Accepts a list of equally long (n, dim) sample matrices (a single chain
    is split in half).  Zero variance everywhere returns 1 by convention.
    """
    chains = [np.atleast_2d(np.asarray(c, dtype=float)) for c in chains]
    if len({c.shape for c in chains}) != 1:
        raise ValueError("chains must have identical shapes")
    if chains[0].shape[0] < 10:
        raise ValueError("chains must have length >= 10")
    halves = np.stack(_split_halves(chains))  # (m, L, dim)
    m, length, dim = halves.shape
    means = halves.mean(axis=1)
    within = halves.var(axis=1, ddof=1).mean(axis=0)
    between = length * means.var(axis=0, ddof=1)
    var_plus = (length - 1) / length * within + between / length
    out = np.ones(dim)
    nonzero = within > 0
    out[nonzero] = np.sqrt(var_plus[nonzero] / within[nonzero])
    out[~nonzero & (between > 0)] = np.inf
    return out


def _autocorrelation(x):
    """Autocorrelation function of a 1-d series via FFT.

    Returns None for (numerically) constant series.
    """
    n = len(x)
    scale = 1.0 + np.max(np.abs(x)) ** 2
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, n=size)
    acov = np.fft.irfft(f * np.conj(f), n=size)[:n].real / n
    if acov[0] <= 1e-14 * scale:
        return None
    return acov / acov[0]


def ess(chain):
    """Effective sample size per dimension of one (n, dim) chain.

    Sums autocorrelations over Geyer pairs, truncating at the first pair
    with a non-positive sum.  A constant dimension reports 1 by convention.
    """
    chain = np.atleast_2d(np.asarray(chain, dtype=float))
    n, dim = chain.shape
    if n < 10:
        raise ValueError("chain must have length >= 10")
    out = np.empty(dim)
    for j in range(dim):
        rho = _autocorrelation(chain[:, j])
        if rho is None:
            out[j] = 1.0
            continue
        pair_sum = 0.0
        k = 0
        while 2 * k + 1 < n:
            gamma = rho[2 * k] + rho[2 * k + 1]
            if gamma <= 0:
                break
            pair_sum += gamma
            k += 1
        tau = max(2.0 * pair_sum - 1.0, 1e-12)
        out[j] = min(n / tau, float(n) * 10)
    return out
