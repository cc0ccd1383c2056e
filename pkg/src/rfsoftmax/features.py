"""Randomized and explicit feature maps that linearize kernels.

Every map exposes ``input_dim``, ``dim`` (output size), ``transform(u)`` for a
single ``(d,)`` vector or a ``(k, d)`` batch, ``kernel(x, y)`` (the closed form
the map reproduces or estimates) and ``estimate_exp_kernel(x, y)`` (its
estimate of ``exp(tau x.y)`` on unit vectors).
"""

import math

import numpy as np


def _as_batch(u, d):
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    batch = u[None, :] if single else u
    if batch.ndim != 2 or batch.shape[1] != d:
        raise ValueError(f"expected input dimension {d}, got shape {u.shape}")
    return batch, single


def _rowdot(a, b):
    return np.einsum("ij,ij->i", np.atleast_2d(a), np.atleast_2d(b))


class FeatureMap:
    input_dim: int
    dim: int

    def transform(self, u):
        raise NotImplementedError

    def __call__(self, u):
        return self.transform(u)

    def approx_kernel(self, x, y):
        """``phi(x) . phi(y)`` row-wise for batches of pairs."""
        return _rowdot(self.transform(x), self.transform(y))

    def estimate_exp_kernel(self, x, y):
        return self.approx_kernel(x, y)


class RffMap(FeatureMap):
    """Random Fourier features for the Gaussian kernel ``exp(-nu ||x - y||^2 / 2)``.

    Frequencies are i.i.d. ``N(0, nu I)``; this is the spectral measure of the
    kernel above, which makes ``phi(x) . phi(y)`` an unbiased estimate of it.
    Output is ``[cos(W u), sin(W u)] / sqrt(D)`` so ``||phi(u)|| = 1``.

    ``precision="single"`` reduces the angles modulo ``2 pi`` in double
    precision and evaluates cos/sin in float32, which numpy vectorizes.  The
    features then carry ~1e-7 relative error, far below the ``1/sqrt(D)``
    Monte Carlo error of the estimate, at a fraction of the cost.
    """

    def __init__(self, frequencies, nu, seed=None, precision="double"):
        if precision not in ("double", "single"):
            raise ValueError(f"precision must be 'double' or 'single', got {precision!r}")
        self.frequencies = np.asarray(frequencies, dtype=np.float64)
        self.nu = float(nu)
        self.seed = seed
        self.precision = precision
        self.num_frequencies, self.input_dim = self.frequencies.shape
        self.dim = 2 * self.num_frequencies

    def transform(self, u):
        batch, single = _as_batch(u, self.input_dim)
        proj = batch @ self.frequencies.T
        out = np.empty((batch.shape[0], self.dim))
        if self.precision == "single":
            proj -= (2 * math.pi) * np.rint(proj * (1 / (2 * math.pi)))
            proj = proj.astype(np.float32)
        np.cos(proj, out=out[:, : self.num_frequencies], casting="unsafe")
        np.sin(proj, out=out[:, self.num_frequencies :], casting="unsafe")
        out *= 1.0 / math.sqrt(self.num_frequencies)
        return out[0] if single else out

    def kernel(self, x, y):
        diff = np.atleast_2d(x) - np.atleast_2d(y)
        return np.exp(-0.5 * self.nu * np.sum(diff * diff, axis=1))

    def estimate_exp_kernel(self, x, y):
        # exp(nu x.y) = e^nu exp(-nu ||x - y||^2 / 2) for unit vectors
        return math.exp(self.nu) * self.approx_kernel(x, y)


def build_rff(d, num_frequencies, nu, seed=None, precision="double"):
    if num_frequencies < 1:
        raise ValueError("number of random features must be >= 1")
    if not nu > 0:
        raise ValueError("kernel parameter nu must be positive")
    if d < 1:
        raise ValueError("input dimension must be >= 1")
    rng = np.random.default_rng(seed)
    freqs = rng.standard_normal((num_frequencies, d)) * math.sqrt(nu)
    return RffMap(freqs, nu, seed, precision)


def apply_rff(rff, u):
    return rff.transform(u)


class QuadraticMap(FeatureMap):
    """Explicit map for ``alpha (x.y)^2 + beta``: ``[sqrt(alpha) vec(z z^T), sqrt(beta)]``."""

    def __init__(self, d, alpha=100.0, beta=1.0):
        if not alpha > 0 or beta < 0:
            raise ValueError("quadratic kernel needs alpha > 0 and beta >= 0")
        self.input_dim = int(d)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.dim = self.input_dim**2 + 1

    def transform(self, u):
        batch, single = _as_batch(u, self.input_dim)
        k = batch.shape[0]
        out = np.empty((k, self.dim))
        outer = batch[:, :, None] * batch[:, None, :]
        out[:, :-1] = math.sqrt(self.alpha) * outer.reshape(k, -1)
        out[:, -1] = math.sqrt(self.beta)
        return out[0] if single else out

    def kernel(self, x, y):
        return self.alpha * _rowdot(x, y) ** 2 + self.beta


def apply_quadratic(qmap, u):
    return qmap.transform(u)


def fit_quadratic(x, y, tau):
    """Least-squares ``(alpha, beta)`` so that ``alpha (x.y)^2 + beta ~ exp(tau x.y)``."""
    s = _rowdot(x, y)
    design = np.column_stack([s**2, np.ones_like(s)])
    (alpha, beta), *_ = np.linalg.lstsq(design, np.exp(tau * s), rcond=None)
    return float(alpha), float(beta)


class MaclaurinMap(FeatureMap):
    """Random Maclaurin features for ``exp(tau x.y)``.

    Feature ``k`` picks a degree ``N`` with ``P(N) = p^-(N+1)`` and multiplies
    ``N`` Rademacher projections, weighted by ``sqrt(tau^N / N! * p^(N+1))``.
    Degrees are clipped at ``max_degree``.
    """

    def __init__(self, d, num_features, tau, p=2.0, max_degree=40, seed=None):
        if num_features < 1:
            raise ValueError("number of features must be >= 1")
        self.input_dim = int(d)
        self.dim = int(num_features)
        self.tau = float(tau)
        self.seed = seed
        rng = np.random.default_rng(seed)
        # P(N = k) = (1 - 1/p) p^-k, k >= 0; equals p^-(k+1) for p = 2
        degrees = rng.geometric(1.0 - 1.0 / p, size=self.dim) - 1
        self.degrees = np.minimum(degrees, max_degree)
        log_coef = (
            self.degrees * math.log(self.tau)
            - np.array([math.lgamma(k + 1) for k in self.degrees])
            - np.log1p(-1.0 / p)
            + self.degrees * math.log(p)
        )
        self.weights = np.exp(0.5 * log_coef)
        self._projections = []
        for level in range(1, int(self.degrees.max(initial=0)) + 1):
            rows = np.flatnonzero(self.degrees >= level)
            signs = rng.integers(0, 2, size=(rows.size, self.input_dim)) * 2.0 - 1.0
            self._projections.append((rows, signs))

    def transform(self, u):
        batch, single = _as_batch(u, self.input_dim)
        out = np.ones((batch.shape[0], self.dim))
        for rows, signs in self._projections:
            out[:, rows] *= batch @ signs.T
        out *= self.weights / math.sqrt(self.dim)
        return out[0] if single else out

    def kernel(self, x, y):
        return np.exp(self.tau * _rowdot(x, y))


class LinearMap(FeatureMap):
    """Identity map; turns the sampling tree into a plain sum tree over given masses."""

    def __init__(self, d):
        self.input_dim = self.dim = int(d)

    def transform(self, u):
        batch, single = _as_batch(u, self.input_dim)
        return batch[0].copy() if single else batch.copy()

    def kernel(self, x, y):
        return _rowdot(x, y)


def kernel_mse(fmap, x, y, tau=None, max_elements=1 << 24):
    """Mean squared error of a map's kernel estimate over pairs ``(x[k], y[k])``.

    With ``tau=None`` the reference is the map's own closed-form kernel.
    Otherwise the reference is ``exp(tau x.y)`` and the map's exponential-kernel
    estimate is used (for RFF: ``e^nu phi(x).phi(y)``, matching when nu = tau).
    Pairs are processed in chunks of at most ``max_elements`` feature entries,
    so wide maps (quadratic at d = 256 has 65537 features) stay in memory.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] == 0 or x.shape != y.shape:
        raise ValueError("need a non-empty list of equally shaped pairs")
    chunk = max(1, max_elements // max(1, fmap.dim))
    total = 0.0
    for start in range(0, x.shape[0], chunk):
        xs, ys = x[start : start + chunk], y[start : start + chunk]
        if tau is None:
            err = fmap.approx_kernel(xs, ys) - fmap.kernel(xs, ys)
        else:
            err = fmap.estimate_exp_kernel(xs, ys) - np.exp(tau * _rowdot(xs, ys))
        total += float(np.sum(err**2))
    return total / x.shape[0]
