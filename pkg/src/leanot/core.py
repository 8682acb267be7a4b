"""Core numerical primitives: histograms, cost kernels, and stable log-domain reductions.

Everything downstream (Sinkhorn, the extragradient solvers, the barycenter
driver) is built on the pieces here: LogSumExp with the max-subtraction trick,
entropy/KL with the 0 log 0 = 0 convention, probability histograms on the
simplex, and cost kernels that evaluate row blocks of the cost matrix on the
fly so no solver ever needs an n x n iterate.

Costs are normalized once at kernel construction so that ||C||_inf = 1; the
raw sup-norm is kept on the kernel (`scale`) to rescale reported objectives.
All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DENSE_CAP",
    "Histogram",
    "CostKernel",
    "GridKernel",
    "ExplicitKernel",
    "ColorKernel",
    "lse",
    "kl_divergence",
    "entropy",
    "cost_eval",
    "ingest_image_histogram",
    "logistic",
    "iter_blocks",
    "map_blocks",
]

# Largest n for which an explicit n x n matrix may be materialized (plans,
# explicit kernels, rounding).  Above it, solvers report infeasibility instead.
DENSE_CAP = 4096

# Rows per streamed block.  Constant on purpose: block buffers are O(n) so the
# solver's peak memory stays linear in n.
BLOCK_ROWS = 128

_SIMPLEX_ATOL = 1e-12


def lse(values) -> float:
    """log(sum(exp(values))) with the max-subtraction trick.

    Entries may be -inf (excluded mass); an all -inf input returns -inf.
    Satisfies the shift identity lse(v + a) = lse(v) + a exactly up to
    floating-point rounding.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("lse of an empty sequence")
    m = v.max()
    if not np.isfinite(m):
        if m == -np.inf:
            return -np.inf
        raise ValueError("lse input contains +inf or NaN")
    return float(m + np.log(np.exp(v - m).sum()))


def lse_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise LogSumExp of a 2-D array."""
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def kl_divergence(a, b) -> float:
    """<a, log a - log b> with the 0 log 0 = 0 convention.

    Requires a absolutely continuous w.r.t. b: raises if some a_i > 0 has
    b_i = 0.  Nonnegative whenever both inputs are normalized.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("kl_divergence: shape mismatch")
    pos = a > 0
    if np.any(b[pos] <= 0):
        raise ValueError("kl_divergence: a is not absolutely continuous w.r.t. b")
    return float(np.sum(a[pos] * (np.log(a[pos]) - np.log(b[pos]))))


def entropy(weights) -> float:
    """-sum(x log x) over all elements, with 0 log 0 = 0."""
    x = np.asarray(weights, dtype=float).ravel()
    pos = x > 0
    return float(-np.sum(x[pos] * np.log(x[pos])))


def logistic(x: np.ndarray) -> np.ndarray:
    """Numerically stable elementwise sigmoid."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class Histogram:
    """A probability mass function on the n-point simplex.

    `full_support` records whether every entry is strictly positive (true for
    image histograms after the 1e-6 perturbation; required by the entropic
    solvers).
    """

    weights: np.ndarray
    full_support: bool = field(default=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).ravel()
        if w.size == 0:
            raise ValueError("empty histogram")
        if np.any(w < 0):
            raise ValueError("histogram entries must be nonnegative")
        if abs(w.sum() - 1.0) > _SIMPLEX_ATOL:
            raise ValueError(f"histogram sums to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "full_support", bool(np.all(w > 0)))

    @classmethod
    def normalized(cls, raw) -> "Histogram":
        """Normalize nonnegative masses to sum 1."""
        raw = np.asarray(raw, dtype=float).ravel()
        total = raw.sum()
        if total <= 0:
            raise ValueError("cannot normalize: total mass is not positive")
        return cls(raw / total)

    @property
    def n(self) -> int:
        return self.weights.size

    def min(self) -> float:
        return float(self.weights.min())


def ingest_image_histogram(pixels, perturbation: float = 1e-6) -> Histogram:
    """Turn a grayscale image into a full-support histogram, row-major.

    The image is normalized to unit mass, `perturbation` is added to every
    pixel, and the result renormalized.  With perturbation 0 and zero pixels
    the output keeps exact zeros and is flagged as not full-support.
    """
    img = np.asarray(pixels, dtype=float)
    if np.any(img < 0):
        raise ValueError("image has negative pixels")
    total = img.sum()
    if total <= 0:
        raise ValueError("image has no positive pixel")
    h = img.ravel(order="C") / total
    if perturbation != 0.0:
        h = h + perturbation
        h = h / h.sum()
    return Histogram(h)


class CostKernel:
    """On-the-fly access to a normalized nonnegative cost matrix.

    Subclasses expose `block(i0, i1)` returning rows [i0, i1) of the
    normalized matrix (entries in [0, 1]).  `scale` is the raw sup-norm
    divided out at construction; multiply reported objectives by it to
    recover raw-cost units.  `sup_norm` is the post-normalization sup-norm
    (1.0, or 0.0 for an identically zero matrix).
    """

    n: int
    scale: float
    sup_norm: float

    def block(self, i0: int, i1: int) -> np.ndarray:
        raise NotImplementedError

    def entry(self, i: int, j: int) -> float:
        if not (0 <= i < self.n and 0 <= j < self.n):
            raise IndexError("cost index out of range")
        return float(self.block(i, i + 1)[0, j])

    def materialize(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.n > cap:
            raise ValueError(f"refusing to materialize {self.n}x{self.n} cost matrix (cap {cap})")
        return self.block(0, self.n)


def cost_eval(kernel: CostKernel, i: int, j: int) -> float:
    """Normalized cost entry C_ij in [0, 1]."""
    return kernel.entry(i, j)


class GridKernel(CostKernel):
    """|di|^p + |dj|^p between cells of an H x W grid, normalized by the
    opposite-corner value (H-1)^p + (W-1)^p.

    Cell k maps to (row, col) = divmod(k, W): row-major, matching
    `ingest_image_histogram`.  Rows are computed on the fly; nothing n^2 is
    stored.
    """

    def __init__(self, height: int, width: int, p: int = 2):
        if height < 1 or width < 1:
            raise ValueError("grid dimensions must be positive")
        if p not in (1, 2, 3):
            raise ValueError("grid exponent p must be 1, 2 or 3")
        self.height = int(height)
        self.width = int(width)
        self.p = int(p)
        self.n = self.height * self.width
        raw_sup = float((self.height - 1) ** p + (self.width - 1) ** p)
        self.scale = raw_sup if raw_sup > 0 else 1.0
        self.sup_norm = 1.0 if raw_sup > 0 else 0.0
        # Per-axis coordinates of every cell, row-major.
        k = np.arange(self.n)
        self._rows = (k // self.width).astype(float)
        self._cols = (k % self.width).astype(float)

    def block(self, i0: int, i1: int) -> np.ndarray:
        dr = np.abs(self._rows[i0:i1, None] - self._rows[None, :])
        dc = np.abs(self._cols[i0:i1, None] - self._cols[None, :])
        if self.p == 1:
            out = dr + dc
        elif self.p == 2:
            out = dr * dr + dc * dc
        else:
            out = dr**3 + dc**3
        out /= self.scale
        return out


class ExplicitKernel(CostKernel):
    """A dense nonnegative cost matrix, normalized at construction.

    Allowed only up to the dense cap; large problems should use an
    on-the-fly kernel.
    """

    def __init__(self, matrix, cap: int = DENSE_CAP):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("explicit cost matrix must be square")
        if m.shape[0] > cap:
            raise ValueError(f"explicit kernel of size {m.shape[0]} exceeds dense cap {cap}")
        if np.any(m < 0):
            raise ValueError("cost entries must be nonnegative")
        self.n = m.shape[0]
        raw_sup = float(m.max()) if m.size else 0.0
        self.scale = raw_sup if raw_sup > 0 else 1.0
        self.sup_norm = 1.0 if raw_sup > 0 else 0.0
        self._m = m / self.scale

    def block(self, i0: int, i1: int) -> np.ndarray:
        return self._m[i0:i1]


class ColorKernel(CostKernel):
    """||f_i - f_j||_p^p between n feature vectors (e.g. RGB triples).

    The sup-norm is exact: computed with one streamed pass at construction.
    """

    def __init__(self, features, p: int = 2):
        f = np.asarray(features, dtype=float)
        if f.ndim != 2:
            raise ValueError("features must be an (n, d) array")
        if p not in (1, 2, 3):
            raise ValueError("exponent p must be 1, 2 or 3")
        self.features = f
        self.p = int(p)
        self.n = f.shape[0]
        raw_sup = 0.0
        for i0, i1 in iter_blocks(self.n):
            d = np.abs(f[i0:i1, None, :] - f[None, :, :]) ** p
            raw_sup = max(raw_sup, float(d.sum(axis=2).max()))
        self.scale = raw_sup if raw_sup > 0 else 1.0
        self.sup_norm = 1.0 if raw_sup > 0 else 0.0

    def block(self, i0: int, i1: int) -> np.ndarray:
        d = np.abs(self.features[i0:i1, None, :] - self.features[None, :, :]) ** self.p
        return d.sum(axis=2) / self.scale


def iter_blocks(n: int, block_rows: int = BLOCK_ROWS):
    """Yield (i0, i1) row ranges covering [0, n) in fixed order."""
    for i0 in range(0, n, block_rows):
        yield i0, min(i0 + block_rows, n)


def map_blocks(fn, n: int, workers: int = 1, block_rows: int = BLOCK_ROWS) -> list:
    """Apply `fn(i0, i1)` to every row block, returning results in block order.

    With workers > 1 the blocks run on a thread pool, but results are always
    consumed in block order so downstream reductions are bitwise deterministic
    for any worker count.
    """
    ranges = list(iter_blocks(n, block_rows))
    if workers <= 1 or len(ranges) == 1:
        return [fn(i0, i1) for i0, i1 in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, i0, i1) for i0, i1 in ranges]
        return [f.result() for f in futures]
