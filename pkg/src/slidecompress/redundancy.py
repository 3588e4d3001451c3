"""Redundancy and task-relevance statistics of a slide's tile embeddings.

Four per-slide analyses plus cross-slide aggregation:

* ``compression_curve``: K-means normalized reconstruction error vs K.
* ``local_redundancy``: fraction of tiles whose spatial neighbourhood holds a
  near-duplicate (cosine above a threshold).
* ``pairwise_similarity``: cosine histogram over sampled unordered tile pairs.
* ``relevance_curve``: cumulative share of positive text similarity captured
  by the most similar fraction of tiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateVarianceError,
    EmptyNeighborhoodError,
    GridError,
    ValidationError,
    ZeroMassError,
)
from .seeding import substream
from .slide_io import TileFeatureSet

DEFAULT_THRESHOLDS = (0.90, 0.92, 0.94, 0.96, 0.98)
DEFAULT_KS = (8, 16, 32, 64, 128, 256)
RELEVANCE_LEVELS = (0.5, 0.8, 0.9)


@dataclass
class CompressionCurve:
    ks: np.ndarray
    nmse: np.ndarray
    elbow_k: int
    k_at_half_error: int | None


@dataclass
class RedundancyReport:
    thresholds: np.ndarray
    neighbor_fraction: np.ndarray | None = None
    pairwise_histogram: tuple | None = None  # (bin_edges, counts)
    tail_probs: dict | None = None
    n_pairs: int = 0

    def combine(self, other: "RedundancyReport") -> "RedundancyReport":
        if not np.array_equal(self.thresholds, other.thresholds):
            raise GridError("threshold grids differ")
        return RedundancyReport(
            thresholds=self.thresholds,
            neighbor_fraction=self.neighbor_fraction if self.neighbor_fraction is not None else other.neighbor_fraction,
            pairwise_histogram=self.pairwise_histogram or other.pairwise_histogram,
            tail_probs=self.tail_probs or other.tail_probs,
            n_pairs=self.n_pairs or other.n_pairs,
        )


@dataclass
class RelevanceCurve:
    fractions: np.ndarray
    mass: np.ndarray
    quantile_fractions: dict = field(default_factory=dict)

    def at(self, p):
        """F(p) on an arbitrary grid using the floor(pN) prefix definition."""
        n = len(self.fractions)
        k = np.floor(np.asarray(p, dtype=np.float64) * n + 1e-9).astype(int)
        k = np.clip(k, 0, n)
        padded = np.concatenate([[0.0], self.mass])
        return padded[k]


@dataclass
class AggregateStats:
    abscissa: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray


# --------------------------------------------------------------------------
# K-means


def _sq_dists(X, C):
    # ||x||^2 - 2 x.c + ||c||^2, clipped at 0 against cancellation
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp_extend(X, centers, k_total, rng):
    """Add k-means++ centers to ``centers`` until there are ``k_total``."""
    centers = list(centers)
    if not centers:
        centers.append(X[rng.integers(len(X))])
    d2 = _sq_dists(X, np.asarray(centers)).min(1)
    while len(centers) < k_total:
        total = d2.sum()
        if total > 0:
            idx = rng.choice(len(X), p=d2 / total)
        else:
            idx = rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx : idx + 1])[:, 0])
    return np.asarray(centers)


def _lloyd(X, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(X, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(len(centers)):
            members = X[labels == k]
            # empty clusters keep their previous center
            if len(members):
                centers[k] = members.mean(axis=0)
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    sse = ((X - centers[labels]) ** 2).sum()
    return centers, labels, sse


# exact search is used while the number of K-partitions stays below this
EXACT_PARTITIONS = 2**15


def _stirling2(n, k):
    row = [1] + [0] * k
    for i in range(1, n + 1):
        new = [0] * (k + 1)
        for j in range(1, min(i, k) + 1):
            new[j] = j * row[j] + row[j - 1]
        row = new
    return row[k]


def _partitions(n, k):
    """All labelings of n items into exactly k non-empty groups (canonical form)."""
    out = []
    labels = [0] * n

    def rec(i, used):
        if n - i < k - used:
            return
        if i == n:
            out.append(labels.copy())
            return
        for g in range(min(used + 1, k)):
            labels[i] = g
            rec(i + 1, max(used, g + 1))

    rec(0, 0)
    return np.asarray(out, dtype=np.int64)


def _exact_kmeans(X, k):
    labels = _partitions(len(X), k)
    onehot = np.eye(k)[labels]  # (P, N, k)
    counts = onehot.sum(1)
    sums = np.einsum("pnk,nd->pkd", onehot, X)
    sse = (X * X).sum() - ((sums**2).sum(-1) / counts).sum(-1)
    best = int(np.argmin(sse))
    lab = labels[best]
    centers = sums[best] / counts[best][:, None]
    return centers, lab, float(((X - centers[lab]) ** 2).sum())


def kmeans(X, k, restarts=4, seed=0, max_iter=100, warm_start=None):
    """Best-of-restarts Lloyd K-means with k-means++ seeding.

    ``warm_start`` (fewer than ``k`` centers) adds one more candidate run
    initialized from those centers and extended by k-means++; since Lloyd
    never increases the objective, the result can then be no worse than the
    warm-start solution. Ties in objective go to the earliest candidate.
    Tiny problems (few enough partitions) are solved by enumeration.
    Returns ``(centers, labels, sse)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= len(X):
        raise ValidationError(f"K={k} must lie in [1, N={len(X)}]")
    if 1 < k < len(X) and _stirling2(len(X), k) <= EXACT_PARTITIONS:
        return _exact_kmeans(X, k)
    best = None
    candidates = []
    for r in range(restarts):
        rng = substream(seed, f"kmeans-{k}-{r}")
        candidates.append(_kmeanspp_extend(X, [], k, rng))
    if warm_start is not None:
        rng = substream(seed, f"kmeans-{k}-warm")
        candidates.append(_kmeanspp_extend(X, list(np.asarray(warm_start)), k, rng))
    for init in candidates:
        result = _lloyd(X, init.copy(), max_iter)
        if best is None or result[2] < best[2]:
            best = result
    return best


def _total_sse(X):
    mean = X.mean(axis=0)
    return ((X - mean) ** 2).sum()


def elbow_point(ks, nmse):
    """K with the largest discrete curvature of the (log2 K, nMSE) polyline."""
    ks = np.asarray(ks, dtype=np.float64)
    y = np.asarray(nmse, dtype=np.float64)
    if len(ks) < 3:
        return int(ks[0])
    x = np.log2(ks)
    best, best_k = -np.inf, int(ks[1])
    for i in range(1, len(x) - 1):
        d1 = (y[i] - y[i - 1]) / (x[i] - x[i - 1])
        d2 = (y[i + 1] - y[i]) / (x[i + 1] - x[i])
        second = 2.0 * (d2 - d1) / (x[i + 1] - x[i - 1])
        first = (y[i + 1] - y[i - 1]) / (x[i + 1] - x[i - 1])
        kappa = second / (1.0 + first * first) ** 1.5
        if kappa > best:
            best, best_k = kappa, int(ks[i])
    return best_k


def compression_curve(tiles: TileFeatureSet, ks=DEFAULT_KS, restarts=4, seed=0, max_iter=100) -> CompressionCurve:
    """nMSE(K) = mean ||x - ce(x)||^2 / mean ||x - mean||^2 for each K.

    Runs for increasing K are nested (each K also tries a warm start from the
    previous best centers), which makes the curve non-increasing.
    """
    X = tiles.features
    ks = np.asarray(sorted(int(k) for k in ks), dtype=np.int64)
    if len(ks) == 0 or np.any(np.diff(ks) <= 0):
        raise ValidationError("ks must be distinct")
    if ks[-1] > len(X):
        raise ValidationError(f"max K={ks[-1]} exceeds N={len(X)}")
    denom = _total_sse(X)
    if denom <= 0:
        raise DegenerateVarianceError(f"slide {tiles.slide_id} has zero feature variance")
    nmse = np.empty(len(ks))
    prev = None
    for i, k in enumerate(ks):
        if k == 1:
            # the optimal single prototype is the mean itself
            nmse[i] = _total_sse(X) / denom
            prev = X.mean(axis=0, keepdims=True)
            continue
        centers, _, sse = kmeans(X, int(k), restarts=restarts, seed=seed, max_iter=max_iter, warm_start=prev)
        nmse[i] = sse / denom
        prev = centers
    below = np.nonzero(nmse <= 0.5)[0]
    return CompressionCurve(
        ks=ks,
        nmse=nmse,
        elbow_k=elbow_point(ks, nmse),
        k_at_half_error=int(ks[below[0]]) if len(below) else None,
    )


# --------------------------------------------------------------------------
# cosine helpers


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def neighbor_indices(coords, k_nn, chunk=1024):
    """Indices of the ``k_nn`` spatially nearest other tiles of every tile.

    Distance is Euclidean on grid coordinates; ties are broken by (row, col)
    in lexicographic order. Returns an (N, min(k_nn, N-1)) array.
    """
    coords = np.asarray(coords, dtype=np.int64)
    n = len(coords)
    k = min(k_nn, n - 1)
    r, c = coords[:, 0], coords[:, 1]
    width = int(c.max()) + 1
    height = int(r.max()) + 1
    # lexicographic rank of (r, c) is unique because coordinates are distinct
    lex = r * width + c
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        dr = r[start:stop, None] - r[None, :]
        dc = c[start:stop, None] - c[None, :]
        key = (dr * dr + dc * dc) * (height * width) + lex[None, :]
        key[np.arange(stop - start), np.arange(start, stop)] = np.iinfo(np.int64).max
        out[start:stop] = np.argpartition(key, k - 1, axis=1)[:, :k]
    return out


def local_redundancy(tiles: TileFeatureSet, thresholds=DEFAULT_THRESHOLDS, k_nn=16) -> RedundancyReport:
    """r_tau: fraction of tiles whose best spatial neighbour has cosine > tau.

    The neighbour candidates are the ``k_nn`` nearest tiles on the grid and
    the representative cosine is the maximum over them (``k_nn=1`` gives the
    single-nearest-neighbour reading).
    """
    n = tiles.n_tiles
    if n < 2:
        raise EmptyNeighborhoodError("local redundancy needs at least two tiles")
    U = _unit_rows(tiles.features)
    nbrs = neighbor_indices(tiles.coords, k_nn)
    cos = np.einsum("nd,nkd->nk", U, U[nbrs])
    best = cos.max(axis=1)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    frac = (best[None, :] > thresholds[:, None]).mean(axis=1)
    return RedundancyReport(thresholds=thresholds, neighbor_fraction=frac)


def unrank_pairs(idx, n):
    """Map linear indices over {(i, j): i < j} (row-major) to pairs."""
    idx = np.asarray(idx, dtype=np.int64)
    total = n * (n - 1) // 2
    # rank from the end, then invert the triangular number
    rev = total - 1 - idx
    kk = np.floor((np.sqrt(8.0 * rev + 1.0) - 1.0) / 2.0).astype(np.int64)
    # guard floating error in sqrt
    kk = np.where(kk * (kk + 1) // 2 > rev, kk - 1, kk)
    kk = np.where((kk + 1) * (kk + 2) // 2 <= rev, kk + 1, kk)
    i = n - 2 - kk
    j = n - 1 - (rev - kk * (kk + 1) // 2)
    return i, j


def pairwise_similarity(
    tiles: TileFeatureSet,
    n_pairs=50_000,
    bins=200,
    seed=0,
    thresholds=DEFAULT_THRESHOLDS,
) -> RedundancyReport:
    """Cosine histogram over up to ``n_pairs`` unordered tile pairs.

    Pairs are drawn uniformly without replacement; all pairs are used when
    there are no more than ``n_pairs`` of them.
    """
    n = tiles.n_tiles
    if n < 2:
        raise EmptyNeighborhoodError("pairwise similarity needs at least two tiles")
    total = n * (n - 1) // 2
    if total <= n_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        idx = substream(seed, "pairs").choice(total, size=n_pairs, replace=False)
        i, j = unrank_pairs(np.sort(idx), n)
    U = _unit_rows(tiles.features)
    cos = np.clip((U[i] * U[j]).sum(1), -1.0, 1.0)
    counts, edges = np.histogram(cos, bins=bins, range=(-1.0, 1.0))
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tails = {float(t): float((cos > t).mean()) for t in thresholds}
    return RedundancyReport(
        thresholds=thresholds,
        pairwise_histogram=(edges, counts),
        tail_probs=tails,
        n_pairs=len(cos),
    )


def redundancy_report(tiles, thresholds=DEFAULT_THRESHOLDS, k_nn=16, n_pairs=50_000, bins=200, seed=0):
    local = local_redundancy(tiles, thresholds, k_nn)
    return local.combine(pairwise_similarity(tiles, n_pairs, bins, seed, thresholds))


# --------------------------------------------------------------------------
# relevance


def relevance_curve(tiles: TileFeatureSet, levels=RELEVANCE_LEVELS) -> RelevanceCurve:
    """F(p) on p = 1/N, ..., 1 for tiles sorted by cosine to the text embedding."""
    t = tiles.text_embedding
    if t is None or not np.any(t):
        raise ValidationError(f"slide {tiles.slide_id} has no usable text embedding")
    U = _unit_rows(tiles.features)
    s = U @ (t / np.linalg.norm(t))
    pos = np.maximum(np.sort(s)[::-1], 0.0)
    cum = np.cumsum(pos)
    if cum[-1] <= 0:
        raise ZeroMassError(f"slide {tiles.slide_id}: no tile has positive similarity")
    mass = cum / cum[-1]
    n = len(s)
    fractions = np.arange(1, n + 1) / n
    quant = {}
    for q in levels:
        k = int(np.searchsorted(mass, q - 1e-12, side="left"))
        quant[float(q)] = float(fractions[min(k, n - 1)])
    return RelevanceCurve(fractions=fractions, mass=mass, quantile_fractions=quant)


# --------------------------------------------------------------------------
# aggregation


def _xy(curve, kind):
    if isinstance(curve, CompressionCurve):
        return curve.ks, curve.nmse
    if isinstance(curve, RelevanceCurve):
        return curve.fractions, curve.mass
    if isinstance(curve, RedundancyReport):
        if kind == "tail":
            return curve.thresholds, np.array([curve.tail_probs[float(t)] for t in curve.thresholds])
        if kind == "histogram":
            edges, counts = curve.pairwise_histogram
            return edges[:-1], counts / max(counts.sum(), 1)
        return curve.thresholds, curve.neighbor_fraction
    x, y = curve
    return np.asarray(x), np.asarray(y)


def aggregate(curves, kind=None) -> AggregateStats:
    """Pointwise mean, median and quartiles across slides.

    ``curves`` holds analysis results or ``(x, y)`` pairs; ``kind`` selects
    the tail or histogram part of a :class:`RedundancyReport`. Quantiles use
    linear interpolation between order statistics.
    """
    curves = list(curves)
    if not curves:
        raise GridError("nothing to aggregate")
    pairs = [_xy(c, kind) for c in curves]
    x0 = np.asarray(pairs[0][0], dtype=np.float64)
    for x, _ in pairs[1:]:
        if len(x) != len(x0) or not np.allclose(np.asarray(x, dtype=np.float64), x0, rtol=0, atol=1e-12):
            raise GridError("curves do not share an abscissa")
    Y = np.stack([np.asarray(y, dtype=np.float64) for _, y in pairs])
    q25, med, q75 = np.quantile(Y, [0.25, 0.5, 0.75], axis=0, method="linear")
    return AggregateStats(abscissa=x0, mean=Y.mean(axis=0), median=med, q25=q25, q75=q75)


def relevance_on_grid(curves, grid):
    """Resample relevance curves of different lengths onto a shared p grid."""
    grid = np.asarray(grid, dtype=np.float64)
    return [(grid, c.at(grid)) for c in curves]
