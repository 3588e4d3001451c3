"""Sparse token merging on the tile grid.

Tiles are hashed into non-overlapping ``s x s`` windows with
``g = u * (r // s) + (c // s)``; each non-empty window becomes one token::

    merged_g = LN_out( sum_{i in S_g} LN_in(x_i) / sqrt(|S_g|) )

Outputs are ordered by ascending window id, i.e. row-major over the coarse
grid, and empty windows produce nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .slide_io import PackedBatch, TileFeatureSet

DEFAULT_HASH = 2**32
UINT64_MAX = 2**64 - 1
LN_EPS = 1e-5


def window_id(coord, s, u=DEFAULT_HASH):
    """Window hash of one (row, col) coordinate."""
    r, c = int(coord[0]), int(coord[1])
    if r < 0 or c < 0:
        raise ValidationError("coordinates must be non-negative")
    if s < 1:
        raise ValidationError("window size must be >= 1")
    g = u * (r // s) + c // s
    if g > UINT64_MAX:
        raise OverflowError(f"window id {g} does not fit in 64 bits")
    return g


def window_ids(coords, s, u=DEFAULT_HASH):
    """Vectorised :func:`window_id` returning uint64 ids.

    Raises OverflowError if any id leaves the 64-bit range and
    ValidationError if ``u`` is too small to keep ids collision-free.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if s < 1:
        raise ValidationError("window size must be >= 1")
    if coords.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if coords.min() < 0:
        raise ValidationError("coordinates must be non-negative")
    rr, cc = coords[:, 0] // s, coords[:, 1] // s
    if int(cc.max()) >= u:
        raise ValidationError(f"hash constant u={u} must exceed max col window {int(cc.max())}")
    if u * int(rr.max()) + int(cc.max()) > UINT64_MAX:
        raise OverflowError("window ids exceed 64 bits")
    return rr.astype(np.uint64) * np.uint64(u) + cc.astype(np.uint64)


@dataclass
class MergedTokenSet:
    features: np.ndarray  # (N', D)
    coords: np.ndarray  # (N', 2) coarse grid coordinates
    window_members: dict  # window id -> tile indices
    slide_id: str = ""

    @property
    def n_tokens(self):
        return self.features.shape[0]

    def as_tiles(self) -> TileFeatureSet:
        return TileFeatureSet(self.slide_id, self.features, self.coords)


def _group(coords, s, u):
    ids = window_ids(coords, s, u)
    uniq, inverse, counts = np.unique(ids, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


class SparseTokenMerger(nn.Module):
    """Window merge with per-token LayerNorms before and after the sum."""

    def __init__(self, dim, window_size=2, hash_constant=DEFAULT_HASH):
        super().__init__()
        if window_size < 1:
            raise ValidationError("window_size must be >= 1")
        self.window_size = int(window_size)
        self.hash_constant = int(hash_constant)
        self.ln_in = nn.LayerNorm(dim, eps=LN_EPS)
        self.ln_out = nn.LayerNorm(dim, eps=LN_EPS)

    def forward(self, x, coords):
        """Merge one slide.

        ``x`` is an (N, D) tensor, ``coords`` an (N, 2) integer array. Returns
        the (N', D) merged tensor, merged coordinates, window ids and the
        tile-to-window inverse index.
        """
        s = self.window_size
        coords = np.asarray(coords, dtype=np.int64)
        uniq, inverse, counts = _group(coords, s, self.hash_constant)
        idx = torch.as_tensor(inverse, device=x.device)
        summed = x.new_zeros((len(uniq), x.shape[-1])).index_add(0, idx, self.ln_in(x))
        scale = torch.as_tensor(counts, dtype=x.dtype, device=x.device).rsqrt()
        merged = self.ln_out(summed * scale[:, None])
        first = np.zeros(len(uniq), dtype=np.int64)
        # any member gives the window's coarse coordinate
        first[inverse] = np.arange(len(inverse))
        merged_coords = coords[first] // s
        return merged, merged_coords, uniq, inverse

    def forward_packed(self, x, coords, mask):
        """Batched merge of a padded (B, N, D) tensor under a validity mask.

        All valid tiles of the batch are grouped at once by the composite key
        (batch, row // s, col // s); the result is re-packed to the longest
        merged length. Returns ``(merged, merged_coords, merged_mask, lengths)``.
        """
        s = self.window_size
        coords = np.asarray(coords, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        b_idx, t_idx = np.nonzero(mask)
        if len(b_idx) == 0:
            raise ValidationError("batch has no valid tiles")
        coarse = coords[b_idx, t_idx] // s
        if coarse[:, 1].max() >= self.hash_constant:
            raise ValidationError("hash constant too small for this grid")
        keys = np.stack([b_idx, coarse[:, 0], coarse[:, 1]], axis=1)
        uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)

        flat = x[torch.as_tensor(b_idx), torch.as_tensor(t_idx)]
        summed = flat.new_zeros((len(uniq), x.shape[-1])).index_add(0, torch.as_tensor(inverse), self.ln_in(flat))
        merged = self.ln_out(summed * torch.as_tensor(counts, dtype=x.dtype).rsqrt()[:, None])

        B = x.shape[0]
        lengths = np.bincount(uniq[:, 0], minlength=B)
        n_max = int(lengths.max())
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        pos = np.arange(len(uniq)) - starts[uniq[:, 0]]
        out = x.new_zeros((B, n_max, x.shape[-1]))
        out = out.index_put((torch.as_tensor(uniq[:, 0]), torch.as_tensor(pos)), merged)
        out_coords = np.zeros((B, n_max, 2), dtype=np.int64)
        out_coords[uniq[:, 0], pos] = uniq[:, 1:]
        out_mask = np.zeros((B, n_max), dtype=bool)
        out_mask[uniq[:, 0], pos] = True
        return out, out_coords, out_mask, lengths


def merge(tiles: TileFeatureSet, params: SparseTokenMerger) -> MergedTokenSet:
    """Merge one slide with a :class:`SparseTokenMerger` (no gradient)."""
    dtype = params.ln_in.weight.dtype
    with torch.no_grad():
        x = torch.as_tensor(tiles.features, dtype=dtype)
        merged, mcoords, uniq, inverse = params(x, tiles.coords)
    order = np.argsort(inverse, kind="stable")
    bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    members = {int(g): idx for g, idx in zip(uniq, np.split(order, bounds))}
    return MergedTokenSet(
        features=merged.double().numpy(),
        coords=mcoords,
        window_members=members,
        slide_id=tiles.slide_id,
    )


def merge_batch(batch: PackedBatch, params: SparseTokenMerger) -> PackedBatch:
    dtype = params.ln_in.weight.dtype
    with torch.no_grad():
        x = torch.as_tensor(batch.features, dtype=dtype)
        out, coords, mask, lengths = params.forward_packed(x, batch.coords, batch.validity_mask)
    return PackedBatch(out.double().numpy(), coords, mask, lengths.astype(np.int64), list(batch.slide_ids))
