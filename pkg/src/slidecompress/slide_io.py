"""Tile-feature bundles: loading, saving, synthesis, packing and toy VQA pairs.

A slide bundle is a directory::

    features.npy   float16, little-endian, C order, shape (N, D)
    coords.npy     float32, little-endian, shape (N, 2), columns (row, col)
    meta.json      {"slide_id": ..., "text_embedding": [...], "cluster_labels": [...]}

``features.csv`` (header ``r,c,f0,...``) is accepted in place of the two
``.npy`` files.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, FormatError, ShapeError, ValidationError
from .seeding import sub_seed, substream

FEATURES_FILE = "features.npy"
COORDS_FILE = "coords.npy"
META_FILE = "meta.json"
CSV_FILE = "features.csv"

F16_MAX = float(np.finfo(np.float16).max)
# largest integer range exactly representable by float32
F32_EXACT_INT = 2**24

DEFAULT_N_MAX = 4096


@dataclass
class TileFeatureSet:
    """One slide: tile embeddings plus integer (row, col) grid coordinates."""

    slide_id: str
    features: np.ndarray
    coords: np.ndarray
    text_embedding: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        coords = np.asarray(self.coords)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError(f"coords must have shape (N, 2), got {coords.shape}")
        if coords.shape[0] != self.features.shape[0]:
            raise ShapeError(
                f"{self.features.shape[0]} feature rows but {coords.shape[0]} coordinate rows"
            )
        if self.features.shape[0] < 1:
            raise ValidationError("a slide needs at least one tile")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("features contain non-finite values")
        if coords.dtype.kind == "f":
            if not np.all(np.isfinite(coords)) or np.any(coords != np.round(coords)):
                raise ValidationError("coordinates must be integers")
        self.coords = coords.astype(np.int64)
        if np.any(self.coords < 0):
            raise ValidationError("coordinates must be non-negative")
        if len(np.unique(self.coords, axis=0)) != len(self.coords):
            raise ValidationError("duplicate tile coordinates")
        if self.text_embedding is not None:
            t = np.asarray(self.text_embedding, dtype=np.float64).reshape(-1)
            if t.shape[0] != self.features.shape[1]:
                raise ShapeError(
                    f"text embedding has {t.shape[0]} dims, features have {self.features.shape[1]}"
                )
            self.text_embedding = t
        labels = self.metadata.get("cluster_labels")
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (self.n_tiles,):
                raise ShapeError("cluster_labels must have one entry per tile")
            self.metadata["cluster_labels"] = labels

    @property
    def n_tiles(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


@dataclass
class PackedBatch:
    """Zero-padded batch of slides with a validity mask."""

    features: np.ndarray  # (B, N_max, D)
    coords: np.ndarray  # (B, N_max, 2)
    validity_mask: np.ndarray  # (B, N_max) bool
    lengths: np.ndarray  # (B,)
    slide_ids: list = field(default_factory=list)

    @property
    def batch_size(self):
        return self.features.shape[0]

    def slide(self, b):
        n = int(self.lengths[b])
        valid = self.validity_mask[b]
        sid = self.slide_ids[b] if b < len(self.slide_ids) else f"slide-{b}"
        return TileFeatureSet(sid, self.features[b][valid][:n], self.coords[b][valid][:n])


@dataclass
class SyntheticSlideSpec:
    grid_height: int
    grid_width: int
    n_clusters: int
    cluster_centers: np.ndarray
    noise_sigma: float
    occupancy: float
    seed: int
    # cluster forced to be the modal one; None leaves the Voronoi draw as is
    dominant_cluster: int | None = None
    n_sites: int | None = None
    slide_id: str | None = None

    def validate(self):
        centers = np.asarray(self.cluster_centers, dtype=np.float64)
        if self.n_clusters < 1:
            raise ValidationError("n_clusters must be >= 1")
        if centers.ndim != 2 or centers.shape[0] != self.n_clusters:
            raise ValidationError("cluster_centers must have shape (n_clusters, D)")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 < self.occupancy <= 1:
            raise ValidationError("occupancy must lie in (0, 1]")
        if self.occupancy * self.grid_height * self.grid_width < 1:
            raise ValidationError("occupancy leaves no tile on the grid")
        if self.dominant_cluster is not None and not 0 <= self.dominant_cluster < self.n_clusters:
            raise ValidationError("dominant_cluster out of range")
        return centers


class Template(enum.IntEnum):
    DOMINANT = 0
    DOMINANT_VERBOSE = 1


# toy vocabulary layout: 0..15 control and template tokens, 16.. cluster answers
PAD, BOS, ASK, SEP = 0, 1, 2, 3
TEMPLATE_BASE = 4
FILLER_TOKENS = (12, 13, 14, 15)
ANSWER_OFFSET = 16
TOY_VOCAB = 64


@dataclass
class ToyVqaSample:
    slide_id: str
    question_tokens: np.ndarray
    answer_tokens: np.ndarray
    vocab_size: int = TOY_VOCAB

    def __post_init__(self):
        self.question_tokens = np.asarray(self.question_tokens, dtype=np.int64)
        self.answer_tokens = np.asarray(self.answer_tokens, dtype=np.int64)
        if self.answer_tokens.size < 1:
            raise ValidationError("answer needs at least one token")
        for toks in (self.question_tokens, self.answer_tokens):
            if np.any(toks < 0) or np.any(toks >= self.vocab_size):
                raise ValidationError("token id outside the vocabulary")


# --------------------------------------------------------------------------
# .npy container


def _write_npy(path, array):
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, np.ascontiguousarray(array), version=(1, 0))


def _read_npy(path):
    with open(path, "rb") as fh:
        try:
            version = np.lib.format.read_magic(fh)
            if version == (1, 0):
                shape, fortran, dtype = np.lib.format.read_array_header_1_0(fh)
            elif version == (2, 0):
                shape, fortran, dtype = np.lib.format.read_array_header_2_0(fh)
            else:
                raise FormatError(f"{path}: unsupported .npy version {version}")
        except ValueError as exc:
            raise FormatError(f"{path}: malformed header ({exc})") from exc
        if dtype.kind not in "fiu" or dtype.hasobject:
            raise FormatError(f"{path}: unsupported dtype {dtype}")
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    return arr.reshape(shape, order="F" if fortran else "C")


def npy_header_length(path):
    """Byte offset of the payload in a .npy file."""
    with open(path, "rb") as fh:
        version = np.lib.format.read_magic(fh)
        if version == (1, 0):
            np.lib.format.read_array_header_1_0(fh)
        else:
            np.lib.format.read_array_header_2_0(fh)
        return fh.tell()


def save_slide(tiles: TileFeatureSet, path):
    """Write ``tiles`` as a bundle directory at ``path``.

    Raises OverflowError when a feature does not fit in float16 rather than
    saturating it to infinity.
    """
    os.makedirs(path, exist_ok=True)
    feats = tiles.features
    if np.any(np.abs(feats) > F16_MAX):
        raise OverflowError(f"features exceed the float16 range (max |x| = {np.abs(feats).max()})")
    f16 = feats.astype("<f2")
    if np.any(np.isinf(f16)):
        raise OverflowError("features round to infinity in float16")
    if tiles.coords.max() >= F32_EXACT_INT:
        raise OverflowError("coordinates too large for exact float32 storage")
    _write_npy(os.path.join(path, FEATURES_FILE), f16)
    _write_npy(os.path.join(path, COORDS_FILE), tiles.coords.astype("<f4"))

    meta = {"slide_id": tiles.slide_id}
    if tiles.text_embedding is not None:
        meta["text_embedding"] = [float(v) for v in tiles.text_embedding]
    for key, value in tiles.metadata.items():
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, np.generic):
            value = value.item()
        meta[key] = value
    with open(os.path.join(path, META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True)


def _load_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    if len(header) < 3 or header[:2] != ["r", "c"]:
        raise FormatError(f"{path}: header must start with r,c")
    expected = [f"f{i}" for i in range(len(header) - 2)]
    if header[2:] != expected:
        raise FormatError(f"{path}: feature columns must be named f0..f{len(expected) - 1}")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if table.shape[1] != len(header):
        raise FormatError(f"{path}: row width does not match the header")
    return table[:, 2:], table[:, :2]


def load_slide(path) -> TileFeatureSet:
    meta_path = os.path.join(path, META_FILE)
    meta = {}
    if os.path.exists(meta_path):
        try:
            with open(meta_path, encoding="utf-8") as fh:
                meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{meta_path}: {exc}") from exc
        if not isinstance(meta, dict):
            raise FormatError(f"{meta_path}: expected a JSON object")

    feat_path = os.path.join(path, FEATURES_FILE)
    if os.path.exists(feat_path):
        feats = _read_npy(feat_path)
        coords = _read_npy(os.path.join(path, COORDS_FILE))
    elif os.path.exists(os.path.join(path, CSV_FILE)):
        feats, coords = _load_csv(os.path.join(path, CSV_FILE))
    else:
        raise FormatError(f"{path}: no {FEATURES_FILE} or {CSV_FILE}")

    if feats.ndim != 2 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"bad array shapes {feats.shape} / {coords.shape}")
    if feats.shape[0] != coords.shape[0]:
        raise ShapeError(f"{feats.shape[0]} feature rows but {coords.shape[0]} coordinate rows")
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValidationError("non-finite coordinates")
    coords = np.rint(coords).astype(np.int64)

    slide_id = meta.pop("slide_id", os.path.basename(os.path.normpath(path)))
    text = meta.pop("text_embedding", None)
    return TileFeatureSet(
        slide_id=str(slide_id),
        features=np.asarray(feats, dtype=np.float64),
        coords=coords,
        text_embedding=None if text is None else np.asarray(text, dtype=np.float64),
        metadata=meta,
    )


def list_bundles(root):
    """Sorted bundle directories directly under ``root``."""
    out = []
    for name in sorted(os.listdir(root)):
        p = os.path.join(root, name)
        if os.path.isdir(p) and (
            os.path.exists(os.path.join(p, FEATURES_FILE)) or os.path.exists(os.path.join(p, CSV_FILE))
        ):
            out.append(p)
    return out


# --------------------------------------------------------------------------
# synthesis


def make_cluster_centers(n_clusters, dim, seed, scale=1.0):
    """Random unit-norm (times ``scale``) tissue prototypes."""
    rng = substream(seed, "centers")
    c = rng.standard_normal((n_clusters, dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c * scale


def _modal(labels, n_clusters):
    # argmax returns the first maximum, i.e. the lowest cluster id on ties
    return int(np.argmax(np.bincount(labels, minlength=n_clusters)))


def synthesize_slide(spec: SyntheticSlideSpec) -> TileFeatureSet:
    """Deterministic synthetic slide made of contiguous Voronoi cluster blobs."""
    centers = spec.validate()
    H, W, G = spec.grid_height, spec.grid_width, spec.n_clusters

    n_occ = max(1, int(round(spec.occupancy * H * W)))
    cells = np.sort(substream(spec.seed, "cells").choice(H * W, size=n_occ, replace=False))
    coords = np.stack([cells // W, cells % W], axis=1).astype(np.int64)
    centres_rc = coords + 0.5

    n_sites = spec.n_sites or max(2 * G, 6)
    site_rng = substream(spec.seed, "sites")
    for _ in range(64):
        sites = site_rng.uniform((0.0, 0.0), (H, W), size=(n_sites, 2))
        if spec.dominant_cluster is None:
            site_labels = site_rng.integers(0, G, size=n_sites)
        else:
            site_labels = site_rng.integers(0, G, size=n_sites)
            site_labels[: (n_sites + 1) // 2] = spec.dominant_cluster
        d2 = ((centres_rc[:, None, :] - sites[None, :, :]) ** 2).sum(-1)
        labels = site_labels[np.argmin(d2, axis=1)]
        if spec.dominant_cluster is None:
            break
        modal = _modal(labels, G)
        if modal != spec.dominant_cluster:
            swap = labels.copy()
            swap[labels == modal] = spec.dominant_cluster
            swap[labels == spec.dominant_cluster] = modal
            labels = swap
        if _modal(labels, G) == spec.dominant_cluster:
            break
    else:
        raise ValidationError("could not plant the requested dominant cluster")

    noise = substream(spec.seed, "noise").standard_normal((n_occ, centers.shape[1]))
    features = centers[labels] + spec.noise_sigma * noise

    modal = _modal(labels, G)
    designated = modal if spec.dominant_cluster is None else spec.dominant_cluster
    norm = np.linalg.norm(centers[designated])
    text = centers[designated] / norm if norm > 0 else None

    return TileFeatureSet(
        slide_id=spec.slide_id or f"synth-{spec.seed}",
        features=features,
        coords=coords,
        text_embedding=text,
        metadata={
            "cluster_labels": labels.astype(np.int64),
            "n_clusters": G,
            "dominant_cluster": modal,
            "designated_cluster": designated,
            "grid": [H, W],
        },
    )


def _quota_counts(n, priors):
    priors = np.asarray(priors, dtype=np.float64)
    priors = priors / priors.sum()
    raw = n * priors
    counts = np.floor(raw).astype(int)
    # largest remainder, ties to the lower cluster id
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def synthesize_corpus(
    n_slides,
    grid=(24, 24),
    n_clusters=4,
    dim=32,
    noise_sigma=0.1,
    occupancy=0.6,
    priors=None,
    seed=0,
    centers=None,
):
    """A corpus sharing one set of cluster prototypes.

    The modal cluster of each slide is planted by quota, so the answer
    histogram equals ``n_slides * priors`` up to largest-remainder rounding.
    """
    if priors is None:
        priors = np.full(n_clusters, 1.0 / n_clusters)
    if centers is None:
        centers = make_cluster_centers(n_clusters, dim, seed)
    planted = np.repeat(np.arange(n_clusters), _quota_counts(n_slides, priors))
    substream(seed, "plant").shuffle(planted)
    corpus = []
    for i in range(n_slides):
        spec = SyntheticSlideSpec(
            grid_height=grid[0],
            grid_width=grid[1],
            n_clusters=n_clusters,
            cluster_centers=centers,
            noise_sigma=noise_sigma,
            occupancy=occupancy,
            seed=sub_seed(seed, f"slide-{i}"),
            dominant_cluster=int(planted[i]),
            slide_id=f"slide-{i:05d}",
        )
        corpus.append(synthesize_slide(spec))
    return corpus


# --------------------------------------------------------------------------
# batching and toy VQA


def pack_batch(sets, n_max=DEFAULT_N_MAX) -> PackedBatch:
    if not sets:
        raise ValidationError("cannot pack an empty list")
    dims = {s.dim for s in sets}
    if len(dims) != 1:
        raise ShapeError(f"feature dims differ across slides: {sorted(dims)}")
    for s in sets:
        if s.n_tiles > n_max:
            raise CapacityError(f"slide {s.slide_id} has {s.n_tiles} tiles > N_max={n_max}")
    B, D = len(sets), dims.pop()
    feats = np.zeros((B, n_max, D), dtype=np.float64)
    coords = np.zeros((B, n_max, 2), dtype=np.int64)
    mask = np.zeros((B, n_max), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(sets):
        n = s.n_tiles
        feats[b, :n] = s.features
        coords[b, :n] = s.coords
        mask[b, :n] = True
        lengths[b] = n
    return PackedBatch(feats, coords, mask, lengths, [s.slide_id for s in sets])


def question_tokens(template: Template):
    template = Template(template)
    filler = list(FILLER_TOKENS[: 2 * int(template)])
    return np.array([BOS, ASK, TEMPLATE_BASE + int(template), *filler, SEP], dtype=np.int64)


def generate_toy_vqa(tiles: TileFeatureSet, template=Template.DOMINANT, vocab_size=TOY_VOCAB) -> ToyVqaSample:
    """Question asking for the modal cluster; ties go to the lowest cluster id."""
    labels = tiles.metadata.get("cluster_labels")
    if labels is None:
        raise ValidationError(f"slide {tiles.slide_id} has no cluster_labels metadata")
    labels = np.asarray(labels, dtype=np.int64)
    n_clusters = int(tiles.metadata.get("n_clusters", labels.max() + 1))
    if ANSWER_OFFSET + n_clusters > vocab_size:
        raise ValidationError("vocabulary too small for the cluster answers")
    answer = ANSWER_OFFSET + _modal(labels, n_clusters)
    return ToyVqaSample(tiles.slide_id, question_tokens(template), np.array([answer]), vocab_size)
