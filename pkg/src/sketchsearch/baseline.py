"""Non-neural retrieval baseline: BoW-HOG features with Euclidean ranking.

Screenshots pass through Canny edge extraction, then HOG descriptors are
pooled into a bag-of-visual-words histogram against a k-means codebook;
sketches, already line drawings, skip edge extraction. Histograms are
compared with Euclidean distance.

HOG layout: the image is padded to a whole number of 2x2-cell blocks,
each cell gets an unsigned-orientation histogram (angles folded to
[0, pi)), and each non-overlapping 2x2-cell block is L2-normalized in
place. The descriptor is returned as a (cells_y, cells_x, bins) array;
the per-block subvectors of length 4*bins are the patches fed to the
codebook.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import imaging

BLOCK = 2  # cells per normalization block side
NORM_EPS = 1e-6


def cell_histograms(img: np.ndarray, cell: int = 8, bins: int = 9, background: float = 0.0) -> np.ndarray:
    """Raw magnitude-weighted orientation histograms per cell, unnormalized.

    Gradients are central differences with replicated edges; each pixel
    votes its magnitude into the two bins nearest its folded orientation
    (linear interpolation, wrapping at pi).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"hog needs a non-empty 2-D image, got shape {img.shape}")
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if cell < 1:
        raise ValueError(f"cell must be >= 1, got {cell}")

    unit = cell * BLOCK
    h, w = img.shape
    ph = (unit - h % unit) % unit
    pw = (unit - w % unit) % unit
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), constant_values=background)
        h, w = img.shape

    padded = np.pad(img, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx) % np.pi

    width = np.pi / bins
    pos = theta / width
    b0 = np.floor(pos).astype(int)
    frac = pos - b0
    b0 %= bins
    b1 = (b0 + 1) % bins

    cy, cx = h // cell, w // cell
    cell_row = (np.arange(h) // cell)[:, None]
    cell_col = (np.arange(w) // cell)[None, :]
    cell_idx = np.broadcast_to(cell_row * cx + cell_col, (h, w))

    hist = np.zeros(cy * cx * bins)
    flat0 = (cell_idx * bins + b0).ravel()
    flat1 = (cell_idx * bins + b1).ravel()
    hist += np.bincount(flat0, weights=(mag * (1 - frac)).ravel(), minlength=hist.size)
    hist += np.bincount(flat1, weights=(mag * frac).ravel(), minlength=hist.size)
    return hist.reshape(cy, cx, bins)


def hog(img: np.ndarray, cell: int = 8, bins: int = 9, background: float = 0.0) -> np.ndarray:
    """HOG descriptor of shape (cells_y, cells_x, bins), block-normalized."""
    desc = cell_histograms(img, cell=cell, bins=bins, background=background)
    cy, cx, _ = desc.shape
    for by in range(0, cy, BLOCK):
        for bx in range(0, cx, BLOCK):
            block = desc[by : by + BLOCK, bx : bx + BLOCK]
            block /= np.sqrt(np.sum(block**2) + NORM_EPS**2)
    return desc


def block_patches(desc: np.ndarray) -> np.ndarray:
    """Flatten each 2x2-cell block of a descriptor into one patch vector."""
    cy, cx, bins = desc.shape
    if cy % BLOCK or cx % BLOCK:
        raise ValueError(f"descriptor grid {cy}x{cx} is not block-aligned")
    by, bx = cy // BLOCK, cx // BLOCK
    blocks = desc.reshape(by, BLOCK, bx, BLOCK, bins).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(by * bx, BLOCK * BLOCK * bins)


# ---------------------------------------------------------------------------
# k-means codebook
# ---------------------------------------------------------------------------


@dataclass
class Codebook:
    """Visual vocabulary: k centroids over block-patch vectors."""

    centroids: np.ndarray  # (k, dim) float32
    seed: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _pairwise_sq(samples: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||s - c||^2 using the expansion; clip tiny negatives from rounding
    s2 = np.sum(samples**2, axis=1)[:, None]
    c2 = np.sum(centroids**2, axis=1)[None, :]
    d2 = s2 + c2 - 2.0 * samples @ centroids.T
    return np.maximum(d2, 0.0)


def _kmeanspp_init(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((samples - samples[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            remaining = [i for i in range(n) if i not in set(chosen)]
            chosen.append(int(rng.choice(remaining)))
        else:
            chosen.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((samples - samples[chosen[-1]]) ** 2, axis=1))
    return samples[chosen].copy()


def kmeans_fit(samples, k: int, iters: int = 50, seed: int = 0, objectives: list | None = None) -> Codebook:
    """k-means++ seeded Lloyd's algorithm, deterministic for a given seed.

    Runs until assignments stop changing or ``iters`` passes; empty
    clusters are reseeded to the sample farthest from its assigned
    centroid. ``objectives``, when given a list, receives the
    within-cluster sum of squares after each assignment step.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("samples must be a 2-D array of row vectors")
    n = samples.shape[0]
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(samples, k, rng)
    assign = None
    for _ in range(max(1, iters)):
        d2 = _pairwise_sq(samples, centroids)
        new_assign = np.argmin(d2, axis=1)
        if objectives is not None:
            objectives.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = samples[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                worst = int(np.argmax(d2[np.arange(n), assign]))
                centroids[c] = samples[worst]
                assign[worst] = c
    return Codebook(centroids=centroids.astype(np.float32), seed=seed)


def bow_encode(desc: np.ndarray, book: Codebook) -> np.ndarray:
    """Histogram of nearest-centroid assignments over block patches, L1-normalized."""
    patches = block_patches(desc)
    if patches.shape[1] != book.dim:
        raise ValueError(f"patch dim {patches.shape[1]} does not match codebook dim {book.dim}")
    d2 = _pairwise_sq(patches, book.centroids.astype(np.float64))
    assign = np.argmin(d2, axis=1)  # ties go to the lowest centroid index
    counts = np.bincount(assign, minlength=book.k).astype(np.float64)
    return counts / counts.sum()


def baseline_rank(query: np.ndarray, corpus) -> list[tuple[str, float]]:
    """Rank (item_id, histogram) pairs by ascending Euclidean distance.

    Ties break toward the lexically smaller item id.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot rank against an empty corpus")
    query = np.asarray(query, dtype=np.float64)
    for item_id, hist in corpus:
        if np.asarray(hist).shape != query.shape:
            raise ValueError(f"histogram length mismatch for item {item_id!r}")
    scored = [
        (item_id, float(np.linalg.norm(np.asarray(hist, dtype=np.float64) - query)))
        for item_id, hist in corpus
    ]
    scored.sort(key=lambda pair: (pair[1], pair[0]))
    return scored


# ---------------------------------------------------------------------------
# Codebook file format: magic "SWBOW1", u32 k, u32 dim, u64 seed, k*dim f32
# ---------------------------------------------------------------------------

CODEBOOK_MAGIC = b"SWBOW1"


def save_codebook(book: Codebook, path):
    header = CODEBOOK_MAGIC + struct.pack("<IIQ", book.k, book.dim, book.seed & 0xFFFFFFFFFFFFFFFF)
    body = book.centroids.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] != CODEBOOK_MAGIC:
        raise ValueError(f"not a codebook file: {path}")
    k, dim, seed = struct.unpack("<IIQ", blob[6:22])
    expected = 22 + 4 * k * dim
    if len(blob) != expected:
        raise ValueError(f"codebook file truncated or padded: {path}")
    centroids = np.frombuffer(blob[22:], dtype="<f4").reshape(k, dim).copy()
    return Codebook(centroids=centroids, seed=seed)


# ---------------------------------------------------------------------------
# End-to-end baseline feature pipeline
# ---------------------------------------------------------------------------


@dataclass
class BaselineConfig:
    """Knobs for the BoW-HOG pipeline; defaults are canonical HOG settings."""

    image_size: int = 64
    cell: int = 8
    bins: int = 9
    vocab_size: int = 256
    kmeans_iters: int = 50
    seed: int = 0
    canny: dict = field(default_factory=lambda: {"sigma": 1.4, "low": 0.1, "high": 0.2})


def screenshot_descriptor(img: np.ndarray, cfg: BaselineConfig) -> np.ndarray:
    """Screenshot path: resize, Canny edge map, HOG."""
    small = imaging.resize(img, cfg.image_size, cfg.image_size)
    edges = imaging.canny(small, **cfg.canny)
    return hog(edges, cell=cfg.cell, bins=cfg.bins, background=0.0)


def sketch_descriptor(img: np.ndarray, cfg: BaselineConfig) -> np.ndarray:
    """Sketch path: already a line drawing, HOG directly (white background)."""
    small = imaging.resize(img, cfg.image_size, cfg.image_size)
    return hog(small, cell=cfg.cell, bins=cfg.bins, background=1.0)


def fit_codebook(descriptors, cfg: BaselineConfig) -> Codebook:
    """Cluster the block patches of the given descriptors into a vocabulary."""
    patches = np.concatenate([block_patches(d) for d in descriptors], axis=0)
    return kmeans_fit(patches, k=cfg.vocab_size, iters=cfg.kmeans_iters, seed=cfg.seed)
