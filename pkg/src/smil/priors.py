"""Modality priors: representative vectors of the second modality, learned
from the modality-complete subset by K-means (default) or PCA."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from smil.rand import RandomStream

PRIORS_MAGIC = b"SMILP"
_SPACE_TAGS = {"input": 0, "embedding": 1}


class PriorsError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityPriors:
    vectors: np.ndarray  # (K, d)
    space_tag: str  # input | embedding
    source_count: int  # number of modality-complete samples used

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise PriorsError(f"priors must be a (K, d) matrix with K >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise PriorsError("priors contain non-finite values")
        if self.space_tag not in _SPACE_TAGS:
            raise PriorsError(f"unknown space tag {self.space_tag!r}")
        object.__setattr__(self, "vectors", v)

    @property
    def k(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def _plusplus_seed(points, k, stream):
    n = points.shape[0]
    gen = stream.generator
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[gen.integers(0, n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for m in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining distances zero: degenerate duplicates
            idx = gen.integers(0, n)
        else:
            idx = gen.choice(n, size=None, p=d2 / total)
        centroids[m] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[m]) ** 2).sum(axis=1))
    return centroids


def kmeans(points, k, max_iters=100, seed=0):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids (k, d), assignments (N,), inertia). Terminates when
    assignments are stable or max_iters is reached; an emptied cluster is
    re-seeded at the point farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k or k < 1:
        raise PriorsError(f"kmeans needs N >= k >= 1, got N={n}, k={k}")

    centroids = _plusplus_seed(points, k, RandomStream(seed).child("kmeans++"))
    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        for m in range(k):
            members = new_assign == m
            if members.any():
                centroids[m] = points[members].mean(axis=0)
            else:
                farthest = d2[np.arange(n), new_assign].argmax()
                centroids[m] = points[farthest]
                new_assign[farthest] = m
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignments = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignments].sum())
    return centroids, assignments, inertia


def pca(points, k):
    """Top-k principal directions of the data.

    Returns (mean (d,), components (k, d) orthonormal rows ordered by
    descending eigenvalue, stddevs (k,) of the data along each component).
    """
    points = np.asarray(points, dtype=np.float64)
    n, d = points.shape
    if n < 2:
        raise PriorsError(f"pca needs at least 2 points, got {n}")
    if k > min(n, d):
        raise PriorsError(f"pca k={k} exceeds min(N, d)={min(n, d)}")
    mean = points.mean(axis=0)
    centered = points - mean
    # rows of vt are right singular vectors = principal directions
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    stddevs = s[:k] / np.sqrt(n - 1)
    return mean, vt[:k], stddevs


def pca_priors(points, k) -> ModalityPriors:
    """Priors = data mean displaced one standard deviation along each of the
    top-k principal directions."""
    mean, components, stddevs = pca(points, k)
    vectors = mean[None, :] + stddevs[:, None] * components
    return ModalityPriors(vectors=vectors, space_tag="input", source_count=points.shape[0])


def build_priors(dataset, k=16, method="kmeans", space="input", encoder=None, seed=0) -> ModalityPriors:
    """Cluster the modality-2 vectors of the modality-complete subset.

    space="input" uses raw flattened feature maps; space="embedding" runs
    them through the supplied encoder first.
    """
    complete = dataset.complete_indices()
    if len(complete) < k:
        raise PriorsError(
            f"need at least k={k} modality-complete samples, have {len(complete)}"
        )
    if space == "embedding":
        if encoder is None:
            raise PriorsError("embedding-space priors require an encoder")
        vectors = np.stack([encoder(dataset.audio[i]) for i in complete])
    elif space == "input":
        vectors = dataset.audio[complete].reshape(len(complete), -1)
    else:
        raise PriorsError(f"unknown prior space {space!r}")

    if method == "kmeans":
        centroids, _, _ = kmeans(vectors, k, seed=seed)
    elif method == "pca":
        return ModalityPriors(
            vectors=pca_priors(vectors, k).vectors, space_tag=space, source_count=len(complete)
        )
    else:
        raise PriorsError(f"unknown prior method {method!r}")
    return ModalityPriors(vectors=centroids, space_tag=space, source_count=len(complete))


def write_priors(path, priors: ModalityPriors):
    with open(path, "wb") as fh:
        fh.write(PRIORS_MAGIC)
        fh.write(struct.pack("<II", priors.k, priors.dim))
        fh.write(struct.pack("B", _SPACE_TAGS[priors.space_tag]))
        fh.write(priors.vectors.astype("<f8").tobytes())


def read_priors(path) -> ModalityPriors:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != PRIORS_MAGIC:
            raise PriorsError(f"{path}: bad magic {magic!r}")
        k, d = struct.unpack("<II", fh.read(8))
        tag = struct.unpack("B", fh.read(1))[0]
        payload = fh.read(k * d * 8)
    if len(payload) != k * d * 8:
        raise PriorsError(f"{path}: truncated priors payload")
    space = {v: name for name, v in _SPACE_TAGS.items()}.get(tag)
    if space is None:
        raise PriorsError(f"{path}: unknown space tag byte {tag}")
    vectors = np.frombuffer(payload, dtype="<f8").reshape(k, d).copy()
    return ModalityPriors(vectors=vectors, space_tag=space, source_count=0)
