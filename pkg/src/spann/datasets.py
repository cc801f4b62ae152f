"""Fixed benchmark datasets.

``gaussian_mixture`` is the synthetic float benchmark.  ``sift_like`` is a
stand-in for the SIFT1M subset when the real files are not available; set
``SPANN_SIFT_DIR`` to a directory holding ``sift_base.fvecs`` and
``sift_query.fvecs`` to use the real data instead.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .vectors import Dataset, read_vector_file

SIFT_ENV = "SPANN_SIFT_DIR"


@dataclass(frozen=True)
class Benchmark:
    name: str
    base: Dataset
    queries: Dataset
    train: Dataset | None = None


def gaussian_mixture(n: int, dim: int = 64, components: int = 100, spread: float = 0.5,
                     seed: int = 0, centers: np.ndarray | None = None):
    """Draw ``n`` float32 points from an equal-weight isotropic mixture.

    Centers are standard normal; each point adds N(0, spread^2) noise.
    Returns ``(points, centers)`` so queries can reuse the same centers.
    """
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.standard_normal((components, dim))
    comp = rng.integers(0, len(centers), size=n)
    pts = centers[comp] + spread * rng.standard_normal((n, centers.shape[1]))
    return pts.astype(np.float32), centers


def benchmark_b(n: int = 100_000, num_queries: int = 1_000, num_train: int = 1_000,
                seed: int = 20240601) -> Benchmark:
    base, centers = gaussian_mixture(n, seed=seed)
    queries, _ = gaussian_mixture(num_queries, seed=seed + 1, centers=centers)
    train, _ = gaussian_mixture(num_train, seed=seed + 2, centers=centers)
    return Benchmark("gaussian-mixture", Dataset(base), Dataset(queries), Dataset(train))


def sift_like(n: int, seed: int = 0, model_seed: int = 7, clusters: int = 256,
              latent: int = 24) -> np.ndarray:
    """SIFT-flavoured surrogate: 128-d non-negative integer-valued float32.

    A low-dimensional latent factor model on top of a cluster mixture is
    pushed through a ReLU and scaled so rows have norms around 512, giving
    the sparse, skewed, integer-valued coordinates of SIFT descriptors.
    ``model_seed`` fixes the generating model; ``seed`` draws the points.
    """
    dim = 128
    mrng = np.random.default_rng(model_seed)
    offsets = mrng.standard_normal((clusters, dim)) * 0.8 - 0.3
    loadings = mrng.standard_normal((dim, latent)) / np.sqrt(latent)
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, clusters, size=n)
    z = rng.standard_normal((n, latent))
    h = offsets[comp] + z @ loadings.T + 0.25 * rng.standard_normal((n, dim))
    h = np.maximum(h, 0.0)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    x = np.rint(h / np.maximum(norms, 1e-9) * 512.0)
    return np.clip(x, 0, 255).astype(np.float32)


def benchmark_a(n: int = 100_000, num_queries: int = 1_000) -> Benchmark:
    """SIFT1M subset (first ``n`` base vectors), or the surrogate when absent."""
    root = os.environ.get(SIFT_ENV)
    if root:
        base = read_vector_file(os.path.join(root, "sift_base.fvecs"))
        queries = read_vector_file(os.path.join(root, "sift_query.fvecs"))
        return Benchmark("sift1m", base.subset(slice(0, n)), queries.subset(slice(0, num_queries)))
    return Benchmark("sift-like", Dataset(sift_like(n, seed=1)),
                     Dataset(sift_like(num_queries, seed=2)))
