"""Seeded random-walker segmentation on a 4-connected intensity lattice.

Edge weights are w = exp(-beta * (g_a - g_b)^2) with intensities
normalized to [0, 1]. Foreground probabilities solve the combinatorial
Dirichlet problem on the graph Laplacian: seeded pixels are pinned to
1 (foreground) or 0 (background) and every other pixel ends up at the
weight-normalized average of its neighbours.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import NoConvergence
from .maps import Image
from .morphology import StructElement, erode
from .refine import Refiner, RefinerCapabilities, RefineRequest, RefineResponse

logger = logging.getLogger(__name__)

# Keeps the lattice irreducible even across hard intensity edges.
WEIGHT_FLOOR = 1e-10

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 2000


@dataclass
class LatticeGraph:
    width: int
    height: int
    beta: float
    horizontal: np.ndarray  # (H, W-1) weights between (r, c) and (r, c+1)
    vertical: np.ndarray  # (H-1, W) weights between (r, c) and (r+1, c)


@dataclass
class SeedAssignment:
    foreground: np.ndarray  # flat row-major pixel indices
    background: np.ndarray

    def __post_init__(self):
        self.foreground = np.unique(np.asarray(self.foreground, dtype=np.int64))
        self.background = np.unique(np.asarray(self.background, dtype=np.int64))
        if self.foreground.size == 0 or self.background.size == 0:
            raise ValueError("both foreground and background seeds are required")
        if np.intersect1d(self.foreground, self.background).size:
            raise ValueError("foreground and background seeds must be disjoint")


def build_lattice(image: Image, beta: float) -> LatticeGraph:
    """Weight every 4-neighbour edge of the image grid."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    g = image.pixels.astype(np.float64) / 255.0
    horizontal = np.exp(-beta * (g[:, :-1] - g[:, 1:]) ** 2)
    vertical = np.exp(-beta * (g[:-1, :] - g[1:, :]) ** 2)
    return LatticeGraph(
        width=image.width,
        height=image.height,
        beta=beta,
        horizontal=np.maximum(horizontal, WEIGHT_FLOOR),
        vertical=np.maximum(vertical, WEIGHT_FLOOR),
    )


def lattice_laplacian(graph: LatticeGraph) -> sparse.csr_matrix:
    h, w = graph.height, graph.width
    n = h * w
    idx = np.arange(n).reshape(h, w)
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    weights = np.concatenate([graph.horizontal.ravel(), graph.vertical.ravel()])
    adj = sparse.coo_matrix((weights, (rows, cols)), shape=(n, n))
    adj = adj + adj.T
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (sparse.diags(degree) - adj).tocsr()


def _jacobi_cg(A: sparse.csr_matrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iter: int):
    """Jacobi-preconditioned CG. Converges when max_i |r_i| / deg_i <= tol.

    That stopping rule bounds the harmonicity defect of every unseeded
    pixel directly, independent of how small the local edge weights are.
    """
    diag = A.diagonal()
    x = x0.copy()
    r = b - A @ x
    z = r / diag
    p = z.copy()
    rz = float(r @ z)
    best_x = x.copy()
    best_res = float(np.max(np.abs(r) / diag)) if r.size else 0.0
    for iteration in range(max_iter):
        res = float(np.max(np.abs(r) / diag)) if r.size else 0.0
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res <= tol:
            return x, iteration, res
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x = x + alpha * p
        r = r - alpha * Ap
        z = r / diag
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = float(np.max(np.abs(r) / diag)) if r.size else 0.0
    if res < best_res:
        best_res, best_x = res, x
    raise NoConvergence(
        f"walker solve stopped at residual {best_res:.3e} > tol {tol:.3e} after {max_iter} iterations",
        best_plane=best_x,
        residual=best_res,
        iterations=max_iter,
    )


def solve_walker(
    graph: LatticeGraph,
    seeds: SeedAssignment,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    return_info: bool = False,
):
    """Per-pixel probability that a random walk first reaches a foreground seed.

    Seeded pixels are exactly 1/0 by construction. On NoConvergence the
    exception carries the best iterate embedded in the full plane.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    n = graph.height * graph.width
    L = lattice_laplacian(graph)

    values = np.zeros(n, dtype=np.float64)
    values[seeds.foreground] = 1.0
    seeded = np.zeros(n, dtype=bool)
    seeded[seeds.foreground] = True
    seeded[seeds.background] = True
    free = np.flatnonzero(~seeded)

    plane = values.reshape(graph.height, graph.width).copy()
    if free.size == 0:
        return (plane, {"iterations": 0, "residual": 0.0, "clamp_violation": 0.0}) if return_info else plane

    L_uu = L[free][:, free].tocsr()
    seeded_idx = np.flatnonzero(seeded)
    rhs = -(L[free][:, seeded_idx] @ values[seeded_idx])
    x0 = np.full(free.size, 0.5)
    try:
        x, iterations, residual = _jacobi_cg(L_uu, rhs, x0, tol, max_iter)
    except NoConvergence as exc:
        full = values.copy()
        full[free] = np.clip(exc.best_plane, 0.0, 1.0)
        exc.best_plane = full.reshape(graph.height, graph.width)
        raise

    clamp_violation = float(max(0.0, np.max(x) - 1.0, -np.min(x)))
    if clamp_violation > 0:
        logger.debug("walker clamped solution by up to %.3e", clamp_violation)
    values[free] = np.clip(x, 0.0, 1.0)
    plane = values.reshape(graph.height, graph.width)
    if return_info:
        return plane, {"iterations": iterations, "residual": residual, "clamp_violation": clamp_violation}
    return plane


def _border_ring(height: int, width: int) -> np.ndarray:
    frame = np.zeros((height, width), dtype=bool)
    frame[0, :] = frame[-1, :] = True
    frame[:, 0] = frame[:, -1] = True
    return np.flatnonzero(frame)


class RandomWalkRefiner(Refiner):
    """Intensity-based refinement backend implementing the refiner contract.

    Foreground seeds come from the dense prompt eroded by
    `seed_erosion_radius` (falling back to the dense mask itself, then the
    positive seed points, then the box center). Background seeds are the
    negative seed points plus the image border ring. The solved
    probability plane is thresholded at `threshold`.
    """

    def __init__(
        self,
        beta: float = 100.0,
        threshold: float = 0.5,
        seed_erosion_radius: int = 2,
        tol: float = DEFAULT_TOL,
        max_iter: int = DEFAULT_MAX_ITER,
    ):
        if beta <= 0:
            raise ValueError(f"beta must be positive, got {beta}")
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"threshold must lie strictly inside (0, 1), got {threshold}")
        self.beta = beta
        self.threshold = threshold
        self.seed_erosion_radius = seed_erosion_radius
        self.tol = tol
        self.max_iter = max_iter

    def capabilities(self) -> RefinerCapabilities:
        return RefinerCapabilities(accepts_points=True, accepts_box=True, accepts_dense=True)

    def _foreground_seeds(self, request: RefineRequest) -> np.ndarray:
        prompt = request.prompt
        w = request.image.width
        if prompt.dense_mask is not None and prompt.dense_mask.any():
            core = prompt.dense_mask
            if self.seed_erosion_radius >= 1:
                eroded = erode(core, StructElement("square", self.seed_erosion_radius))
                if eroded.any():
                    core = eroded
            return np.flatnonzero(core)
        positives = prompt.positive_points()
        if positives:
            return np.array([y * w + x for x, y in positives], dtype=np.int64)
        if prompt.box is not None:
            cx = (prompt.box.x0 + prompt.box.x1) // 2
            cy = (prompt.box.y0 + prompt.box.y1) // 2
            return np.array([cy * w + cx], dtype=np.int64)
        return np.array([], dtype=np.int64)

    def refine(self, request: RefineRequest) -> RefineResponse:
        image = request.image
        h, w = image.height, image.width
        fg = self._foreground_seeds(request)
        if fg.size == 0:
            logger.warning("class %d: no usable foreground seed, returning empty plane", request.prompt.class_id)
            return RefineResponse(mask=np.zeros((h, w), dtype=np.uint8), confidence=0.0)
        bg = _border_ring(h, w)
        negatives = request.prompt.negative_points()
        if negatives:
            bg = np.union1d(bg, np.array([y * w + x for x, y in negatives], dtype=np.int64))
        conflicts = np.intersect1d(fg, bg)
        if conflicts.size:
            logger.warning(
                "class %d: %d background seeds fall inside the foreground region, dropping them",
                request.prompt.class_id,
                conflicts.size,
            )
            bg = np.setdiff1d(bg, conflicts)
        if bg.size == 0:
            return RefineResponse(mask=np.ones((h, w), dtype=np.uint8), confidence=0.0)

        graph = build_lattice(image, self.beta)
        probs = solve_walker(graph, SeedAssignment(fg, bg), tol=self.tol, max_iter=self.max_iter)
        return RefineResponse(mask=(probs >= self.threshold).astype(np.uint8), confidence=None)


def random_walk_refiner(
    beta: float = 100.0,
    threshold: float = 0.5,
    seed_erosion_radius: int = 2,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> RandomWalkRefiner:
    return RandomWalkRefiner(beta, threshold, seed_erosion_radius, tol, max_iter)
