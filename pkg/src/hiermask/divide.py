"""Top-down stage: patch affinities and iterative normalized-cut extraction.

Coarse masks are peeled off one at a time: solve for the second-smallest
generalized eigenvector of the affinity graph Laplacian, bipartition it at
its mean, and mask the claimed patches out of the affinity before the next
cut. Cuts whose foreground looks like background (covers >= 3 grid corners)
are retried with their complement; degenerate cuts end the extraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from hiermask.features import FeatureGrid
from hiermask.masks import BinaryMask, ScoredMask, rle_encode

DEFAULT_TAU_NCUT = 0.15
DEFAULT_EPSILON = 1e-5
DEFAULT_T_MAX = 3
MIN_MASK_PATCHES = 2
DENSE_EIG_CUTOFF = 4096


class EigensolverError(RuntimeError):
    """Iterative eigensolver failed to reach the requested residual."""


class DegenerateEigenvectorError(ValueError):
    """Eigenvector cannot be bipartitioned (one side would be empty)."""


@dataclass(frozen=True, eq=False)
class AffinityMatrix:
    """Symmetric patch affinity with strictly positive entries in [eps, 1]."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"affinity must be square, got shape {arr.shape}")
        if not np.array_equal(arr, arr.T):
            raise ValueError("affinity must be exactly symmetric")
        if arr.size and (arr.min() <= 0.0 or arr.max() > 1.0):
            raise ValueError("affinity entries must lie in (0, 1]")
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)

    @property
    def n(self) -> int:
        return int(self.entries.shape[0])


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"patch {int(zero[0])} has zero-norm feature")
    return x / norms[:, None]


def _raw_cosine(grid: FeatureGrid) -> np.ndarray:
    """Symmetrized, clipped pairwise cosine similarity of all patches."""
    u = _unit_rows(grid.flat())
    raw = u @ u.T
    raw = (raw + raw.T) / 2.0  # BLAS output is not guaranteed symmetric
    return np.clip(raw, -1.0, 1.0)


def cosine_affinity(
    grid: FeatureGrid,
    tau_ncut: float = DEFAULT_TAU_NCUT,
    epsilon: float = DEFAULT_EPSILON,
) -> AffinityMatrix:
    """Binarized-with-floor cosine affinity: 1 where cos >= tau_ncut, else epsilon."""
    if not (0.0 < epsilon < tau_ncut < 1.0):
        raise ValueError(f"need 0 < epsilon < tau_ncut < 1, got {epsilon}, {tau_ncut}")
    raw = _raw_cosine(grid)
    entries = np.where(raw >= tau_ncut, 1.0, epsilon)
    return AffinityMatrix(entries)


def mask_affinity(
    w: AffinityMatrix,
    excluded: Iterable[int],
    epsilon: float = DEFAULT_EPSILON,
) -> AffinityMatrix:
    """Suppress rows/columns of excluded patches to the epsilon floor.

    Diagonal entries of excluded patches stay 1 so every degree remains
    positive. With no excluded patches the affinity is returned unchanged.
    """
    idx = np.asarray(sorted(set(int(i) for i in excluded)), dtype=np.int64)
    if idx.size == 0:
        return w
    if idx[0] < 0 or idx[-1] >= w.n:
        raise ValueError(f"excluded patch index out of range [0, {w.n})")
    entries = w.entries.copy()
    entries[idx, :] = epsilon
    entries[:, idx] = epsilon
    entries[idx, idx] = 1.0
    return AffinityMatrix(entries)


def ncut_second_eigvec(
    w: AffinityMatrix,
    dense_cutoff: int = DENSE_EIG_CUTOFF,
    tol: float = 1e-8,
    max_iter: int = 10000,
) -> np.ndarray:
    """Second-smallest generalized eigenvector of (D - W) x = lam * D x.

    Solved through the symmetric normalized Laplacian I - D^-1/2 W D^-1/2
    and back-transformed. The result has unit 2-norm with its largest-|x_i|
    component made positive. Small problems use a dense solver; larger ones
    use shift-inverted power iteration with the trivial eigenvector deflated.
    """
    n = w.n
    d = w.entries.sum(axis=1)
    inv_sqrt_d = 1.0 / np.sqrt(d)
    lap = -(inv_sqrt_d[:, None] * w.entries) * inv_sqrt_d[None, :]
    lap[np.diag_indices(n)] += 1.0
    lap = (lap + lap.T) / 2.0

    if n <= dense_cutoff:
        _, vecs = scipy.linalg.eigh(lap, subset_by_index=[0, 1])
        y = vecs[:, 1]
    else:
        y = _second_eigvec_iterative(lap, inv_sqrt_d, d, tol, max_iter)

    x = inv_sqrt_d * y
    x = x / np.linalg.norm(x)
    if x[int(np.argmax(np.abs(x)))] < 0:
        x = -x
    return x


def _second_eigvec_iterative(
    lap: np.ndarray,
    inv_sqrt_d: np.ndarray,
    d: np.ndarray,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Deflated shift-inverted power iteration on the normalized Laplacian.

    The trivial eigenvector v0 = D^1/2 1 (eigenvalue 0) is projected out;
    inverse iteration at shift 0 then converges to the second-smallest pair.
    Inner solves use conjugate gradients restricted to the deflated subspace.
    """
    n = lap.shape[0]
    v0 = np.sqrt(d)
    v0 = v0 / np.linalg.norm(v0)

    def project(vec: np.ndarray) -> np.ndarray:
        return vec - v0 * (v0 @ vec)

    op = scipy.sparse.linalg.LinearOperator(
        (n, n), matvec=lambda vec: project(lap @ project(vec)), dtype=np.float64
    )
    rng = np.random.default_rng(0)
    y = project(rng.standard_normal(n))
    y /= np.linalg.norm(y)
    residual = np.inf
    for _ in range(max_iter):
        z, _ = scipy.sparse.linalg.cg(op, y, rtol=min(1e-2, tol), atol=0.0, maxiter=10 * n)
        z = project(z)
        norm = np.linalg.norm(z)
        if norm == 0.0:
            raise EigensolverError("inverse iteration collapsed onto the deflated subspace")
        y = z / norm
        lam = float(y @ (lap @ y))
        residual = float(np.linalg.norm(lap @ y - lam * y))
        if residual <= tol:
            return y
    raise EigensolverError(
        f"eigensolver did not converge within {max_iter} iterations "
        f"(residual {residual:.3e}, tol {tol:.1e})"
    )


def _split_above_mean(x: np.ndarray) -> np.ndarray:
    """Boolean foreground side of the mean-threshold bipartition of x."""
    above = x >= x.mean()
    if bool(above.all()) or not bool(above.any()):
        raise DegenerateEigenvectorError("degenerate eigenvector: bipartition has an empty side")
    peak = int(np.argmax(np.abs(x)))
    return above if above[peak] else ~above


def _patches_to_mask(fg: np.ndarray, gh: int, gw: int, patch_size: int) -> BinaryMask:
    pixels = np.repeat(np.repeat(fg.reshape(gh, gw), patch_size, axis=0), patch_size, axis=1)
    return rle_encode(pixels)


def bipartition(x: np.ndarray, gh: int, gw: int, patch_size: int) -> BinaryMask:
    """Mean-threshold split of an eigenvector, upsampled to a pixel mask.

    The side containing the largest-|x_i| component is foreground, so x and
    -x produce the same mask. Raises DegenerateEigenvectorError when the
    split would leave one side empty.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (gh * gw,):
        raise ValueError(f"eigenvector length {x.shape} does not match {gh}x{gw} grid")
    return _patches_to_mask(_split_above_mean(x), gh, gw, patch_size)


def _corner_count(member: np.ndarray, gh: int, gw: int) -> int:
    corners = (0, gw - 1, (gh - 1) * gw, gh * gw - 1)
    return int(sum(bool(member[c]) for c in corners))


def _mean_pairwise_cosine(raw: np.ndarray, idx: np.ndarray) -> float:
    sub = raw[np.ix_(idx, idx)]
    k = idx.size
    total = float(sub.sum() - np.trace(sub))
    return total / (k * (k - 1))


def iterative_ncut(
    grid: FeatureGrid,
    t_max: int = DEFAULT_T_MAX,
    tau_ncut: float = DEFAULT_TAU_NCUT,
    epsilon: float = DEFAULT_EPSILON,
    min_patches: int = MIN_MASK_PATCHES,
) -> List[ScoredMask]:
    """Extract up to ``t_max`` disjoint coarse masks by repeated normalized cuts.

    After each accepted cut the claimed patches are suppressed in the
    affinity (see mask_affinity) before the next eigensolve. A cut whose
    foreground covers >= 3 of the 4 grid corners is swapped for its
    complement; cuts smaller than ``min_patches`` or degenerate eigenvectors
    stop the extraction (the affinity would not change, so retrying at the
    next iteration cannot make progress). Mask scores are the mean pairwise
    raw cosine similarity of the claimed patches, clamped to [0, 1].
    """
    if t_max < 1:
        raise ValueError(f"t_max must be >= 1, got {t_max}")
    if not (0.0 < epsilon < tau_ncut < 1.0):
        raise ValueError(f"need 0 < epsilon < tau_ncut < 1, got {epsilon}, {tau_ncut}")
    gh, gw, ps = grid.gh, grid.gw, grid.patch_size
    raw = _raw_cosine(grid)
    w = AffinityMatrix(np.where(raw >= tau_ncut, 1.0, epsilon))

    claimed = np.zeros(grid.n_patches, dtype=bool)
    out: List[ScoredMask] = []
    for _ in range(t_max):
        off_diag = w.entries[~np.eye(w.n, dtype=bool)]
        if off_diag.max() == off_diag.min():
            break  # structureless affinity: any cut is arbitrary
        try:
            x = ncut_second_eigvec(w)
            side = _split_above_mean(x)
        except DegenerateEigenvectorError:
            break
        candidate = side & ~claimed
        if _corner_count(candidate, gh, gw) >= 3:
            candidate = ~side & ~claimed
        if _corner_count(candidate, gh, gw) >= 3 or candidate.sum() < min_patches:
            break
        idx = np.flatnonzero(candidate)
        score = float(np.clip(_mean_pairwise_cosine(raw, idx), 0.0, 1.0))
        mask = _patches_to_mask(candidate, gh, gw, ps)
        out.append(ScoredMask(mask=mask, score=score, level=0))
        claimed |= candidate
        w = mask_affinity(w, idx, epsilon)
    return out


def divide_stage(
    source: Union[FeatureGrid, Sequence[ScoredMask]],
    tau: float = 0.3,
    *,
    t_max: int = DEFAULT_T_MAX,
    tau_ncut: float = DEFAULT_TAU_NCUT,
    epsilon: float = DEFAULT_EPSILON,
) -> List[ScoredMask]:
    """Coarse masks from normalized cuts or ingested proposals, kept if score > tau."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if isinstance(source, FeatureGrid):
        masks: Sequence[ScoredMask] = iterative_ncut(
            source, t_max=t_max, tau_ncut=tau_ncut, epsilon=epsilon
        )
    else:
        masks = list(source)
    return [m for m in masks if m.score > tau]
