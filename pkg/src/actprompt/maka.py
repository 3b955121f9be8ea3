"""Late-interaction similarity between a set of frame embeddings and a set of
prompt embeddings.

For unit frame rows ``v_i`` and prompt rows ``c_j``::

    v2t(v, c) = mean_i max_j <v_i, c_j>      (each frame picks its best prompt)
    t2v(v, c) = mean_j max_i <v_i, c_j>      (each prompt picks its best frame)
    sim(v, c) = (v2t + t2v) / 2

Ties in ``max`` resolve to the lowest index. No temperature is applied here.

Two evaluation paths exist:

* the scalar path (:func:`sim_v2t`, :func:`sim_t2v`, :func:`maka_sim`) forms each
  dot product as a fixed-order reduction over ``d`` and sums maxima with
  :func:`math.fsum`, so it is exactly invariant to row permutations and to
  swapping the two arguments;
* :func:`batched_scores` computes all pairs with one GEMM per chunk of videos
  and agrees with the scalar path to ~1e-12.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DimMismatch, EmptyCategory, EmptyMatrix, NotNormalized, ZeroNorm
from .store import NORM_TOL, ZERO_NORM, EmbeddingMatrix

ArrayLike = EmbeddingMatrix | np.ndarray

# Fixed number of videos per GEMM; results never depend on the worker count.
CHUNK_VIDEOS = 16


def _as_f64(x: ArrayLike, what: str) -> np.ndarray:
    arr = x.data if isinstance(x, EmbeddingMatrix) else x
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise EmptyMatrix(f"{what} must be a non-empty 2-D matrix, got shape {a.shape}")
    return a


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a * a).sum(axis=-1))


def _unit(a: np.ndarray, what: str, *, require_unit: bool) -> np.ndarray:
    n = _norms(a)
    if not np.all(n > ZERO_NORM):
        raise ZeroNorm(f"{what} has a zero-norm row")
    if require_unit:
        dev = np.abs(n - 1.0)
        if dev.max() > NORM_TOL:
            i = int(np.argmax(dev))
            raise NotNormalized(f"{what} row {i} has norm {n[i]:.8f}; normalize embeddings first")
    # re-normalize in float64, as the reference procedure does before matching
    return a / n[:, None]


def _pair_grid(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    # (n_v, n_t); each entry reduces over d in a fixed order
    return (v[:, None, :] * c[None, :, :]).sum(axis=-1)


def _prepare_pair(v: ArrayLike, c: ArrayLike, *, require_unit: bool = True) -> tuple[np.ndarray, np.ndarray]:
    va = _as_f64(v, "frames")
    ca = _as_f64(c, "prompts")
    if va.shape[1] != ca.shape[1]:
        raise DimMismatch(f"frame dim {va.shape[1]} != prompt dim {ca.shape[1]}")
    return _unit(va, "frames", require_unit=require_unit), _unit(ca, "prompts", require_unit=require_unit)


def _v2t_from_grid(g: np.ndarray) -> tuple[float, np.ndarray]:
    idx = g.argmax(axis=1)
    best = g[np.arange(g.shape[0]), idx]
    return math.fsum(best.tolist()) / g.shape[0], idx


def _t2v_from_grid(g: np.ndarray) -> tuple[float, np.ndarray]:
    idx = g.argmax(axis=0)
    best = g[idx, np.arange(g.shape[1])]
    return math.fsum(best.tolist()) / g.shape[1], idx


def cosine_sim(a: np.ndarray | Sequence[float], b: np.ndarray | Sequence[float]) -> float:
    """Cosine similarity of two non-zero vectors."""
    va = np.asarray(a, dtype=np.float64).reshape(1, -1)
    vb = np.asarray(b, dtype=np.float64).reshape(1, -1)
    if va.shape != vb.shape:
        raise DimMismatch(f"vector lengths differ: {va.shape[1]} vs {vb.shape[1]}")
    if va.shape[1] == 0:
        raise EmptyMatrix("empty vectors")
    ua = _unit(va, "a", require_unit=False)
    ub = _unit(vb, "b", require_unit=False)
    return float(_pair_grid(ua, ub)[0, 0])


def relevancy_grid(v: ArrayLike, c: ArrayLike) -> np.ndarray:
    """All frame-prompt dot products, shape ``(n_v, n_t)``."""
    va, ca = _prepare_pair(v, c)
    return _pair_grid(va, ca)


def sim_v2t(v: ArrayLike, c: ArrayLike) -> tuple[float, np.ndarray]:
    """Video-to-category similarity and, per frame, the index of its best prompt."""
    return _v2t_from_grid(relevancy_grid(v, c))


def sim_t2v(v: ArrayLike, c: ArrayLike) -> tuple[float, np.ndarray]:
    """Category-to-video similarity and, per prompt, the index of its best frame."""
    return _t2v_from_grid(relevancy_grid(v, c))


def maka_components(v: ArrayLike, c: ArrayLike) -> tuple[float, float]:
    g = relevancy_grid(v, c)
    return _v2t_from_grid(g)[0], _t2v_from_grid(g)[0]


def maka_sim(v: ArrayLike, c: ArrayLike) -> float:
    v2t, t2v = maka_components(v, c)
    return 0.5 * (v2t + t2v)


def maka_from_unnormalized(z: np.ndarray, c_unit: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Score raw (not yet normalized) frame rows ``z`` against unit prompt rows.

    Returns ``(score, unit_frames, v2t_argmax, t2v_argmax)``. Used by adapter
    training so that frozen and adapted frames go through one normalization.
    """
    u = _unit(np.asarray(z, dtype=np.float64), "frames", require_unit=False)
    g = _pair_grid(u, c_unit)
    v2t, ia = _v2t_from_grid(g)
    t2v, ib = _t2v_from_grid(g)
    return 0.5 * (v2t + t2v), u, ia, ib


def mean_pool_sim(v: ArrayLike, c: ArrayLike) -> float:
    """Cosine between the renormalized mean frame and the renormalized mean prompt."""
    va, ca = _prepare_pair(v, c)
    mv = va.mean(axis=0, keepdims=True)
    mc = ca.mean(axis=0, keepdims=True)
    if not (_norms(mv)[0] > ZERO_NORM and _norms(mc)[0] > ZERO_NORM):
        raise ZeroNorm("mean embedding collapsed to zero")
    return float(_pair_grid(mv / _norms(mv)[:, None], mc / _norms(mc)[:, None])[0, 0])


@dataclass(frozen=True)
class CategoryScores:
    """Scores of one video against K categories."""

    values: np.ndarray
    v2t: np.ndarray | None = None
    t2v: np.ndarray | None = None


class RelevancyTensor:
    """Captured frame-prompt relevancies for a batch.

    Conceptually ``scores[b][k][t][v]``. Storage is one float32 matrix of all
    frames (rows) by all prompts (columns) plus segment offsets, which also
    covers ragged frame/prompt counts.
    """

    def __init__(
        self,
        grid: np.ndarray,
        frame_offsets: np.ndarray,
        prompt_offsets: np.ndarray,
        v2t_argmax: list[list[np.ndarray]],
        t2v_argmax: list[list[np.ndarray]],
    ):
        self.grid = grid
        self.frame_offsets = frame_offsets
        self.prompt_offsets = prompt_offsets
        self._v2t = v2t_argmax
        self._t2v = t2v_argmax
        for a in (self.grid, self.frame_offsets, self.prompt_offsets):
            a.setflags(write=False)

    @property
    def batch(self) -> int:
        return len(self.frame_offsets) - 1

    @property
    def categories(self) -> int:
        return len(self.prompt_offsets) - 1

    def frame_block(self, b: int, k: int) -> np.ndarray:
        """``(n_v, n_t)`` slice for video b, category k."""
        f0, f1 = self.frame_offsets[b], self.frame_offsets[b + 1]
        p0, p1 = self.prompt_offsets[k], self.prompt_offsets[k + 1]
        return self.grid[f0:f1, p0:p1]

    def scores(self, b: int, k: int) -> np.ndarray:
        """``(n_t, n_v)`` slice, i.e. ``scores[b][k]``."""
        return self.frame_block(b, k).T

    def v2t_argmax(self, b: int, k: int) -> np.ndarray:
        """Best prompt index for each frame of video b under category k."""
        return self._v2t[b][k]

    def t2v_argmax(self, b: int, k: int) -> np.ndarray:
        """Best frame index for each prompt of category k in video b."""
        return self._t2v[b][k]

    def dense(self) -> np.ndarray:
        """``(B, K, n_t, n_v)`` array; only when all videos and categories have equal sizes."""
        nv = set(np.diff(self.frame_offsets).tolist())
        nt = set(np.diff(self.prompt_offsets).tolist())
        if len(nv) != 1 or len(nt) != 1:
            raise DimMismatch("ragged batch has no dense form")
        B, K = self.batch, self.categories
        g = self.grid.reshape(B, nv.pop(), K, nt.pop())
        return np.ascontiguousarray(g.transpose(0, 2, 3, 1))


@dataclass(frozen=True)
class BatchScores:
    scores: np.ndarray  # (B, K) float64
    v2t: np.ndarray
    t2v: np.ndarray
    relevancy: RelevancyTensor | None = None

    def row(self, b: int) -> CategoryScores:
        return CategoryScores(self.scores[b], self.v2t[b], self.t2v[b])


def _prepare_many(mats: Sequence[ArrayLike], what: str, dim: int | None, empty_exc) -> tuple[list[np.ndarray], int]:
    out = []
    for i, m in enumerate(mats):
        arr = m.data if isinstance(m, EmbeddingMatrix) else np.asarray(m)
        if arr.ndim != 2 or arr.shape[0] == 0:
            if empty_exc is EmptyCategory:
                raise EmptyCategory(i)
            raise EmptyMatrix(f"{what} {i} is empty")
        a = np.asarray(arr, dtype=np.float64)
        if dim is None:
            dim = a.shape[1]
        if a.shape[1] != dim:
            raise DimMismatch(f"{what} {i} has dim {a.shape[1]}, expected {dim}")
        out.append(_unit(a, f"{what} {i}", require_unit=True))
    return out, dim


def _offsets(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([p.shape[0] for p in parts])]).astype(np.int64)


def batched_scores(
    videos: Sequence[ArrayLike],
    categories: Sequence[ArrayLike],
    *,
    capture: bool = False,
    jobs: int = 1,
) -> BatchScores:
    """Score B videos against K categories in one pass.

    Args:
        videos: frame matrices, one per video (row counts may differ).
        categories: prompt matrices, one per category (row counts may differ).
        capture: keep the full relevancy tensor and argmax indices.
        jobs: worker threads. BLAS is pinned to one thread per worker, and
            chunking is fixed, so output is bitwise independent of ``jobs``.
    """
    if not videos:
        raise EmptyMatrix("no videos")
    if not categories:
        raise EmptyCategory(0)
    cats, dim = _prepare_many(categories, "category", None, EmptyCategory)
    vids, _ = _prepare_many(videos, "video", dim, EmptyMatrix)
    P = np.vstack(cats)
    p_off = _offsets(cats)
    n_t = np.diff(p_off).astype(np.float64)
    K = len(cats)

    chunks = [vids[i : i + CHUNK_VIDEOS] for i in range(0, len(vids), CHUNK_VIDEOS)]

    def run(chunk: list[np.ndarray]):
        F = np.vstack(chunk)
        f_off = _offsets(chunk)
        G = F @ P.T
        row_max = np.maximum.reduceat(G, p_off[:-1], axis=1)  # (frames, K)
        v2t = np.add.reduceat(row_max, f_off[:-1], axis=0) / np.diff(f_off)[:, None]
        col_max = np.maximum.reduceat(G, f_off[:-1], axis=0)  # (videos, prompts)
        t2v = np.add.reduceat(col_max, p_off[:-1], axis=1) / n_t[None, :]
        if not capture:
            return v2t, t2v, None
        ia, ib = [], []
        for b in range(len(chunk)):
            rows = G[f_off[b] : f_off[b + 1]]
            ia.append([rows[:, p_off[k] : p_off[k + 1]].argmax(axis=1) for k in range(K)])
            ib.append([rows[:, p_off[k] : p_off[k + 1]].argmax(axis=0) for k in range(K)])
        return v2t, t2v, (G.astype(np.float32), ia, ib)

    with threadpool_limits(limits=1, user_api="blas"):
        if jobs > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(ch) for ch in chunks]

    v2t = np.vstack([p[0] for p in parts])
    t2v = np.vstack([p[1] for p in parts])
    scores = 0.5 * (v2t + t2v)
    rel = None
    if capture:
        rel = RelevancyTensor(
            grid=np.vstack([p[2][0] for p in parts]),
            frame_offsets=_offsets(vids),
            prompt_offsets=p_off,
            v2t_argmax=[x for p in parts for x in p[2][1]],
            t2v_argmax=[x for p in parts for x in p[2][2]],
        )
    return BatchScores(scores=scores, v2t=v2t, t2v=t2v, relevancy=rel)


def batched_mean_pool(videos: Sequence[ArrayLike], categories: Sequence[ArrayLike]) -> np.ndarray:
    """Mean-pool baseline for a whole batch, shape ``(B, K)``."""
    cats, dim = _prepare_many(categories, "category", None, EmptyCategory)
    vids, _ = _prepare_many(videos, "video", dim, EmptyMatrix)

    def pooled(mats):
        m = np.vstack([x.mean(axis=0) for x in mats])
        n = _norms(m)
        if not np.all(n > ZERO_NORM):
            raise ZeroNorm("mean embedding collapsed to zero")
        return m / n[:, None]

    return pooled(vids) @ pooled(cats).T
