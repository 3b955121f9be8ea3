"""Linear adapter on frozen frame embeddings, trained with cross-entropy over MAKA scores.

Each frame row ``x`` maps to ``normalize(W x + b)``; prompts stay frozen. The
loss for one video with true category ``y`` is ``-log softmax(s / tau)[y]``
where ``s_k`` is the MAKA score against category ``k``, averaged over a batch.
Gradients are analytic; ``max`` routes gradient to its lowest-index maximizer.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import BadParams, DimMismatch, EmptyInput, FormatError, NonFiniteLoss, UnknownLabel
from .inference import CategoryBank
from .maka import _unit
from .store import FLAG_ADAPTER, FLAG_ADAPTER_BIAS, EmbeddingMatrix, VideoRecord, l2_normalize, read_raw, write_raw

logger = logging.getLogger(__name__)


@dataclass
class LinearAdapter:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.weight = np.array(self.weight, dtype=np.float64)
        d = self.weight.shape[0]
        if self.weight.shape != (d, d):
            raise DimMismatch(f"adapter weight must be square, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64)
            if self.bias.shape != (d,):
                raise DimMismatch(f"adapter bias must have shape ({d},), got {self.bias.shape}")

    @classmethod
    def identity(cls, dim: int, *, bias: bool = True) -> "LinearAdapter":
        return cls(np.eye(dim), np.zeros(dim) if bias else None)

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def raw(self, frames: np.ndarray) -> np.ndarray:
        """``W x + b`` per row, before normalization."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[-1] != self.dim:
            raise DimMismatch(f"frame dim {frames.shape[-1]} != adapter dim {self.dim}")
        z = frames @ self.weight.T
        if self.bias is not None:
            z = z + self.bias
        return z

    def apply(self, m: EmbeddingMatrix | np.ndarray) -> EmbeddingMatrix:
        data = m.data if isinstance(m, EmbeddingMatrix) else m
        return l2_normalize(self.raw(data))

    def apply_record(self, rec: VideoRecord) -> VideoRecord:
        return VideoRecord(rec.video_id, tuple(self.apply(v) for v in rec.views), rec.label)

    def copy(self) -> "LinearAdapter":
        return LinearAdapter(self.weight.copy(), None if self.bias is None else self.bias.copy())

    def save(self, path: str | os.PathLike) -> str:
        """Stored as float32 rows: the d weight rows, then the bias row if present."""
        rows = self.weight if self.bias is None else np.vstack([self.weight, self.bias[None, :]])
        flags = FLAG_ADAPTER | (FLAG_ADAPTER_BIAS if self.bias is not None else 0)
        return write_raw(path, rows, normalized=False, flags=flags)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LinearAdapter":
        head, arr = read_raw(path)
        if not head.flags & FLAG_ADAPTER:
            raise FormatError(f"{path}: not an adapter file")
        has_bias = bool(head.flags & FLAG_ADAPTER_BIAS)
        if head.rows != head.dim + int(has_bias):
            raise FormatError(f"{path}: {head.rows} rows does not fit a {head.dim}-dim adapter")
        arr = arr.astype(np.float64)
        return cls(arr[: head.dim], arr[head.dim] if has_bias else None)


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    temperature: float = 0.07
    seed: int = 0
    weight_decay: float = 0.001
    bias: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise BadParams("learning_rate and weight_decay must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise BadParams("epochs must be >= 0 and batch_size >= 1")
        if not self.temperature > 0:
            raise BadParams(f"temperature must be positive, got {self.temperature}")


def _frames(v) -> np.ndarray:
    if isinstance(v, VideoRecord):
        return np.vstack([m.data for m in v.views]).astype(np.float64)
    if isinstance(v, EmbeddingMatrix):
        return v.data.astype(np.float64)
    return np.asarray(v, dtype=np.float64)


class _Problem:
    """Frames, label ids and stacked unit prompts, prepared once."""

    def __init__(self, videos, labels, bank: CategoryBank):
        if len(videos) == 0:
            raise EmptyInput("no training videos")
        if len(videos) != len(labels):
            raise BadParams(f"{len(videos)} videos but {len(labels)} labels")
        self.x = [_frames(v) for v in videos]
        self.y = [self._label_id(lab, bank) for lab in labels]
        cats = [_unit(m.data.astype(np.float64), "prompts", require_unit=True) for m in bank.prompts]
        self.prompts = np.vstack(cats)
        self.offsets = np.concatenate([[0], np.cumsum([c.shape[0] for c in cats])])
        self.K = len(cats)
        self.uniform = len({c.shape[0] for c in cats}) == 1
        if any(x.shape[1] != self.prompts.shape[1] for x in self.x):
            raise DimMismatch("frame and prompt dims differ")

    @staticmethod
    def _label_id(lab, bank: CategoryBank) -> int:
        if isinstance(lab, (int, np.integer)):
            if not 0 <= lab < len(bank):
                raise UnknownLabel(f"label id {lab} out of range for {len(bank)} categories")
            return int(lab)
        try:
            return bank.index(lab)
        except KeyError:
            raise UnknownLabel(f"label {lab!r} not in bank") from None

    def forward(self, i: int, adapter: LinearAdapter | None):
        """Scores (K,), unit frames, per-category argmaxes and row norms for sample ``i``.

        With equal prompt counts ``arg`` is ``(ia, ib)``, best prompt per frame
        ``(n_v, K)`` and best frame per prompt ``(K, n_t)``; otherwise it is a
        list of such pairs, one per category.
        """
        z = self.x[i] if adapter is None else adapter.raw(self.x[i])
        u = _unit(z, "frames", require_unit=False)
        g = u @ self.prompts.T
        if self.uniform:
            n_v, n_t = g.shape[0], self.offsets[1]
            blocks = g.reshape(n_v, self.K, n_t)
            ia = blocks.argmax(axis=2)  # (n_v, K)
            ib = blocks.argmax(axis=0)  # (K, n_t)
            v2t = np.take_along_axis(blocks, ia[:, :, None], axis=2)[:, :, 0].mean(axis=0)
            t2v = np.take_along_axis(blocks, ib[None, :, :], axis=0)[0].mean(axis=1)
            arg = (ia, ib)
            s = 0.5 * (v2t + t2v)
        else:
            s = np.empty(self.K)
            arg = []
            for k in range(self.K):
                blk = g[:, self.offsets[k] : self.offsets[k + 1]]
                ia, ib = blk.argmax(axis=1), blk.argmax(axis=0)
                v2t = blk[np.arange(blk.shape[0]), ia].mean()
                t2v = blk[ib, np.arange(blk.shape[1])].mean()
                s[k] = 0.5 * (v2t + t2v)
                arg.append((ia, ib))
        return s, u, arg, np.sqrt(np.einsum("ij,ij->i", z, z))

    def sample_loss(self, s: np.ndarray, y: int, tau: float) -> tuple[float, np.ndarray]:
        a = s / tau
        m = a.max()
        lse = m + math.log(np.exp(a - m).sum())
        p = np.exp(a - lse)
        return lse - a[y], p


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def ce_loss(videos, labels, bank: CategoryBank, adapter: LinearAdapter | None = None, tau: float = 0.07) -> float:
    """Mean cross-entropy over the batch; ``adapter=None`` scores the frozen embeddings."""
    if not tau > 0:
        raise BadParams(f"temperature must be positive, got {tau}")
    prob = _Problem(videos, labels, bank)
    return _loss(prob, range(len(prob.x)), adapter, tau)


def _loss(prob: _Problem, idx, adapter, tau) -> float:
    losses = []
    for i in idx:
        s = prob.forward(i, adapter)[0]
        losses.append(prob.sample_loss(s, prob.y[i], tau)[0])
    return _mean(losses)


def _sample_grad(prob: _Problem, i: int, adapter: LinearAdapter, tau: float):
    s, u, arg, znorm = prob.forward(i, adapter)
    loss, p = prob.sample_loss(s, prob.y[i], tau)
    ds = p.copy()
    ds[prob.y[i]] -= 1.0
    ds /= tau
    n_v = u.shape[0]
    w = 0.5 * ds
    if prob.uniform:
        ia, ib = arg
        n_t = prob.offsets[1]
        c = prob.prompts.reshape(prob.K, n_t, -1)
        # v2t: frame i takes its best prompt in each category
        gu = np.einsum("k,ikd->id", w, c[np.arange(prob.K)[None, :], ia]) / n_v
        # t2v: prompt j sends gradient to its best frame
        route = np.zeros((n_v, prob.K * n_t))
        route[ib.ravel(), np.arange(prob.K * n_t)] = 1.0
        gu += route @ (np.repeat(w / n_t, n_t)[:, None] * prob.prompts)
    else:
        gu = np.zeros_like(u)
        for k in range(prob.K):
            c = prob.prompts[prob.offsets[k] : prob.offsets[k + 1]]
            ia, ib = arg[k]
            gk = c[ia] / n_v
            np.add.at(gk, ib, c / c.shape[0])
            gu += w[k] * gk
    # through u = z / |z|
    radial = np.einsum("ij,ij->i", gu, u)
    gz = (gu - radial[:, None] * u) / znorm[:, None]
    gw = gz.T @ prob.x[i]
    gb = gz.sum(axis=0) if adapter.bias is not None else None
    return loss, gw, gb


def _batch_grad(prob: _Problem, idx: Sequence[int], adapter: LinearAdapter, tau: float):
    gw = np.zeros_like(adapter.weight)
    gb = None if adapter.bias is None else np.zeros_like(adapter.bias)
    losses = []
    for i in idx:
        loss, w, b = _sample_grad(prob, i, adapter, tau)
        losses.append(loss)
        gw += w
        if gb is not None:
            gb += b
    n = len(idx)
    return _mean(losses), gw / n, (None if gb is None else gb / n)


def grad(videos, labels, bank: CategoryBank, adapter: LinearAdapter, tau: float = 0.07):
    """Returns ``(loss, dL/dW, dL/db)``; ``dL/db`` is None for a bias-free adapter."""
    if not tau > 0:
        raise BadParams(f"temperature must be positive, got {tau}")
    prob = _Problem(videos, labels, bank)
    return _batch_grad(prob, range(len(prob.x)), adapter, tau)


def accuracy(videos, labels, bank: CategoryBank, adapter: LinearAdapter | None = None) -> float:
    """Top-1 accuracy in [0, 1]; ties go to the lower category id."""
    prob = _Problem(videos, labels, bank)
    hits = sum(int(np.argmax(prob.forward(i, adapter)[0]) == prob.y[i]) for i in range(len(prob.x)))
    return hits / len(prob.x)


@dataclass
class TrainResult:
    adapter: LinearAdapter
    losses: list[float] = field(default_factory=list)  # index 0 is the untrained loss

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, loss in enumerate(self.losses):
            w.writerow([e, repr(float(loss))])
        return buf.getvalue()

    def write_curve(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.curve_csv())


def train(
    videos,
    labels,
    bank: CategoryBank,
    config: TrainConfig | None = None,
    adapter: LinearAdapter | None = None,
) -> TrainResult:
    """Mini-batch SGD with decoupled weight decay (bias is not decayed).

    The shuffle comes from ``numpy.random.default_rng(config.seed)``, and
    per-sample gradients are summed in batch order, so runs are bitwise
    reproducible. ``losses[e]`` is the full-set loss after epoch ``e``.
    """
    config = config or TrainConfig()
    prob = _Problem(videos, labels, bank)
    adapter = adapter.copy() if adapter is not None else LinearAdapter.identity(prob.prompts.shape[1], bias=config.bias)
    rng = np.random.default_rng(config.seed)
    n = len(prob.x)
    tau, lr, wd = config.temperature, config.learning_rate, config.weight_decay
    losses = [_loss(prob, range(n), adapter, tau)]
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, gw, gb = _batch_grad(prob, idx, adapter, tau)
            if not math.isfinite(loss) or not np.isfinite(gw).all():
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {start}: loss {loss}, |W| {np.linalg.norm(adapter.weight):.4g}"
                )
            with np.errstate(over="ignore", invalid="ignore"):
                adapter.weight -= lr * gw + lr * wd * adapter.weight
            if gb is not None:
                adapter.bias -= lr * gb
            if not np.isfinite(adapter.weight).all() or (gb is not None and not np.isfinite(adapter.bias).all()):
                raise NonFiniteLoss(f"epoch {epoch}, batch at {start}: parameters diverged (last loss {loss})")
        full = _loss(prob, range(n), adapter, tau)
        if not math.isfinite(full):
            raise NonFiniteLoss(f"epoch {epoch}: full-set loss {full}")
        logger.info("epoch %d loss %.6f", epoch, full)
        losses.append(full)
    return TrainResult(adapter, losses)
