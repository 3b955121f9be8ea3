"""Frame-to-prompt relevancy maps and top prompts per frame, exported as CSV or JSON."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._io import atomic_write_text, dump_json
from .errors import BadParams, NotCaptured
from .inference import CategoryBank, PromptMeta
from .maka import BatchScores, batched_scores
from .store import VideoRecord, stack_rows

ARGMAX_TOL = 1e-7


@dataclass
class AttributionMap:
    """Relevancy of every (frame, prompt) pair for one video and one category.

    ``grid`` is ``(n_v, n_t)``; ``row_argmax[i]`` is frame ``i``'s best prompt and
    ``col_argmax[j]`` prompt ``j``'s best frame.
    """

    video_id: str
    category: str
    grid: np.ndarray
    row_argmax: np.ndarray
    col_argmax: np.ndarray
    prompt_meta: list[PromptMeta]

    def __post_init__(self) -> None:
        g = np.asarray(self.grid)
        if g.ndim != 2 or 0 in g.shape:
            raise BadParams(f"grid must be a non-empty 2-D array, got shape {g.shape}")
        if len(self.prompt_meta) != g.shape[1]:
            raise BadParams(f"{g.shape[1]} prompt columns but {len(self.prompt_meta)} labels")
        rows = g[np.arange(g.shape[0]), self.row_argmax]
        cols = g[self.col_argmax, np.arange(g.shape[1])]
        if np.any(np.abs(rows - g.max(axis=1)) > ARGMAX_TOL) or np.any(np.abs(cols - g.max(axis=0)) > ARGMAX_TOL):
            raise BadParams("argmax indices do not point at the row/column maxima")

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.prompt_meta]

    @property
    def v2t(self) -> float:
        return float(self.grid.max(axis=1).astype(np.float64).mean())

    @property
    def t2v(self) -> float:
        return float(self.grid.max(axis=0).astype(np.float64).mean())

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "category": self.category,
            "grid": [[float(x) for x in row] for row in self.grid],
            "row_argmax": [int(i) for i in self.row_argmax],
            "col_argmax": [int(i) for i in self.col_argmax],
            "prompt_meta": [{"attribute": m.attribute, "template_id": m.template_id, "text": m.text} for m in self.prompt_meta],
        }


def build_map(
    scores: BatchScores,
    b: int,
    k: int,
    *,
    video_id: str = "",
    category: str = "",
    prompt_meta: Sequence[PromptMeta] | None = None,
) -> AttributionMap:
    """Take the captured relevancy slice for video ``b`` and category ``k``."""
    rel = scores.relevancy
    if rel is None:
        raise NotCaptured("scores were computed without capture=True")
    grid = rel.frame_block(b, k)
    meta = list(prompt_meta) if prompt_meta is not None else [PromptMeta("", 0)] * grid.shape[1]
    return AttributionMap(video_id, category, grid, rel.v2t_argmax(b, k), rel.t2v_argmax(b, k), meta)


def attribute(record: VideoRecord, bank: CategoryBank, category: str | int) -> tuple[AttributionMap, float]:
    """Map for one video (all views' frames concatenated) against one category.

    Returns the map and the category's MAKA score.
    """
    k = category if isinstance(category, int) else bank.index(category)
    frames = record.views[0] if len(record.views) == 1 else stack_rows(record.views)
    scores = batched_scores([frames], [bank.prompts[k]], capture=True)
    m = build_map(scores, 0, 0, video_id=record.video_id, category=bank.names[k], prompt_meta=bank.meta[k])
    return m, float(scores.scores[0, 0])


def top_prompts_per_frame(m: AttributionMap, k: int = 5) -> list[list[tuple[int, str, float]]]:
    """Per frame, up to ``k`` ``(column, label, score)`` by score descending, ties by column."""
    if k < 1:
        raise BadParams("k must be >= 1")
    cols = np.arange(m.grid.shape[1])
    out = []
    for row in m.grid:
        order = np.lexsort((cols, -row))[:k]
        out.append([(int(j), m.prompt_meta[j].label, float(row[j])) for j in order])
    return out


def to_csv(m: AttributionMap) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", *m.labels])
    for i, row in enumerate(m.grid):
        w.writerow([i, *(f"{float(x):.6f}" for x in row)])
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][:1] != ["frame"]:
        raise BadParams("not an attribution CSV")
    grid = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return rows[0][1:], grid


def export(m: AttributionMap, path: str | os.PathLike, fmt: str = "csv") -> None:
    if fmt == "csv":
        text = to_csv(m)
    elif fmt == "json":
        d = m.to_dict()
        d["top_prompts"] = [[{"column": j, "label": lab, "score": s} for j, lab, s in frame] for frame in top_prompts_per_frame(m)]
        text = dump_json(d)
    else:
        raise BadParams(f"unknown export format {fmt!r}")
    atomic_write_text(path, text)
