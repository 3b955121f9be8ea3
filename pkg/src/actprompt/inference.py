"""Predictions from MAKA scores: view assembly, temperature softmax, top-k ranking."""

from __future__ import annotations

import enum
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import BadParams, DimMismatch, EmptyAfterFilter, EmptyBank, ManifestError
from .maka import batched_mean_pool, batched_scores
from .prompt_gen.bank import PromptBank
from .store import EmbeddingManifest, EmbeddingMatrix, VideoRecord, stack_rows

logger = logging.getLogger(__name__)


class ViewPolicy(str, enum.Enum):
    CONCAT_FRAMES = "concat_frames"
    AVERAGE_VIEW_LOGITS = "average_view_logits"


class Method(str, enum.Enum):
    MAKA = "maka"
    MEAN_POOL = "mean_pool"


@dataclass
class InferenceConfig:
    temperature: float = 0.01
    view_policy: ViewPolicy = ViewPolicy.CONCAT_FRAMES
    top_k: int = 5
    attribute_filter: Sequence[str] | None = None
    template_filter: Sequence[int] | None = None
    method: Method = Method.MAKA

    def __post_init__(self) -> None:
        if not (self.temperature > 0 and np.isfinite(self.temperature)):
            raise BadParams(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 1:
            raise BadParams(f"top_k must be >= 1, got {self.top_k}")
        try:
            self.view_policy = ViewPolicy(self.view_policy)
            self.method = Method(self.method)
        except ValueError as exc:
            raise BadParams(str(exc)) from exc


@dataclass(frozen=True)
class PromptMeta:
    attribute: str
    template_id: int
    text: str = ""

    @property
    def label(self) -> str:
        return f"{self.attribute}:{self.template_id}"


@dataclass
class CategoryBank:
    """Unit prompt embeddings per category, with per-row (attribute, template) labels.

    Category ids are positions in ``names``.
    """

    names: list[str]
    prompts: list[EmbeddingMatrix]
    meta: list[list[PromptMeta]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.names:
            raise EmptyBank("bank has no categories")
        if len(self.prompts) != len(self.names):
            raise BadParams("names and prompt matrices differ in length")
        if len(set(self.names)) != len(self.names):
            raise BadParams("duplicate category names")
        if not self.meta:
            self.meta = [[PromptMeta("", 0)] * m.rows for m in self.prompts]
        for name, m, meta in zip(self.names, self.prompts, self.meta):
            if len(meta) != m.rows:
                raise BadParams(f"category {name!r}: {m.rows} rows but {len(meta)} labels")
        dims = {m.dim for m in self.prompts}
        if len(dims) != 1:
            raise DimMismatch(f"prompt dims differ across categories: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.prompts[0].dim

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def filtered(self, attributes: Iterable[str] | None = None, templates: Iterable[int] | None = None) -> "CategoryBank":
        """Keep prompt rows whose attribute and template pass the filters, preserving order."""
        if attributes is None and templates is None:
            return self
        attrs = set(attributes) if attributes is not None else None
        tids = {int(t) for t in templates} if templates is not None else None
        prompts, meta = [], []
        for name, m, labels in zip(self.names, self.prompts, self.meta):
            keep = [
                i
                for i, p in enumerate(labels)
                if (attrs is None or p.attribute in attrs) and (tids is None or p.template_id in tids)
            ]
            if not keep:
                raise EmptyAfterFilter(f"no prompts left for category {name!r}")
            if len(keep) == m.rows:
                prompts.append(m)
            else:
                prompts.append(EmbeddingMatrix(m.data[keep], normalized=m.normalized))
            meta.append([labels[i] for i in keep])
        return CategoryBank(list(self.names), prompts, meta)

    @classmethod
    def from_prompt_bank(cls, bank: PromptBank, manifest: EmbeddingManifest, *, verify: bool = False) -> "CategoryBank":
        """Pair a prompt bank with its embedding manifest (one entry per action, rows in bank order)."""
        names, prompts, meta = [], [], []
        for action, entries in bank.entries.items():
            if action not in manifest:
                raise ManifestError(f"no prompt embeddings for action {action!r}")
            m = manifest.load(action, verify=verify)
            if m.rows != len(entries):
                raise ManifestError(f"action {action!r}: {m.rows} embeddings for {len(entries)} prompts")
            names.append(action)
            prompts.append(m)
            meta.append([PromptMeta(p.attribute, p.template_id, p.final_text) for p in entries])
        return cls(names, prompts, meta)

    @classmethod
    def load(cls, bank_path: str | os.PathLike, prompt_manifest: str | os.PathLike | None = None) -> "CategoryBank":
        """Load from a bank JSON; the manifest defaults to the bank's ``prompt_embeddings`` field."""
        bank = PromptBank.load(bank_path)
        if prompt_manifest is None:
            if not bank.prompt_embeddings:
                raise ManifestError(f"{bank_path}: bank has no prompt_embeddings; pass a prompt manifest")
            prompt_manifest = Path(bank_path).parent / bank.prompt_embeddings
        return cls.from_prompt_bank(bank, EmbeddingManifest.read(prompt_manifest))


def assemble_views(record: VideoRecord, policy: ViewPolicy | str) -> list[EmbeddingMatrix]:
    """Scoring inputs for one video: a single concatenated matrix, or one matrix per view."""
    policy = ViewPolicy(policy)
    dims = {v.dim for v in record.views}
    if len(dims) != 1:
        raise DimMismatch(f"video {record.video_id!r} views have dims {sorted(dims)}")
    if policy is ViewPolicy.CONCAT_FRAMES:
        if len(record.views) == 1:
            return [record.views[0]]
        return [stack_rows(record.views)]
    return list(record.views)


def softmax(scores: Sequence[float] | np.ndarray, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise BadParams(f"temperature must be positive, got {temperature}")
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class Ranked:
    category: int
    name: str
    score: float
    prob: float


@dataclass
class Prediction:
    video_id: str
    ranked: list[Ranked]
    views_used: int
    scores: np.ndarray
    probs: np.ndarray

    @property
    def top1(self) -> int:
        return self.ranked[0].category

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "topk": [{"category": r.name, "score": r.score, "prob": r.prob} for r in self.ranked],
            "views_used": self.views_used,
        }


def rank(scores: np.ndarray) -> np.ndarray:
    """Category ids by descending score, ties by ascending id."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[-1]), -scores))


def score_records(
    records: Sequence[VideoRecord],
    bank: CategoryBank,
    *,
    policy: ViewPolicy | str = ViewPolicy.CONCAT_FRAMES,
    method: Method | str = Method.MAKA,
    jobs: int = 1,
) -> np.ndarray:
    """Raw (B, K) scores; under ``average_view_logits`` per-view scores are averaged."""
    if not records:
        return np.zeros((0, len(bank)))
    policy, method = ViewPolicy(policy), Method(method)
    inputs, owner = [], []
    for b, rec in enumerate(records):
        views = assemble_views(rec, policy)
        inputs.extend(views)
        owner.extend([b] * len(views))
    if method is Method.MAKA:
        per_input = batched_scores(inputs, bank.prompts, jobs=jobs).scores
    else:
        per_input = batched_mean_pool(inputs, bank.prompts)
    owner = np.asarray(owner)
    if len(inputs) == len(records):
        return per_input
    out = np.empty((len(records), len(bank)))
    for b in range(len(records)):
        out[b] = per_input[owner == b].mean(axis=0)
    return out


def _prediction(video_id: str, scores: np.ndarray, bank: CategoryBank, config: InferenceConfig, views: int) -> Prediction:
    probs = softmax(scores, config.temperature)
    order = rank(scores)[: config.top_k]
    ranked = [Ranked(int(k), bank.names[k], float(scores[k]), float(probs[k])) for k in order]
    return Prediction(video_id, ranked, views, scores, probs)


def predict_many(
    records: Sequence[VideoRecord], bank: CategoryBank, config: InferenceConfig | None = None, *, jobs: int = 1
) -> list[Prediction]:
    config = config or InferenceConfig()
    bank = bank.filtered(config.attribute_filter, config.template_filter)
    scores = score_records(records, bank, policy=config.view_policy, method=config.method, jobs=jobs)
    return [_prediction(r.video_id, scores[b], bank, config, len(r.views)) for b, r in enumerate(records)]


def predict_topk(record: VideoRecord, bank: CategoryBank, config: InferenceConfig | None = None) -> Prediction:
    return predict_many([record], bank, config)[0]


def write_predictions_jsonl(predictions: Iterable[Prediction], path: str | os.PathLike) -> None:
    lines = [json.dumps(p.to_dict(), ensure_ascii=False) for p in predictions]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
