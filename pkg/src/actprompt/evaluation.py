"""Evaluation protocols over precomputed embeddings: zero-shot subsets, base-to-novel, few-shot.

Randomness: each protocol derives one ``numpy.random.Generator`` (PCG64) per
split from ``numpy.random.SeedSequence(seed).spawn(n_splits)``.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text, dump_json, read_json, write_json
from .errors import BadParams, InsufficientSamples, ManifestError, MissingLabel, NonPositive
from .inference import CategoryBank, InferenceConfig, Prediction, predict_many
from .store import EmbeddingManifest, VideoRecord, load_video

logger = logging.getLogger(__name__)


# dataset manifest


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    train_sample_count: int


@dataclass(frozen=True)
class VideoEntry:
    video_id: str
    label: str
    split: str
    embeddings: str  # path of the frame-embedding manifest, relative to the dataset file


@dataclass
class DatasetManifest:
    name: str
    classes: list[ClassInfo]
    videos: list[VideoEntry]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate class names")
        if [c.id for c in self.classes] != list(range(len(self.classes))):
            raise ManifestError("class ids must be 0..n-1 in order")
        known = set(names)
        seen = set()
        for v in self.videos:
            if v.label not in known:
                raise ManifestError(f"video {v.video_id!r} has undeclared label {v.label!r}")
            if v.video_id in seen:
                raise ManifestError(f"duplicate video id {v.video_id!r}")
            seen.add(v.video_id)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def videos_in(self, split: str | None = None, classes: Sequence[str] | None = None) -> list[VideoEntry]:
        keep = set(classes) if classes is not None else None
        return [v for v in self.videos if (split is None or v.split == split) and (keep is None or v.label in keep)]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "classes": [{"id": c.id, "name": c.name, "train_sample_count": c.train_sample_count} for c in self.classes],
            "videos": [
                {"video_id": v.video_id, "label": v.label, "split": v.split, "embeddings": v.embeddings}
                for v in self.videos
            ],
        }

    @classmethod
    def from_dict(cls, d: dict, root: str | os.PathLike = ".") -> "DatasetManifest":
        try:
            classes = [ClassInfo(int(c["id"]), c["name"], int(c["train_sample_count"])) for c in d["classes"]]
            videos = [VideoEntry(v["video_id"], v["label"], v["split"], v["embeddings"]) for v in d["videos"]]
            return cls(d["name"], classes, videos, Path(root))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed dataset manifest: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def read(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_dict(read_json(path), Path(path).parent)


class RecordStore:
    """Loads VideoRecords for manifest entries, caching the embedding manifests."""

    def __init__(self, manifest: DatasetManifest, embeddings: str | os.PathLike | None = None):
        self.manifest = manifest
        self.override = Path(embeddings) if embeddings is not None else None
        self._manifests: dict[str, EmbeddingManifest] = {}

    def _frames(self, ref: str) -> EmbeddingManifest:
        if self.override is not None:
            path = self.override / "manifest.json" if self.override.is_dir() else self.override
        else:
            path = self.manifest.root / ref
        key = str(path)
        if key not in self._manifests:
            self._manifests[key] = EmbeddingManifest.read(path)
        return self._manifests[key]

    def load(self, entries: Sequence[VideoEntry]) -> list[VideoRecord]:
        return [load_video(self._frames(e.embeddings), e.video_id, label=e.label) for e in entries]


# metrics


def harmonic_mean(base: float, novel: float) -> float:
    if not (base > 0 and novel > 0):
        raise NonPositive(f"harmonic mean needs positive inputs, got {base}, {novel}")
    return 2.0 * base * novel / (base + novel)


def top1_top5(predictions: Sequence[Prediction], labels: Sequence) -> tuple[float, float]:
    """Percent of videos with the true label at rank 1 and within ranks 1-5.

    Labels may be category names or category ids.
    """
    if len(predictions) != len(labels):
        raise BadParams(f"{len(predictions)} predictions but {len(labels)} labels")
    if not predictions:
        raise BadParams("no predictions")
    hit1 = hit5 = 0
    for p, lab in zip(predictions, labels):
        if lab is None:
            raise MissingLabel(f"video {p.video_id!r} has no label")
        need = min(5, len(p.scores))
        if len(p.ranked) < need:
            raise BadParams(f"prediction for {p.video_id!r} ranks {len(p.ranked)} categories, need {need}")
        keys = [r.category if isinstance(lab, (int, np.integer)) else r.name for r in p.ranked[:need]]
        hit1 += int(keys[0] == lab)
        hit5 += int(lab in keys)
    n = len(predictions)
    return 100.0 * hit1 / n, 100.0 * hit5 / n


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    if not values:
        raise BadParams("no values")
    m = math.fsum(values) / len(values)
    var = math.fsum((v - m) ** 2 for v in values) / len(values)
    return m, math.sqrt(var)


@dataclass
class SplitMetrics:
    top1: float
    top5: float
    n_videos: int = 0
    base: float | None = None
    novel: float | None = None
    hm: float | None = None
    classes: int = 0

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class MetricsReport:
    protocol: str
    top1: float
    top5: float
    mean: float
    std: float
    splits: list[SplitMetrics]
    base: float | None = None
    novel: float | None = None
    hm: float | None = None
    settings: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for s in self.splits:
            for v in (s.top1, s.top5, s.base, s.novel):
                if v is not None and not 0.0 <= v <= 100.0:
                    raise BadParams(f"accuracy {v} outside [0, 100]")
            if s.top5 < s.top1:
                raise BadParams("top5 below top1")

    def to_dict(self) -> dict:
        d = {
            "protocol": self.protocol,
            "top1": self.top1,
            "top5": self.top5,
            "mean": self.mean,
            "std": self.std,
            "splits": [s.to_dict() for s in self.splits],
            "settings": self.settings,
        }
        for k in ("base", "novel", "hm"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        return d

    def to_json(self) -> str:
        return dump_json(self.to_dict())

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, self.to_json())

    def table(self) -> str:
        cols = ["split", "top1", "top5"]
        has_b2n = any(s.hm is not None for s in self.splits)
        if has_b2n:
            cols += ["base", "novel", "hm"]
        rows = []
        for i, s in enumerate(self.splits):
            row = [str(i), f"{s.top1:.1f}", f"{s.top5:.1f}"]
            if has_b2n:
                row += [f"{s.base:.1f}", f"{s.novel:.1f}", f"{s.hm:.1f}"]
            rows.append(row)
        summary = ["mean", f"{self.top1:.1f}", f"{self.top5:.1f}"]
        if has_b2n:
            summary += [f"{self.base:.1f}", f"{self.novel:.1f}", f"{self.hm:.1f}"]
        rows.append(summary)
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        fmt = "  ".join(f"{{:>{w}}}" for w in widths)
        lines = [f"{self.protocol}: {self.mean:.1f} +/- {self.std:.1f}", fmt.format(*cols)]
        lines += [fmt.format(*r) for r in rows]
        return "\n".join(lines) + "\n"


def aggregate_splits(splits: Sequence[SplitMetrics], protocol: str = "", settings: dict | None = None) -> MetricsReport:
    """Mean over splits; ``mean``/``std`` summarize the headline metric (HM when present, else top-1)."""
    if not splits:
        raise BadParams("no splits to aggregate")
    top1 = mean_std([s.top1 for s in splits])[0]
    top5 = mean_std([s.top5 for s in splits])[0]
    base = novel = hm = None
    if all(s.hm is not None for s in splits):
        base = mean_std([s.base for s in splits])[0]
        novel = mean_std([s.novel for s in splits])[0]
        hm_mean, hm_std = mean_std([s.hm for s in splits])
        hm = hm_mean
        mean, std = hm_mean, hm_std
    else:
        mean, std = mean_std([s.top1 for s in splits])
    return MetricsReport(protocol, top1, top5, mean, std, list(splits), base, novel, hm, dict(settings or {}))


# splits


class SplitKind(str, enum.Enum):
    ZERO_SHOT_SUBSETS = "zero_shot_subsets"
    BASE_TO_NOVEL = "base_to_novel"
    FEW_SHOT = "few_shot"


@dataclass
class SplitSpec:
    kind: SplitKind
    n_splits: int = 3
    subset_size: int | None = None
    shots: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        self.kind = SplitKind(self.kind)
        if self.n_splits < 1:
            raise BadParams("n_splits must be >= 1")
        if self.shots < 1:
            raise BadParams("shots must be >= 1")
        if self.subset_size is not None and self.subset_size < 1:
            raise BadParams("subset_size must be >= 1")

    def generators(self) -> list[np.random.Generator]:
        return [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(self.n_splits)]


def make_zero_shot_subsets(manifest: DatasetManifest, spec: SplitSpec) -> list[list[str]]:
    """``n_splits`` seeded class subsets, each listed in manifest class order."""
    names = manifest.class_names
    size = spec.subset_size if spec.subset_size is not None else len(names)
    if size > len(names):
        raise BadParams(f"subset_size {size} exceeds class count {len(names)}")
    out = []
    for rng in spec.generators():
        pick = np.sort(rng.choice(len(names), size=size, replace=False))
        out.append([names[i] for i in pick])
    return out


def _sample_per_class(entries_by_class: dict[str, list[VideoEntry]], k: int, rng: np.random.Generator) -> list[VideoEntry]:
    out = []
    for name, entries in entries_by_class.items():
        if len(entries) < k:
            warnings.warn(
                f"class {name!r} has {len(entries)} training videos, fewer than {k}; using all",
                InsufficientSamples,
                stacklevel=3,
            )
            out.extend(entries)
        else:
            idx = np.sort(rng.choice(len(entries), size=k, replace=False))
            out.extend(entries[i] for i in idx)
    return out


def _train_by_class(manifest: DatasetManifest, classes: Sequence[str]) -> dict[str, list[VideoEntry]]:
    return {c: manifest.videos_in("train", [c]) for c in classes}


def make_base_novel_split(
    manifest: DatasetManifest, spec: SplitSpec, split_index: int = 0
) -> tuple[list[str], list[str], list[VideoEntry]]:
    """Frequent classes are base (ceil half), the rest novel; ``shots`` training videos per base class."""
    if len(manifest.classes) < 2:
        raise BadParams("base-to-novel needs at least two classes")
    if not 0 <= split_index < spec.n_splits:
        raise BadParams(f"split_index {split_index} out of range")
    order = sorted(manifest.classes, key=lambda c: (-c.train_sample_count, c.name))
    n_base = math.ceil(len(order) / 2)
    base = [c.name for c in order[:n_base]]
    novel = [c.name for c in order[n_base:]]
    rng = spec.generators()[split_index]
    return base, novel, _sample_per_class(_train_by_class(manifest, base), spec.shots, rng)


def sample_few_shot(manifest: DatasetManifest, k: int, seed: int) -> list[VideoEntry]:
    """``k`` training-split videos per class (all of them when a class has fewer)."""
    if k < 1:
        raise BadParams("K must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return _sample_per_class(_train_by_class(manifest, manifest.class_names), k, rng)


# protocol runners


def _eval_config(config: InferenceConfig | None) -> InferenceConfig:
    config = config or InferenceConfig()
    if config.top_k >= 5:
        return config
    return InferenceConfig(
        config.temperature, config.view_policy, 5, config.attribute_filter, config.template_filter, config.method
    )


def _subset_bank(bank: CategoryBank, classes: Sequence[str]) -> CategoryBank:
    idx = [bank.index(c) for c in classes]
    return CategoryBank([bank.names[i] for i in idx], [bank.prompts[i] for i in idx], [bank.meta[i] for i in idx])


def evaluate(
    records: Sequence[VideoRecord], bank: CategoryBank, config: InferenceConfig | None = None, *, jobs: int = 1
) -> SplitMetrics:
    if not records:
        raise BadParams("no videos to evaluate")
    preds = predict_many(records, bank, _eval_config(config), jobs=jobs)
    t1, t5 = top1_top5(preds, [r.label for r in records])
    return SplitMetrics(t1, t5, n_videos=len(records), classes=len(bank))


def run_zeroshot(
    manifest: DatasetManifest,
    store: RecordStore,
    bank: CategoryBank,
    spec: SplitSpec,
    config: InferenceConfig | None = None,
    *,
    split: str = "test",
    adapter=None,
    jobs: int = 1,
) -> MetricsReport:
    results = []
    for classes in make_zero_shot_subsets(manifest, spec):
        recs = store.load(manifest.videos_in(split, classes))
        if adapter is not None:
            recs = [adapter.apply_record(r) for r in recs]
        results.append(evaluate(recs, _subset_bank(bank, classes), config, jobs=jobs))
    return aggregate_splits(results, "zeroshot", {"seed": spec.seed, "n_splits": spec.n_splits, "split": split})


def _fit(store, entries, bank, train_config):
    from .adapter import train

    recs = store.load(entries)
    return train(recs, [r.label for r in recs], bank, train_config).adapter


def run_base2novel(
    manifest: DatasetManifest,
    store: RecordStore,
    bank: CategoryBank,
    spec: SplitSpec,
    config: InferenceConfig | None = None,
    *,
    train_config=None,
    split: str = "test",
    jobs: int = 1,
) -> MetricsReport:
    """Per split: optionally fit an adapter on the base few-shot set, then score base and novel separately."""
    results = []
    for i in range(spec.n_splits):
        base, novel, train_set = make_base_novel_split(manifest, spec, i)
        base_bank = _subset_bank(bank, base)
        adapter = _fit(store, train_set, base_bank, train_config) if train_config is not None else None
        parts = []
        for classes in (base, novel):
            recs = store.load(manifest.videos_in(split, classes))
            if adapter is not None:
                recs = [adapter.apply_record(r) for r in recs]
            parts.append(evaluate(recs, _subset_bank(bank, classes), config, jobs=jobs))
        b, n = parts[0].top1, parts[1].top1
        hm = harmonic_mean(b, n) if b > 0 and n > 0 else 0.0
        results.append(
            SplitMetrics(
                top1=(b + n) / 2,
                top5=(parts[0].top5 + parts[1].top5) / 2,
                n_videos=parts[0].n_videos + parts[1].n_videos,
                base=b,
                novel=n,
                hm=hm,
                classes=len(base) + len(novel),
            )
        )
    settings = {"seed": spec.seed, "n_splits": spec.n_splits, "shots": spec.shots, "trained": train_config is not None}
    return aggregate_splits(results, "base2novel", settings)


def run_fewshot(
    manifest: DatasetManifest,
    store: RecordStore,
    bank: CategoryBank,
    shots: int,
    seed: int,
    config: InferenceConfig | None = None,
    *,
    train_config=None,
    split: str = "test",
    jobs: int = 1,
) -> MetricsReport:
    adapter = None
    if train_config is not None:
        adapter = _fit(store, sample_few_shot(manifest, shots, seed), bank, train_config)
    recs = store.load(manifest.videos_in(split))
    if adapter is not None:
        recs = [adapter.apply_record(r) for r in recs]
    result = evaluate(recs, bank, config, jobs=jobs)
    return aggregate_splits([result], "fewshot", {"seed": seed, "shots": shots, "trained": train_config is not None})
