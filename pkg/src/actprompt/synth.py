"""Seeded synthetic embeddings with attribute structure.

Every class has a concept direction; every attribute a shared direction plus a
class-specific one. A prompt is ``normalize(s * concept + offset[k, a] + noise)``.
A frame shows the concept plus the offsets of a few random attributes, so each
frame matches one or two prompts closely and the rest loosely. Matching frames
to their best prompts recovers this structure; averaging both sets first mixes
the shared attribute directions of every class together.

``shift`` rotates frame space away from prompt space by a fixed random
orthogonal map, which gives an adapter something to undo.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, write_json
from .errors import BadParams
from .evaluation import ClassInfo, DatasetManifest, VideoEntry
from .inference import CategoryBank, PromptMeta
from .prompt_gen.bank import PromptBank
from .prompt_gen.postprocess import ActionConditionedPrompt
from .prompt_gen.taxonomy import DEFAULT_TAXONOMY
from .store import KIND_PROMPT_TEXTS, KIND_VIDEO_FRAMES, EmbeddingManifest, EmbeddingMatrix, VideoRecord

SPLITS = ("train", "val", "test")


@dataclass
class SynthParams:
    n_classes: int = 20
    n_attributes: int = 12
    dim: int = 64
    frames_per_video: int = 8
    n_templates: int = 1
    attributes_per_frame: int = 1
    concept_scale: float = 0.35
    shared_scale: float = 0.8
    frame_noise: float = 3.0
    prompt_noise: float = 0.5
    template_noise: float = 0.1
    shift: float = 0.0
    train_videos: tuple[int, int] = (4, 12)
    val_videos: int = 2
    test_videos: int = 5
    views: int = 1
    seed: int = 7

    def __post_init__(self) -> None:
        self.train_videos = tuple(int(x) for x in self.train_videos)
        if self.n_classes < 1 or not 1 <= self.n_attributes <= len(DEFAULT_TAXONOMY.attributes):
            raise BadParams("need >= 1 class and 1..12 attributes")
        if self.dim < self.n_classes + self.n_attributes:
            raise BadParams(f"dim {self.dim} < n_classes + n_attributes = {self.n_classes + self.n_attributes}")
        if self.frames_per_video < 1 or self.n_templates < 1 or self.views < 1:
            raise BadParams("frames_per_video, n_templates and views must be >= 1")
        if not 1 <= self.attributes_per_frame <= self.n_attributes:
            raise BadParams("attributes_per_frame must be in 1..n_attributes")
        lo, hi = self.train_videos
        if not 0 <= lo <= hi or self.val_videos < 0 or self.test_videos < 0:
            raise BadParams("video counts must be non-negative with train min <= max")
        if min(self.frame_noise, self.prompt_noise, self.template_noise) < 0 or not 0 <= self.shift <= 1:
            raise BadParams("noise must be >= 0 and shift in [0, 1]")


@dataclass
class SynthDataset:
    params: SynthParams
    class_names: list[str]
    prompts: np.ndarray  # (K, n_attributes * n_templates, d), rows template-major
    records: list[VideoRecord]
    splits: list[str]
    train_counts: list[int]

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def attribute_names(self) -> list[str]:
        return DEFAULT_TAXONOMY.names[: self.params.n_attributes]

    def prompt_meta(self, name: str = "") -> list[PromptMeta]:
        return [
            PromptMeta(a, t + 1, _prompt_text(name, a))
            for t in range(self.params.n_templates)
            for a in self.attribute_names()
        ]

    def category_bank(self) -> CategoryBank:
        return CategoryBank(
            list(self.class_names),
            [EmbeddingMatrix(p, normalized=True) for p in self.prompts],
            [self.prompt_meta(name) for name in self.class_names],
        )

    def subset(self, split: str) -> tuple[list[VideoRecord], list[str]]:
        recs = [r for r, s in zip(self.records, self.splits) if s == split]
        return recs, [r.label for r in recs]

    def prompt_bank(self, created_at: str = "") -> PromptBank:
        entries = {}
        for name in self.class_names:
            entries[name] = [
                ActionConditionedPrompt(name, m.attribute, m.template_id, m.text.split(". ", 1)[1], m.text, 3)
                for m in self.prompt_meta(name)
            ]
        return PromptBank(
            taxonomy=DEFAULT_TAXONOMY,
            templates_used=list(range(1, self.params.n_templates + 1)),
            entries=entries,
            created_at=created_at,
            prompt_embeddings="prompts/manifest.json",
        )

    def manifest(self) -> DatasetManifest:
        classes = [ClassInfo(i, n, c) for i, (n, c) in enumerate(zip(self.class_names, self.train_counts))]
        videos = [VideoEntry(r.video_id, r.label, s, "frames/manifest.json") for r, s in zip(self.records, self.splits)]
        return DatasetManifest(name=f"synth-seed{self.params.seed}", classes=classes, videos=videos)

    def write(self, out_dir: str | os.PathLike, created_at: str = "") -> Path:
        """Write dataset.json, bank.json, actions.txt, synth.json and the two embedding manifests."""
        out = Path(out_dir)
        frames = EmbeddingManifest(KIND_VIDEO_FRAMES, [], out / "frames")
        for r in self.records:
            if len(r.views) == 1:
                frames.add(r.video_id, r.views[0])
            else:
                for v, m in enumerate(r.views):
                    frames.add(f"{r.video_id}#{v}", m)
        frames.save(out / "frames" / "manifest.json")
        prompts = EmbeddingManifest(KIND_PROMPT_TEXTS, [], out / "prompts")
        for name, p in zip(self.class_names, self.prompts):
            prompts.add(name, EmbeddingMatrix(p, normalized=True))
        prompts.save(out / "prompts" / "manifest.json")
        self.prompt_bank(created_at).save(out / "bank.json")
        self.manifest().save(out / "dataset.json")
        atomic_write_text(out / "actions.txt", "".join(n + "\n" for n in self.class_names))
        write_json(out / "synth.json", asdict(self.params))
        return out


def _prompt_text(name: str, attribute: str) -> str:
    return f"a video of {name}. Synthetic {attribute.lower()} cue."


def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _f32_unit(a: np.ndarray) -> np.ndarray:
    # store as float32 and renormalize so rows pass the unit check exactly as saved
    a = _unit_rows(a).astype(np.float32)
    return _unit_rows(a.astype(np.float64)).astype(np.float32)


def synth_generate(params: SynthParams | None = None) -> SynthDataset:
    """Build a dataset; identical params give bitwise-identical output."""
    p = params or SynthParams()
    rng = np.random.default_rng(p.seed)
    d, K, A, T = p.dim, p.n_classes, p.n_attributes, p.n_templates
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    concept = q[:, :K].T
    shared = q[:, K : K + A].T
    specific = _unit_rows(rng.standard_normal((K, A, d)))
    offset = p.shared_scale * shared[None, :, :] + specific
    template_dir = _unit_rows(rng.standard_normal((K, T, A, d)))
    scale = 1.0 / np.sqrt(d)

    base = p.concept_scale * concept[:, None, :] + offset  # (K, A, d)
    prompts = (
        base[:, None, :, :]
        + p.template_noise * template_dir
        + p.prompt_noise * scale * rng.standard_normal((K, T, A, d))
    )
    prompts = _f32_unit(prompts.reshape(K, T * A, d).reshape(-1, d)).reshape(K, T * A, d)

    rot, _ = np.linalg.qr(rng.standard_normal((d, d)))
    mix = (1.0 - p.shift) * np.eye(d) + p.shift * rot

    class_names = [f"class_{k:02d}" for k in range(K)]
    lo, hi = p.train_videos
    train_counts = [int(x) for x in rng.integers(lo, hi + 1, size=K)]
    records, splits = [], []
    for k in range(K):
        counts = {"train": train_counts[k], "val": p.val_videos, "test": p.test_videos}
        n = 0
        for split in SPLITS:
            for _ in range(counts[split]):
                views = []
                for _ in range(p.views):
                    picks = np.stack(
                        [rng.choice(A, size=p.attributes_per_frame, replace=False) for _ in range(p.frames_per_video)]
                    )
                    clean = p.concept_scale * concept[k] + offset[k][picks].sum(axis=1)
                    noisy = clean + p.frame_noise * scale * rng.standard_normal((p.frames_per_video, d))
                    views.append(EmbeddingMatrix(_f32_unit(noisy @ mix.T), normalized=True))
                records.append(VideoRecord(f"{class_names[k]}_{n:03d}", tuple(views), class_names[k]))
                splits.append(split)
                n += 1
    return SynthDataset(p, class_names, prompts, records, splits, train_counts)
