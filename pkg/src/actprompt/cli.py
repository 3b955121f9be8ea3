"""Command-line entry point: ``actprompt <subcommand> ...``.

Exit status is 0 on success, 1 on a domain error and 2 on a usage error. Every
error is reported on stderr as one line, ``ERROR <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import (
    ActPromptError,
    BadParams,
    ConfigError,
    GenerationIncomplete,
    InsufficientSamples,
    IoError,
    UnknownLabel,
)

logger = logging.getLogger("actprompt")


class UsageError(Exception):
    code = "UsageError"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ``ERROR UsageError`` and exit 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


# config file


@dataclass
class CliConfig:
    """Settings a ``--config`` JSON file may provide; command-line flags win."""

    llm_endpoint: str = "https://api.openai.com/v1/chat/completions"
    llm_model: str = "gpt-4"
    llm_api_key_env: str = "OPENAI_API_KEY"
    llm_temperature: float = 0.0
    embedding_endpoint: str = "https://api.openai.com/v1/embeddings"
    embedding_model: str = "text-embedding-3-small"
    embedding_api_key_env: str = "EMBEDDING_API_KEY"
    embedding_batch_size: int = 64
    cache_dir: str | None = None
    max_attempts: int = 4
    jobs: int = 1

    @classmethod
    def valid_keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "CliConfig":
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(d) - set(cls.valid_keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s) {', '.join(unknown)}; valid keys: {', '.join(cls.valid_keys())}")
        default = cls()
        for key, value in d.items():
            want = type(getattr(default, key))
            if want is type(None):
                ok = value is None or isinstance(value, str)
            elif want is float:
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            else:
                ok = isinstance(value, want) and not (want is int and isinstance(value, bool))
            if not ok:
                raise ConfigError(f"config key {key!r} must be {want.__name__}, got {value!r}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | None) -> "CliConfig":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(d)


def _pick(flag, fallback):
    return fallback if flag is None else flag


# shared loaders


def _load_bank(args):
    from .inference import CategoryBank

    return CategoryBank.load(args.bank, args.prompt_embeddings)


def _category_index(bank, ref: str) -> int:
    if ref in bank.names:
        return bank.index(ref)
    try:
        k = int(ref)
    except ValueError:
        raise UnknownLabel(f"no category {ref!r} in bank") from None
    if not 0 <= k < len(bank):
        raise UnknownLabel(f"category id {k} out of range 0..{len(bank) - 1}")
    return k


def _frames_manifest(path: str):
    from .store import EmbeddingManifest

    p = Path(path)
    return EmbeddingManifest.read(p / "manifest.json" if p.is_dir() else p)


def _video_ids(manifest) -> list[str]:
    """Distinct video ids in manifest order (``vid#n`` views fold into ``vid``)."""
    seen: dict[str, None] = {}
    for i in manifest.ids:
        seen.setdefault(i.rsplit("#", 1)[0] if "#" in i else i, None)
    return list(seen)


def _inference_config(args):
    from .inference import InferenceConfig

    return InferenceConfig(
        temperature=args.temperature,
        view_policy=args.view_policy,
        top_k=args.top_k,
        attribute_filter=args.attributes.split(",") if args.attributes else None,
        template_filter=[int(t) for t in args.templates.split(",")] if args.templates else None,
        method=args.method,
    )


def _train_config(args):
    from .adapter import TrainConfig

    return TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        temperature=args.train_temperature,
        seed=args.seed,
        weight_decay=args.weight_decay,
        bias=not args.no_bias,
    )


# subcommands


def cmd_gen_prompts(args, cfg: CliConfig) -> int:
    from .prompt_gen import LlmClient, LlmConfig, generate_bank
    from .prompt_gen.stub import StubLLM
    from .prompt_gen.templates import parse_template_ids

    try:
        text = Path(args.actions).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {args.actions}: {exc}") from exc
    actions = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    llm = LlmConfig(
        endpoint=_pick(args.endpoint, cfg.llm_endpoint),
        model=_pick(args.model, cfg.llm_model),
        api_key_env=cfg.llm_api_key_env,
        temperature=cfg.llm_temperature,
        max_attempts=cfg.max_attempts,
        cache_dir=_pick(args.cache_dir, cfg.cache_dir),
    )
    transport = StubLLM().transport() if args.stub else None
    client = LlmClient(llm, transport=transport)
    try:
        bank = generate_bank(
            actions,
            parse_template_ids(args.templates),
            client=client,
            allow_partial=args.allow_partial,
            concurrency=args.concurrency,
            created_at=args.created_at,
        )
    except GenerationIncomplete as exc:
        if exc.partial is not None and args.out:
            partial = Path(args.out).with_suffix(".partial.json")
            exc.partial.save(partial)
            logger.warning("partial bank written to %s", partial)
        raise
    bank.save(args.out)
    print(f"{len(bank)} prompts for {len(bank.entries)} actions -> {args.out}")
    return 0


def cmd_fetch_embeddings(args, cfg: CliConfig) -> int:
    from .embedding_service import EmbeddingEndpoint, embed_bank, stub_embedding_transport
    from .prompt_gen import PromptBank

    bank = PromptBank.load(args.bank)
    endpoint = EmbeddingEndpoint(
        url=_pick(args.endpoint, cfg.embedding_endpoint),
        model=_pick(args.model, cfg.embedding_model),
        api_key_env=cfg.embedding_api_key_env,
        batch_size=cfg.embedding_batch_size,
        max_attempts=cfg.max_attempts,
    )
    transport = stub_embedding_transport(args.dim) if args.stub else None
    out = Path(args.out)
    manifest = embed_bank(bank, endpoint, out, transport=transport)
    bank.prompt_embeddings = "manifest.json"
    bank.save(out / "bank.json")
    print(f"{len(manifest.entries)} prompt matrices -> {out / 'manifest.json'}; linked bank -> {out / 'bank.json'}")
    return 0


def _score_inputs(args):
    from .store import VideoRecord, ingest_matrix, load_video

    if args.video:
        recs = []
        for p in args.video:
            recs.append(VideoRecord(Path(p).stem, (ingest_matrix(p),)))
        return recs
    if not args.manifest:
        raise UsageError("score needs --video FILE or --manifest FILE")
    manifest = _frames_manifest(args.manifest)
    ids = args.video_id or _video_ids(manifest)
    return [load_video(manifest, i) for i in ids]


def cmd_score(args, cfg: CliConfig) -> int:
    from .adapter import LinearAdapter
    from .inference import predict_many, write_predictions_jsonl

    bank = _load_bank(args)
    records = _score_inputs(args)
    if args.adapter:
        ad = LinearAdapter.load(args.adapter)
        records = [ad.apply_record(r) for r in records]
    preds = predict_many(records, bank, _inference_config(args), jobs=_pick(args.jobs, cfg.jobs))
    if args.out:
        write_predictions_jsonl(preds, args.out)
        print(f"{len(preds)} predictions -> {args.out}")
    else:
        for p in preds:
            print(json.dumps(p.to_dict(), ensure_ascii=False))
    return 0


def cmd_eval(args, cfg: CliConfig) -> int:
    from .evaluation import DatasetManifest, RecordStore, SplitSpec, run_base2novel, run_fewshot, run_zeroshot

    manifest = DatasetManifest.read(args.manifest)
    store = RecordStore(manifest, args.embeddings)
    bank = _load_bank(args)
    config = _inference_config(args)
    jobs = _pick(args.jobs, cfg.jobs)
    train_config = _train_config(args) if args.train else None
    if args.protocol == "zeroshot":
        spec = SplitSpec("zero_shot_subsets", n_splits=args.splits, subset_size=args.subset_size, seed=args.seed)
        report = run_zeroshot(manifest, store, bank, spec, config, split=args.split, jobs=jobs)
    elif args.protocol == "base2novel":
        spec = SplitSpec("base_to_novel", n_splits=args.splits, shots=args.shots, seed=args.seed)
        report = run_base2novel(manifest, store, bank, spec, config, train_config=train_config, split=args.split, jobs=jobs)
    else:
        report = run_fewshot(
            manifest, store, bank, args.shots, args.seed, config, train_config=train_config, split=args.split, jobs=jobs
        )
    if args.out:
        report.save(args.out)
    print(report.table())
    return 0


def cmd_train_adapter(args, cfg: CliConfig) -> int:
    from .adapter import train
    from .evaluation import DatasetManifest, RecordStore, sample_few_shot

    manifest = DatasetManifest.read(args.manifest)
    store = RecordStore(manifest, args.embeddings)
    bank = _load_bank(args)
    if args.shots:
        entries = sample_few_shot(manifest, args.shots, args.seed)
    else:
        entries = manifest.videos_in(args.split)
    if not entries:
        raise BadParams(f"no videos in split {args.split!r}")
    records = store.load(entries)
    result = train(records, [r.label for r in records], bank, _train_config(args))
    result.adapter.save(args.out)
    if args.curve:
        result.write_curve(args.curve)
    print(f"trained on {len(records)} videos; loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}; adapter -> {args.out}")
    return 0


def cmd_attribute(args, cfg: CliConfig) -> int:
    from .adapter import LinearAdapter
    from .attribution import attribute, export
    from .store import load_video

    bank = _load_bank(args)
    record = load_video(_frames_manifest(args.embeddings), args.video)
    if args.adapter:
        record = LinearAdapter.load(args.adapter).apply_record(record)
    m, score = attribute(record, bank, _category_index(bank, args.category))
    export(m, args.out, args.format)
    print(f"{m.video_id} / {m.category}: score {score:.6f} ({m.grid.shape[0]} frames x {m.grid.shape[1]} prompts) -> {args.out}")
    return 0


def cmd_synth(args, cfg: CliConfig) -> int:
    from .synth import SynthParams, synth_generate

    params = SynthParams(
        n_classes=args.classes,
        dim=args.dim,
        frames_per_video=args.frames,
        n_templates=args.templates,
        frame_noise=args.frame_noise,
        shift=args.shift,
        views=args.views,
        seed=args.seed,
    )
    ds = synth_generate(params)
    out = ds.write(args.out, created_at=args.created_at or "")
    print(f"{len(ds.class_names)} classes, {len(ds.records)} videos -> {out}")
    return 0


# parser


def _add_bank(p) -> None:
    p.add_argument("--bank", required=True, help="prompt bank JSON")
    p.add_argument(
        "--prompt-embeddings",
        help="prompt embedding manifest (default: the bank's prompt_embeddings field)",
    )


def _add_inference(p) -> None:
    p.add_argument("--temperature", type=float, default=0.01, help="softmax temperature (default 0.01)")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--view-policy", choices=["concat_frames", "average_view_logits"], default="concat_frames")
    p.add_argument("--method", choices=["maka", "mean_pool"], default="maka")
    p.add_argument("--attributes", help="comma-separated attribute names to keep")
    p.add_argument("--templates", help="comma-separated template ids to keep")
    p.add_argument("--jobs", type=int, help="scoring worker threads (output does not depend on it)")


def _add_training(p, *, seed: bool = True) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--train-temperature", type=float, default=0.07)
    p.add_argument("--weight-decay", type=float, default=0.001)
    p.add_argument("--no-bias", action="store_true", help="train the adapter without a bias term")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="actprompt", description="Attribute-prompt late-interaction video classification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file with endpoint/model/cache settings")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-prompts", help="generate a prompt bank with an LLM")
    p.add_argument("--actions", required=True, help="text file, one action name per line")
    p.add_argument("--templates", default="1,3,4", help="template ids (default 1,3,4)")
    p.add_argument("--out", required=True, help="output bank JSON")
    p.add_argument("--cache-dir", help="reply cache directory")
    p.add_argument("--allow-partial", action="store_true", help="keep going when some pairs fail")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--endpoint", help="chat-completions URL")
    p.add_argument("--model")
    p.add_argument("--stub", action="store_true", help="answer from the built-in offline stub")
    p.add_argument("--created-at", help="timestamp to record (default: now, or SOURCE_DATE_EPOCH)")
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("fetch-embeddings", help="embed every prompt of a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--out", required=True, help="output directory (manifest.json, *.apeb, linked bank.json)")
    p.add_argument("--endpoint", help="embeddings URL")
    p.add_argument("--model")
    p.add_argument("--stub", action="store_true", help="use deterministic offline hash embeddings")
    p.add_argument("--dim", type=int, default=64, help="stub embedding dimension")
    p.set_defaults(func=cmd_fetch_embeddings)

    p = sub.add_parser("score", help="top-k predictions for videos")
    p.add_argument("--video", action="append", help="APEB frame-embedding file (repeatable)")
    p.add_argument("--manifest", help="frame embedding manifest (or its directory)")
    p.add_argument("--video-id", action="append", help="video id in --manifest (repeatable; default all)")
    _add_bank(p)
    p.add_argument("--adapter", help="trained adapter APEB file")
    _add_inference(p)
    p.add_argument("--out", help="predictions JSONL (default stdout)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="run an evaluation protocol")
    p.add_argument("--protocol", choices=["zeroshot", "base2novel", "fewshot"], required=True)
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    _add_bank(p)
    p.add_argument("--embeddings", help="frame embedding directory overriding the manifest's paths")
    p.add_argument("--split", default="test", help="split to evaluate on (default test)")
    p.add_argument("--splits", type=int, default=3, help="number of seeded splits")
    p.add_argument("--subset-size", type=int, help="zeroshot: classes per subset (default all)")
    p.add_argument("--shots", type=int, default=16, help="base2novel/fewshot: training videos per class")
    p.add_argument("--train", action="store_true", help="base2novel/fewshot: fit an adapter first")
    _add_training(p)
    _add_inference(p)
    p.add_argument("--out", help="report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-adapter", help="fit a linear adapter on frozen frame embeddings")
    p.add_argument("--manifest", required=True, help="dataset manifest JSON")
    _add_bank(p)
    p.add_argument("--embeddings", help="frame embedding directory overriding the manifest's paths")
    p.add_argument("--split", default="train")
    p.add_argument("--shots", type=int, help="sample this many training videos per class")
    _add_training(p)
    p.add_argument("--out", required=True, help="adapter APEB file")
    p.add_argument("--curve", help="loss curve CSV")
    p.set_defaults(func=cmd_train_adapter)

    p = sub.add_parser("attribute", help="export a frame-prompt relevancy map")
    p.add_argument("--video", required=True, help="video id")
    p.add_argument("--category", required=True, help="category name or id")
    _add_bank(p)
    p.add_argument("--embeddings", required=True, help="frame embedding manifest (or its directory)")
    p.add_argument("--adapter", help="trained adapter APEB file")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("synth", help="write a seeded synthetic dataset")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--templates", type=int, default=1)
    p.add_argument("--views", type=int, default=1)
    p.add_argument("--frame-noise", type=float, default=3.0)
    p.add_argument("--shift", type=float, default=0.0)
    p.add_argument("--created-at", help="timestamp for bank.json (default empty)")
    p.set_defaults(func=cmd_synth)
    return parser


def _error(code: str, message: str) -> None:
    print(f"ERROR {code}: {' '.join(str(message).split())}", file=sys.stderr)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _error(exc.code, str(exc))
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = CliConfig.load(args.config)
        with warnings.catch_warnings():
            warnings.simplefilter("always", InsufficientSamples)
            logging.captureWarnings(True)
            try:
                return args.func(args, cfg)
            finally:
                logging.captureWarnings(False)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _error(exc.code, str(exc))
        return 2
    except ActPromptError as exc:
        _error(exc.code, str(exc))
        return 1
    except OSError as exc:
        _error("IoError", str(exc))
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
