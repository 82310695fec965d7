"""Command-line entry point for dimemo.

Every command is non-interactive, writes CSV reports and leaves a run
manifest next to its outputs. Failures exit with status 2 and print one
``<error-class>: <message>`` line on stderr.
"""

import argparse
import json
import logging
import logging.handlers
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import psutil
from pydantic import BaseModel, ValidationError

from config import ConfigError, __version__, load_config
from corpus import Corpus, SyntheticSpec, generate_synthetic, load_corpus, save_corpus
from dsp import FeatureStream, aggregate_to_segments, mfcc, write_stream
from embeddings import ContextVariant, align_tokens_to_grid, export_synthetic_modality, load_stream, read_token_file
from errors import DimemoError, DimMismatchError, InvalidArgumentError
from fusion import FusionConfig, FusionRow, train_fusion, write_fusion_report
from lingua import analyze_conversations, events_frame, load_lexicon, profile_summary
from metrics import write_reports
from neural import load_model, save_model
from training import TrainConfig, evaluate, per_annotator_protocol, seed_sweep, train

logger = logging.getLogger(__name__)

FEATURE_KINDS = ("mfcc", "synthetic-acoustic", "synthetic-linguistic", "tokens")


def setup_logging():
    """Set up logging configuration."""
    config = load_config()
    level = getattr(logging, config.log_level.upper(), logging.INFO)
    handlers = [logging.StreamHandler(sys.stdout)]

    if config.log_to_file:
        os.makedirs(os.path.dirname(config.log_file_path) or ".", exist_ok=True)
        if config.log_rotation_enabled:
            handler = logging.handlers.RotatingFileHandler(
                config.log_file_path,
                maxBytes=config.log_max_file_size_mb * 1024 * 1024,
                backupCount=config.log_backup_count
            )
        else:
            handler = logging.FileHandler(config.log_file_path)
        handlers.append(handler)

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers
    )


class RunManifest(BaseModel):
    """What a command was run with and what it produced."""

    command: str
    args: Dict[str, Any]
    seeds: List[int]
    inputs: List[str]
    outputs: List[str]
    version: str = __version__
    wall_time: float
    cpu_count: Optional[int]
    rss_mb: float
    contexts: Dict[str, str] = {}

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2) + "\n", encoding="utf-8")


@dataclass
class RunResult:
    """Files a command touched; the manifest goes to ``manifest``."""

    manifest: Path
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    contexts: Dict[str, str] = field(default_factory=dict)


def _manifest_for(output: Path) -> Path:
    return output / "manifest.json" if output.is_dir() else Path(f"{output}.manifest.json")


def _build(model_cls, **values):
    """Construct a pydantic parameter object, reporting violations as invalid arguments."""
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid {model_cls.__name__}: {e.errors()[0]['msg']}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def resolve_jobs(requested: Optional[int]) -> int:
    """``--jobs`` value, ``DIMEMO_JOBS`` when omitted, all physical cores for 0."""
    jobs = load_config().jobs if requested is None else requested
    if jobs == 0:
        return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    if jobs < 0:
        raise InvalidArgumentError(f"--jobs must be >= 0, got {jobs}")
    return jobs


def load_modality(root: Path, corpus: Corpus, modality: str, ids: Optional[List[str]] = None) -> Dict[str, FeatureStream]:
    """Streams for ``<kind>`` (``<corpus>/features/<kind>/<id>.fstm``) or ``stream:<template>``.

    Templates contain ``{id}``. Lengths are reconciled against each
    conversation's grid and all streams must share one dimension.
    """
    if modality.startswith("stream:"):
        template = modality.split(":", 1)[1]
    else:
        template = str(root / "features" / modality / "{id}.fstm")
    if "{id}" not in template:
        raise InvalidArgumentError(f"stream template {template!r} lacks an {{id}} placeholder")

    streams = {}
    for conv_id in ids or corpus.split.all_ids():
        path = Path(template.format(id=conv_id))
        if not path.is_file():
            raise InvalidArgumentError(f"missing stream file {path}")
        streams[conv_id] = load_stream(path, expected_length=corpus.conversations[conv_id].grid_length)
    dims = {s.dim for s in streams.values()}
    if len(dims) > 1:
        raise DimMismatchError(f"modality {modality!r} mixes dimensions {sorted(dims)}")
    return streams


def contexts_of(modalities: Dict[str, Dict[str, FeatureStream]]) -> Dict[str, str]:
    """Context variant shared by every stream of a modality, keyed by modality."""
    found = {}
    for name, streams in modalities.items():
        variants = {ContextVariant.from_source(s.source) for s in streams.values()}
        if len(variants) == 1 and None not in variants:
            found[name] = variants.pop().value
    return found


def _train_config(args, jobs: int, seed: Optional[int] = None) -> TrainConfig:
    return _build(
        TrainConfig,
        batch_size=args.batch,
        lr=args.lr,
        epochs=args.epochs,
        shuffle=not args.no_shuffle,
        seed=args.seed if seed is None else seed,
        reference=args.reference,
        widths=args.widths,
        per_direction=not args.halve_widths,
        jobs=jobs,
    )


def cmd_synth(args, jobs: int) -> RunResult:
    spec = _build(
        SyntheticSpec,
        seed=args.seed,
        train=args.train,
        dev=args.dev,
        test=args.test,
        mean_duration=args.mean_duration,
        min_duration=min(args.min_duration, args.mean_duration),
        max_duration=max(args.max_duration, args.mean_duration),
        annotators=args.annotators,
        annotator_noise=args.annotator_noise,
        acoustic_noise=args.acoustic_noise,
        linguistic_noise=args.linguistic_noise,
        with_audio=not args.no_audio,
    )
    corpus = generate_synthetic(spec, jobs=jobs)
    out = Path(args.out)
    save_corpus(corpus, out)
    return RunResult(manifest=out / "manifest.json", outputs=[str(out)], seeds=[args.seed])


def _extract(conv, args) -> FeatureStream:
    if args.kind == "mfcc":
        if conv.audio is None:
            raise InvalidArgumentError(f"{conv.id}: no audio to extract MFCC from")
        return aggregate_to_segments(mfcc(conv.audio, conv.sample_rate), conv.duration, source="mfcc")
    if args.kind == "tokens":
        if not args.tokens:
            raise InvalidArgumentError("--kind tokens needs --tokens <template with {id}>")
        tokens, dim = read_token_file(args.tokens.format(id=conv.id))
        source = f"tokens-{args.context}" if args.context else "tokens"
        return align_tokens_to_grid(tokens, conv.duration, source=source, dim=dim)
    channel = args.kind.split("-", 1)[1]
    return export_synthetic_modality(conv, channel, args.dim, args.noise, args.seed)


def cmd_features(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    out = Path(args.out) if args.out else root / "features" / args.kind
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(corpus.conversations)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        streams = list(pool.map(lambda i: _extract(corpus.conversations[i], args), ids))
    outputs = []
    for conv_id, stream in zip(ids, streams):
        path = out / f"{conv_id}.fstm"
        write_stream(path, stream)
        outputs.append(str(path))
    logger.info(f"Wrote {len(outputs)} {args.kind} streams to {out}")
    return RunResult(manifest=out / "manifest.json", inputs=[str(root)], outputs=outputs, seeds=[args.seed])


def cmd_train(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    streams = load_modality(root, corpus, args.modality)
    model, record = train(corpus, streams, _train_config(args, jobs))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    record_path = out.with_suffix(".record.csv")
    record.to_csv(record_path)
    return RunResult(
        manifest=_manifest_for(out), inputs=[str(root)], outputs=[str(out), str(record_path)], seeds=[args.seed],
        contexts=contexts_of({args.modality: streams}),
    )


def cmd_eval(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    model = load_model(args.model)
    streams = load_modality(root, corpus, args.modality, corpus.split.ids(args.split))
    report = evaluate(model, corpus, streams, args.split, args.reference, z_mult=args.z, jobs=jobs)
    name = args.name or Path(args.model).stem
    out = Path(args.out)
    write_reports(out, {name: report})
    print(f"{name}: {report.to_cell()}")
    return RunResult(
        manifest=_manifest_for(out), inputs=[str(root), args.model], outputs=[str(out)],
        contexts=contexts_of({args.modality: streams}),
    )


def cmd_fuse(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    streams_a = load_modality(root, corpus, args.acoustic)
    streams_l = load_modality(root, corpus, args.linguistic)
    members = None
    inputs = [str(root)]
    if args.models:
        if args.kind != "decision":
            raise InvalidArgumentError("--models only applies to decision fusion")
        members = tuple(load_model(p) for p in args.models)
        inputs.extend(args.models)
    fusion = _build(FusionConfig, kind=args.kind, average=args.average)
    outcome = train_fusion(args.kind, corpus, streams_a, streams_l, _train_config(args, jobs), fusion, members)

    level = args.kind
    if outcome.decision is not None:
        level = f"decision {outcome.decision.describe(style='ratio')}"
        print(f"{outcome.decision.describe(args.acoustic, args.linguistic)}: {outcome.decision.describe(style='ratio')}")
    out = Path(args.out)
    write_fusion_report(out, [FusionRow(level, outcome.dev, outcome.test)])
    return RunResult(
        manifest=_manifest_for(out), inputs=inputs, outputs=[str(out)], seeds=[args.seed],
        contexts=contexts_of({args.acoustic: streams_a, args.linguistic: streams_l}),
    )


def cmd_sweep(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    streams = load_modality(root, corpus, args.modality)
    result = seed_sweep(corpus, streams, _train_config(args, jobs), args.seeds)
    out = Path(args.out)
    result.to_csv(out)
    print(f"Test CCC {result.minimum:.4f} to {result.maximum:.4f} (mean {result.mean:.4f}, std {result.std:.4f})")
    return RunResult(
        manifest=_manifest_for(out), inputs=[str(root)], outputs=[str(out)], seeds=list(args.seeds),
        contexts=contexts_of({args.modality: streams}),
    )


def cmd_annotators(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    streams = load_modality(root, corpus, args.modality)
    table = per_annotator_protocol(corpus, streams, _train_config(args, jobs))
    out = Path(args.out)
    table.to_csv(out)
    return RunResult(
        manifest=_manifest_for(out), inputs=[str(root)], outputs=[str(out)], seeds=[args.seed],
        contexts=contexts_of({args.modality: streams}),
    )


def cmd_lingua(args, jobs: int) -> RunResult:
    root = Path(args.corpus)
    corpus = load_corpus(root, jobs=jobs)
    ids = corpus.split.ids(args.split) if args.split else sorted(corpus.conversations)
    options = {
        "bin_width": args.bin,
        "frustration_threshold": args.threshold,
        "drop_delta": args.delta,
    }
    if args.lexicon:
        options["lexicon"] = load_lexicon(args.lexicon)
    results = analyze_conversations([corpus.conversations[i] for i in ids], jobs=jobs, **options)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for analysis in results:
        frames = {
            "dynamics": analysis.dynamics,
            "summary": profile_summary(analysis.profile),
            "events": events_frame(analysis.events),
        }
        for suffix, frame in frames.items():
            path = out / f"{analysis.conv_id}.{suffix}.csv"
            frame.to_csv(path, index=False, float_format="%.4f", lineterminator="\n")
            outputs.append(str(path))
    return RunResult(manifest=out / "manifest.json", inputs=[str(root)], outputs=outputs)


def _add_training_arguments(parser: argparse.ArgumentParser, modality: bool = True) -> None:
    parser.add_argument("--corpus", required=True, help="Corpus directory")
    if modality:
        parser.add_argument("--modality", default="mfcc", help="Feature kind under <corpus>/features, or stream:<template>")
    parser.add_argument("--reference", default="gold", help="gold or annotator:<id>")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=500)
    parser.add_argument("--batch", type=int, default=8, help="Conversations per batch")
    parser.add_argument("--lr", type=float, default=0.001)
    parser.add_argument("--widths", type=_int_list, default=[200, 64, 32, 32], help="Units per layer, e.g. 200,64,32,32")
    parser.add_argument("--halve-widths", action="store_true", help="Count widths across both directions")
    parser.add_argument("--no-shuffle", action="store_true", help="Keep conversation order fixed across epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dimemo", description="Continuous satisfaction prediction toolkit")
    parser.add_argument("--version", action="version", version=f"dimemo {__version__}")
    parser.add_argument("--jobs", type=int, default=None, help="Worker threads (0 = all physical cores)")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Generate a synthetic corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--train", type=int, default=60)
    synth.add_argument("--dev", type=int, default=10)
    synth.add_argument("--test", type=int, default=10)
    synth.add_argument("--mean-duration", type=float, default=60.0)
    synth.add_argument("--min-duration", type=float, default=32.0)
    synth.add_argument("--max-duration", type=float, default=2460.0)
    synth.add_argument("--annotators", type=int, default=3)
    synth.add_argument("--annotator-noise", type=float, default=0.05)
    synth.add_argument("--acoustic-noise", type=float, default=0.3)
    synth.add_argument("--linguistic-noise", type=float, default=0.1)
    synth.add_argument("--no-audio", action="store_true", help="Skip the audio.wav files (no MFCC extraction possible)")
    synth.set_defaults(handler=cmd_synth)

    features = commands.add_parser("features", help="Extract or export per-conversation feature streams")
    features.add_argument("corpus")
    features.add_argument("--kind", choices=FEATURE_KINDS, required=True)
    features.add_argument("--out", help="Output directory (default <corpus>/features/<kind>)")
    features.add_argument("--dim", type=int, default=8, help="Dimension of synthetic exports")
    features.add_argument("--noise", type=float, default=0.1, help="Noise of synthetic exports")
    features.add_argument("--seed", type=int, default=0)
    features.add_argument("--tokens", help="Token embedding file template with {id}")
    features.add_argument("--context", choices=[v.value for v in ContextVariant], help="Context variant of the token embeddings")
    features.set_defaults(handler=cmd_features)

    train_cmd = commands.add_parser("train", help="Train a single-modality regressor")
    _add_training_arguments(train_cmd)
    train_cmd.add_argument("--out", required=True, help="Model file")
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="Score a model with its confidence interval")
    eval_cmd.add_argument("--corpus", required=True)
    eval_cmd.add_argument("--model", required=True)
    eval_cmd.add_argument("--modality", default="mfcc")
    eval_cmd.add_argument("--split", default="test", choices=["train", "dev", "test"])
    eval_cmd.add_argument("--reference", default="gold")
    eval_cmd.add_argument("--z", type=float, default=1.64, help="Confidence interval multiplier")
    eval_cmd.add_argument("--name", help="Report row name (default model file stem)")
    eval_cmd.add_argument("--out", required=True)
    eval_cmd.set_defaults(handler=cmd_eval)

    fuse = commands.add_parser("fuse", help="Train and score a fusion strategy")
    _add_training_arguments(fuse, modality=False)
    fuse.add_argument("--kind", required=True, choices=["feature", "model-early", "model-late", "decision"])
    fuse.add_argument("--acoustic", default="synthetic-acoustic", help="Acoustic modality")
    fuse.add_argument("--linguistic", default="synthetic-linguistic", help="Linguistic modality")
    fuse.add_argument("--models", nargs=2, metavar=("ACOUSTIC", "LINGUISTIC"), help="Trained members for decision fusion")
    fuse.add_argument("--average", default="predictions", choices=["predictions", "ccc"])
    fuse.add_argument("--out", required=True)
    fuse.set_defaults(handler=cmd_fuse)

    sweep = commands.add_parser("sweep", help="Train once per seed and report the spread")
    _add_training_arguments(sweep)
    sweep.add_argument("--seeds", type=_int_list, required=True, help="Comma-separated seeds")
    sweep.add_argument("--out", required=True)
    sweep.set_defaults(handler=cmd_sweep)

    annotators = commands.add_parser("annotators", help="Per-annotator training protocol")
    _add_training_arguments(annotators)
    annotators.add_argument("--out", required=True)
    annotators.set_defaults(handler=cmd_annotators)

    lingua = commands.add_parser("lingua", help="Orality clue dynamics and events")
    lingua.add_argument("--corpus", required=True)
    lingua.add_argument("--split", choices=["train", "dev", "test"])
    lingua.add_argument("--bin", type=float, default=10.0, help="Bin width in seconds")
    lingua.add_argument("--threshold", type=float, default=0.4, help="High-frustration threshold")
    lingua.add_argument("--delta", type=float, default=0.2, help="Drop magnitude within 10 s")
    lingua.add_argument("--lexicon", help="Lexicon directory")
    lingua.add_argument("--out", required=True, help="Output directory")
    lingua.set_defaults(handler=cmd_lingua)
    return parser


def _snapshot(args) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "handler"}


def _one_line(error: Exception) -> str:
    return " ".join(str(error).split())


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        jobs = resolve_jobs(args.jobs)
        started = time.perf_counter()
        logger.info(f"dimemo {__version__}: {args.command} (jobs {jobs})")
        handler: Callable[[argparse.Namespace, int], RunResult] = args.handler
        result = handler(args, jobs)
        RunManifest(
            command=args.command,
            args=json.loads(json.dumps(_snapshot(args), default=str)),
            seeds=result.seeds,
            inputs=result.inputs,
            outputs=result.outputs,
            wall_time=time.perf_counter() - started,
            cpu_count=psutil.cpu_count(),
            rss_mb=psutil.Process().memory_info().rss / (1024 * 1024),
            contexts=result.contexts,
        ).write(result.manifest)
    except ConfigError as e:
        print(f"config: {_one_line(e)}", file=sys.stderr)
        return 2
    except DimemoError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"{e.error_class}: {_one_line(e)}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"io: {_one_line(e)}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
