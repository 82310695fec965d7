"""Training loop, model selection on Dev, seed sweeps and the per-annotator protocol."""

import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from corpus import Corpus, reference_track
from dsp import FeatureStream, fit_norm
from errors import InvalidArgumentError, LengthMismatchError, TrainingDivergedError
from metrics import DEFAULT_Z_MULTIPLIER, CccReport, ccc, ccc_report, coefficient_of_variation
from neural import (
    DEFAULT_WIDTHS,
    AdamState,
    ModelConfig,
    RegressorModel,
    adam_step,
    forward,
    forward_normalized,
    init_model,
    loss_and_gradients,
    normalize_inputs,
)

logger = logging.getLogger(__name__)

REFERENCE_PATTERN = re.compile(r"^(gold|annotator:a\d+)$")

StreamInput = Union[FeatureStream, Sequence[FeatureStream]]
Streams = Mapping[str, StreamInput]


class TrainConfig(BaseModel):
    """Hyper-parameters of one training run."""

    batch_size: int = Field(8, ge=1, description="Conversations per batch")
    lr: float = Field(0.001, gt=0)
    epochs: int = Field(500, ge=1)
    shuffle: bool = Field(True, description="Reassign conversations to batches every epoch")
    seed: int = 0
    reference: str = "gold"
    widths: List[int] = Field(default_factory=lambda: list(DEFAULT_WIDTHS))
    per_direction: bool = True
    jobs: int = Field(1, ge=1)

    @field_validator("reference")
    @classmethod
    def _reference(cls, value: str) -> str:
        if not REFERENCE_PATTERN.match(value):
            raise ValueError(f"reference must be 'gold' or 'annotator:<id>', got {value!r}")
        return value


@dataclass(frozen=True)
class StepInfo:
    """What one optimizer step saw."""

    epoch: int
    ids: Tuple[str, ...]
    steps: int
    loss: float


StepHook = Callable[[StepInfo], None]


@dataclass
class TrainRecord:
    """Per-epoch history and final scores of a run."""

    seed: int
    dev_ccc: List[float] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    best_epoch: int = 0
    dev: Optional[CccReport] = None
    test: Optional[CccReport] = None
    steps_processed: int = 0
    wall_time: float = field(default=0.0, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.dev_ccc)

    @property
    def best_dev_ccc(self) -> float:
        return self.dev_ccc[self.best_epoch - 1]

    def to_frame(self) -> pd.DataFrame:
        rows = [[str(e), d, l] for e, (d, l) in enumerate(zip(self.dev_ccc, self.train_loss), start=1)]
        if self.best_epoch:
            rows.append([f"best:{self.best_epoch}", self.best_dev_ccc, self.train_loss[self.best_epoch - 1]])
        return pd.DataFrame(rows, columns=["epoch", "dev_ccc", "train_loss"])

    def to_csv(self, path: Union[str, Path]) -> None:
        """Write ``epoch,dev_ccc,train_loss`` rows plus a ``best:<epoch>`` summary row."""
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


@dataclass
class _Prepared:
    inputs: Dict[str, List[np.ndarray]]
    refs: Dict[str, np.ndarray]


def _references(corpus: Corpus, ids: Sequence[str], streams: Streams, reference: str) -> Dict[str, np.ndarray]:
    refs = {}
    for conv_id in ids:
        if conv_id not in streams:
            raise InvalidArgumentError(f"missing stream for conversation {conv_id}")
        track = reference_track(corpus.conversations[conv_id], reference).values
        item = streams[conv_id]
        length = len(item) if isinstance(item, FeatureStream) else len(item[0])
        if length != len(track):
            raise LengthMismatchError(f"{conv_id}: stream has {length} segments, reference has {len(track)}")
        refs[conv_id] = track
    return refs


def _modalities(item: StreamInput) -> List[FeatureStream]:
    return [item] if isinstance(item, FeatureStream) else list(item)


def fit_input_norms(streams: Streams, ids: Sequence[str]) -> List:
    """One NormStats per modality, fitted on the given conversations."""
    if not ids:
        raise InvalidArgumentError("cannot fit normalization on an empty split")
    per_modality = list(zip(*(_modalities(streams[i]) for i in ids)))
    return [fit_norm(group) for group in per_modality]


def default_model_config(streams: Streams, ids: Sequence[str], config: TrainConfig) -> ModelConfig:
    """Single-input architecture sized from the first stream."""
    dims = [s.dim for s in _modalities(streams[ids[0]])]
    if len(dims) != 1:
        raise InvalidArgumentError(f"{len(dims)} modalities need an explicit fused ModelConfig")
    return ModelConfig(input_dims=dims, widths=config.widths, seed=config.seed, per_direction=config.per_direction)


def _concatenated_predictions(model: RegressorModel, prepared: _Prepared, ids: Sequence[str], jobs: int):
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        preds = list(pool.map(lambda i: forward_normalized(model, prepared.inputs[i]), ids))
    return np.concatenate(preds), np.concatenate([prepared.refs[i] for i in ids])


def train(
    corpus: Corpus,
    streams: Streams,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    hook: Optional[StepHook] = None,
) -> Tuple[RegressorModel, TrainRecord]:
    """Train a regressor and keep the parameters of the best Dev epoch.

    Batches hold whole conversations of any length; the loss of a batch is
    ``1 - CCC`` over its concatenated predictions. Dev CCC is computed over
    all concatenated Dev conversations after every epoch; ties keep the
    earliest epoch.

    Args:
        corpus: Conversations and split.
        streams: Conversation id to a stream, or to one stream per modality.
        config: Hyper-parameters and reference policy.
        model_config: Architecture; a single-input default is derived when omitted.
        hook: Called after every optimizer step.

    Returns:
        The best-Dev model snapshot and the run's TrainRecord.

    Raises:
        InvalidArgumentError: On a missing stream or reference.
        TrainingDivergedError: If the loss or Dev CCC stops being finite.
    """
    started = time.perf_counter()
    train_ids = corpus.split.ids("train")
    dev_ids = corpus.split.ids("dev")
    test_ids = corpus.split.ids("test")
    if not train_ids or not dev_ids:
        raise InvalidArgumentError("training needs non-empty train and dev splits")
    all_ids = train_ids + dev_ids + test_ids
    refs = _references(corpus, all_ids, streams, config.reference)

    if model_config is None:
        model_config = default_model_config(streams, train_ids, config)
    model = init_model(model_config, fit_input_norms(streams, train_ids))
    prepared = _Prepared({i: normalize_inputs(model, streams[i]) for i in all_ids}, refs)

    logger.info(
        f"Training on {len(train_ids)} conversations (reference {config.reference}, seed {config.seed}, "
        f"{model.parameter_count} parameters, {config.epochs} epochs)"
    )
    shuffler = np.random.default_rng([config.seed, 1])
    adam = AdamState.for_model(model, lr=config.lr)
    record = TrainRecord(seed=config.seed)
    best_params = None

    for epoch in range(1, config.epochs + 1):
        order = list(train_ids)
        if config.shuffle:
            shuffler.shuffle(order)
        losses = []
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(
                model, [prepared.inputs[i] for i in ids], [refs[i] for i in ids], jobs=config.jobs
            )
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(epoch, f"non-finite loss or gradient on batch {ids}")
            adam_step(model, grads, adam)
            steps = sum(len(refs[i]) for i in ids)
            record.steps_processed += steps
            losses.append(loss)
            if hook is not None:
                hook(StepInfo(epoch=epoch, ids=tuple(ids), steps=steps, loss=loss))

        preds, gold = _concatenated_predictions(model, prepared, dev_ids, config.jobs)
        dev = ccc(preds, gold).ccc
        if not math.isfinite(dev):
            raise TrainingDivergedError(epoch, "non-finite Dev CCC")
        record.dev_ccc.append(dev)
        record.train_loss.append(float(np.mean(losses)))
        logger.debug(f"Epoch {epoch}: train loss {record.train_loss[-1]:.4f}, dev CCC {dev:.4f}")
        if best_params is None or dev > record.best_dev_ccc:
            record.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            logger.info(f"New best Dev CCC {dev:.4f} at epoch {epoch}")

    model.params = best_params
    preds, gold = _concatenated_predictions(model, prepared, dev_ids, config.jobs)
    record.dev = ccc_report(preds, gold)
    if test_ids:
        preds, gold = _concatenated_predictions(model, prepared, test_ids, config.jobs)
        record.test = ccc_report(preds, gold)
    record.wall_time = time.perf_counter() - started
    logger.info(
        f"Training done: best epoch {record.best_epoch}, Dev CCC {record.dev.ccc:.4f}"
        + (f", Test CCC {record.test.ccc:.4f}" if record.test else "")
        + f" ({record.wall_time:.1f} s)"
    )
    return model, record


def predict(model: RegressorModel, streams: Streams, ids: Sequence[str], jobs: int = 1) -> Dict[str, np.ndarray]:
    """Predictions per conversation, at ``AppConfig.precision``."""
    missing = [i for i in ids if i not in streams]
    if missing:
        raise InvalidArgumentError(f"missing streams for {missing}")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        preds = list(pool.map(lambda i: forward(model, streams[i]), ids))
    return dict(zip(ids, preds))


def evaluate(
    model: RegressorModel,
    corpus: Corpus,
    streams: Streams,
    split: str = "test",
    reference: str = "gold",
    z_mult: float = DEFAULT_Z_MULTIPLIER,
    jobs: int = 1,
) -> CccReport:
    """CCC with confidence interval over the concatenated conversations of a split."""
    ids = corpus.split.ids(split)
    if not ids:
        raise InvalidArgumentError(f"split {split!r} is empty")
    refs = _references(corpus, ids, streams, reference)
    preds = predict(model, streams, ids, jobs=jobs)
    return ccc_report(np.concatenate([preds[i] for i in ids]), np.concatenate([refs[i] for i in ids]), z_mult=z_mult)


@dataclass
class SweepResult:
    """Dev and Test CCC of runs that differ only in their seed."""

    seeds: List[int]
    dev_ccc: List[float]
    test_ccc: List[float]

    @property
    def minimum(self) -> float:
        return float(np.min(self.test_ccc))

    @property
    def maximum(self) -> float:
        return float(np.max(self.test_ccc))

    @property
    def mean(self) -> float:
        return float(np.mean(self.test_ccc))

    @property
    def std(self) -> float:
        return float(np.std(self.test_ccc))

    @property
    def spread(self) -> float:
        return self.maximum - self.minimum

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"seed": [str(s) for s in self.seeds], "dev_ccc": self.dev_ccc, "test_ccc": self.test_ccc})
        summary = pd.DataFrame({
            "seed": ["min", "max", "mean", "std"],
            "dev_ccc": [np.min(self.dev_ccc), np.max(self.dev_ccc), np.mean(self.dev_ccc), np.std(self.dev_ccc)],
            "test_ccc": [self.minimum, self.maximum, self.mean, self.std],
        })
        return pd.concat([frame, summary], ignore_index=True)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.4f", lineterminator="\n")


def seed_sweep(
    corpus: Corpus,
    streams: Streams,
    config: TrainConfig,
    seeds: Sequence[int],
    model_config: Optional[ModelConfig] = None,
) -> SweepResult:
    """Train once per seed and summarize the Test CCC spread."""
    if len(seeds) < 2:
        raise InvalidArgumentError(f"a seed sweep needs at least 2 seeds, got {len(seeds)}")
    result = SweepResult(seeds=list(seeds), dev_ccc=[], test_ccc=[])
    for seed in seeds:
        run_config = config.model_copy(update={"seed": seed})
        arch = model_config.model_copy(update={"seed": seed}) if model_config is not None else None
        _, record = train(corpus, streams, run_config, model_config=arch)
        if record.test is None:
            raise InvalidArgumentError("seed sweep needs a non-empty test split")
        result.dev_ccc.append(record.dev.ccc)
        result.test_ccc.append(record.test.ccc)
    logger.info(f"Seed sweep over {len(seeds)} seeds: Test CCC {result.minimum:.4f} to {result.maximum:.4f}")
    return result


ANNOTATOR_COLUMNS = ["individual_dev", "individual_test", "averaged_dev", "averaged_test"]


@dataclass
class AnnotatorTable:
    """One model per annotator, scored on its own labels and on the averaged gold."""

    reports: Dict[str, Dict[str, CccReport]]

    @property
    def annotators(self) -> List[str]:
        return sorted(self.reports)

    def scores(self, column: str) -> List[float]:
        return [self.reports[a][column].ccc for a in self.annotators]

    def average(self, column: str) -> float:
        return float(np.mean(self.scores(column)))

    def cv(self, column: str) -> float:
        return coefficient_of_variation(self.scores(column))

    def to_frame(self) -> pd.DataFrame:
        rows = [[a] + self.scores_row(a) for a in self.annotators]
        rows.append(["AVG"] + [self.average(c) for c in ANNOTATOR_COLUMNS])
        rows.append(["CV"] + [self.cv(c) for c in ANNOTATOR_COLUMNS])
        return pd.DataFrame(rows, columns=["model"] + ANNOTATOR_COLUMNS)

    def scores_row(self, annotator: str) -> List[float]:
        return [self.reports[annotator][c].ccc for c in ANNOTATOR_COLUMNS]

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.4f", lineterminator="\n")


def per_annotator_protocol(
    corpus: Corpus,
    streams: Streams,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
) -> AnnotatorTable:
    """Train on each annotator's labels; score on them and on the gold average."""
    annotators = corpus.annotators()
    if len(annotators) < 2:
        raise InvalidArgumentError(f"per-annotator protocol needs at least 2 annotators, got {len(annotators)}")
    reports = {}
    for annotator in annotators:
        own = f"annotator:{annotator}"
        model, _ = train(corpus, streams, config.model_copy(update={"reference": own}), model_config=model_config)
        reports[annotator] = {
            "individual_dev": evaluate(model, corpus, streams, "dev", own, jobs=config.jobs),
            "individual_test": evaluate(model, corpus, streams, "test", own, jobs=config.jobs),
            "averaged_dev": evaluate(model, corpus, streams, "dev", "gold", jobs=config.jobs),
            "averaged_test": evaluate(model, corpus, streams, "test", "gold", jobs=config.jobs),
        }
        logger.info(f"Annotator {annotator}: Test CCC {reports[annotator]['individual_test'].ccc:.4f}")
    return AnnotatorTable(reports)
