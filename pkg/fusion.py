"""Acoustic/linguistic fusion at the feature, model and decision levels.

Feature fusion concatenates the two streams per segment. Model fusion runs
the first layer (early) or the first three layers (late) once per modality
and concatenates their hidden sequences before the shared layers. Decision
fusion averages the predictions of two trained models with a weight
searched on Dev.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from corpus import Corpus, reference_track
from dsp import FeatureStream
from errors import InvalidArgumentError, LengthMismatchError
from metrics import CccReport, ccc, ccc_report, relative_difference
from neural import ModelConfig, RegressorModel
from training import TrainConfig, TrainRecord, predict, train

logger = logging.getLogger(__name__)

FusionKind = Literal["feature", "model-early", "model-late", "decision"]
SPLIT_LAYERS = {"model-early": 1, "model-late": 3}


class FusionConfig(BaseModel):
    """Fusion strategy and, for decision fusion, the weight grid."""

    kind: FusionKind = "decision"
    grid_low: float = Field(0.10, gt=0, lt=1)
    grid_high: float = Field(0.90, gt=0, lt=1)
    grid_step: float = Field(0.01, gt=0)
    average: Literal["predictions", "ccc"] = Field(
        "predictions", description="Weight predictions element-wise, or weight the two CCC scores"
    )

    @model_validator(mode="after")
    def _grid(self) -> "FusionConfig":
        if self.grid_low > self.grid_high:
            raise ValueError(f"grid_low {self.grid_low} exceeds grid_high {self.grid_high}")
        return self

    def grid(self) -> np.ndarray:
        """Acoustic weights from low to high inclusive, rounded to the step's precision."""
        count = int(round((self.grid_high - self.grid_low) / self.grid_step)) + 1
        return np.round(self.grid_low + self.grid_step * np.arange(count), 10)


def fuse_features(a: FeatureStream, l: FeatureStream) -> FeatureStream:
    """Concatenate per segment, acoustic block first."""
    if len(a) != len(l):
        raise LengthMismatchError(f"cannot fuse streams of {len(a)} and {len(l)} segments")
    return FeatureStream(np.hstack([a.segments, l.segments]), source=f"{a.source}+{l.source}")


def split_features(stream: FeatureStream, dim_a: int) -> Tuple[FeatureStream, FeatureStream]:
    """Undo ``fuse_features`` given the acoustic dimension."""
    if not 0 < dim_a < stream.dim:
        raise InvalidArgumentError(f"acoustic dim {dim_a} does not split a {stream.dim}-dim stream")
    sources = stream.source.split("+", 1) if "+" in stream.source else ["", ""]
    return (
        FeatureStream(stream.segments[:, :dim_a], source=sources[0]),
        FeatureStream(stream.segments[:, dim_a:], source=sources[1]),
    )


def build_model_fusion(kind: str, config_a: ModelConfig, config_l: ModelConfig) -> ModelConfig:
    """Two-branch architecture from two single-modality configurations.

    Args:
        kind: ``early`` / ``model-early`` (branch after layer 1) or
            ``late`` / ``model-late`` (branch after layer 3).
        config_a: Acoustic single-input configuration; supplies the seed.
        config_l: Linguistic single-input configuration.

    Raises:
        InvalidArgumentError: If the kind is unknown or the configurations
            differ in depth, widths or width convention.
    """
    key = kind if kind.startswith("model-") else f"model-{kind}"
    if key not in SPLIT_LAYERS:
        raise InvalidArgumentError(f"unknown model fusion kind {kind!r}")
    split = SPLIT_LAYERS[key]
    for name, config in (("acoustic", config_a), ("linguistic", config_l)):
        if len(config.input_dims) != 1:
            raise InvalidArgumentError(f"{name} configuration must have a single input")
    if config_a.widths != config_l.widths or config_a.per_direction != config_l.per_direction:
        raise InvalidArgumentError(f"branch widths differ: {config_a.widths} vs {config_l.widths}")
    if len(config_a.widths) <= split:
        raise InvalidArgumentError(f"{key} needs more than {split} layers, got {len(config_a.widths)}")
    return ModelConfig(
        input_dims=[config_a.input_dims[0], config_l.input_dims[0]],
        widths=list(config_a.widths),
        split=split,
        seed=config_a.seed,
        per_direction=config_a.per_direction,
    )


def decision_fuse(pred_a, pred_l, w_a: float) -> np.ndarray:
    """Element-wise ``w_a * pred_a + (1 - w_a) * pred_l``."""
    pred_a = np.asarray(pred_a, dtype=np.float64)
    pred_l = np.asarray(pred_l, dtype=np.float64)
    if pred_a.shape != pred_l.shape:
        raise LengthMismatchError(f"cannot fuse predictions of {pred_a.size} and {pred_l.size} segments")
    if not 0.0 <= w_a <= 1.0:
        raise InvalidArgumentError(f"acoustic weight must lie in [0, 1], got {w_a}")
    return np.where(pred_a == pred_l, pred_a, w_a * pred_a + (1.0 - w_a) * pred_l)


def _short(weight: float) -> str:
    text = f"{weight:.2f}"
    return text[1:] if text.startswith("0.") else text


def describe_weights(w_a: float, name_a: str = "acoustic", name_l: str = "linguistic", style: str = "table") -> str:
    """Render decision weights as ``.72 CamemBERT + .28 Wav2Vec`` or ``0.72 / 0.28``.

    The ``table`` style lists the heavier modality first; the ``ratio``
    style is acoustic / linguistic.
    """
    w_l = 1.0 - w_a
    if style == "ratio":
        return f"{w_a:.2f} / {w_l:.2f}"
    parts = [(w_a, name_a), (w_l, name_l)]
    if w_l > w_a:
        parts.reverse()
    return " + ".join(f"{_short(w)} {name}" for w, name in parts)


def grid_scores(pred_a, pred_l, ref, config: FusionConfig, jobs: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Dev score at every grid weight, over concatenated predictions."""
    weights = config.grid()
    if config.average == "ccc":
        score_a = ccc(pred_a, ref).ccc
        score_l = ccc(pred_l, ref).ccc
        return weights, weights * score_a + (1.0 - weights) * score_l
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        scores = list(pool.map(lambda w: ccc(decision_fuse(pred_a, pred_l, w), ref).ccc, weights))
    return weights, np.asarray(scores)


def select_weight(scores: np.ndarray) -> int:
    """Index of the best score; ties keep the smallest weight."""
    return int(np.argmax(scores))


@dataclass
class DecisionResult:
    """Selected decision weights with the Dev grid that certifies them."""

    weight_a: float
    dev: CccReport
    test: Optional[CccReport]
    weights: np.ndarray = field(repr=False)
    dev_scores: np.ndarray = field(repr=False)

    @property
    def weight_l(self) -> float:
        return 1.0 - self.weight_a

    @property
    def certified(self) -> bool:
        """Dev score at the selected weight is at least every other grid score."""
        selected = self.dev_scores[int(np.flatnonzero(self.weights == self.weight_a)[0])]
        return bool(np.all(selected >= self.dev_scores))

    def describe(self, name_a: str = "acoustic", name_l: str = "linguistic", style: str = "table") -> str:
        return describe_weights(self.weight_a, name_a, name_l, style)


def _fused_report(pred_a, pred_l, ref, w_a: float, config: FusionConfig) -> CccReport:
    if config.average == "ccc":
        score = w_a * ccc(pred_a, ref).ccc + (1.0 - w_a) * ccc(pred_l, ref).ccc
        return CccReport(ccc=float(score), ci_low=float("nan"), ci_high=float("nan"), n=len(ref))
    return ccc_report(decision_fuse(pred_a, pred_l, w_a), ref)


def search_weight_from_predictions(
    dev: Tuple[np.ndarray, np.ndarray, np.ndarray],
    test: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
    config: Optional[FusionConfig] = None,
    jobs: int = 1,
) -> DecisionResult:
    """Grid search on concatenated ``(pred_a, pred_l, ref)`` Dev arrays."""
    config = config or FusionConfig()
    weights, scores = grid_scores(*dev, config=config, jobs=jobs)
    w_a = float(weights[select_weight(scores)])
    result = DecisionResult(
        weight_a=w_a,
        dev=_fused_report(*dev, w_a, config),
        test=_fused_report(*test, w_a, config) if test is not None else None,
        weights=weights,
        dev_scores=scores,
    )
    logger.info(f"Selected decision weights {result.describe(style='ratio')} (Dev CCC {result.dev.ccc:.4f})")
    return result


def _split_arrays(model_a, model_l, corpus, streams_a, streams_l, split, reference, jobs):
    ids = corpus.split.ids(split)
    preds_a = predict(model_a, streams_a, ids, jobs=jobs)
    preds_l = predict(model_l, streams_l, ids, jobs=jobs)
    refs = [reference_track(corpus.conversations[i], reference).values for i in ids]
    for conv_id, a, l, r in zip(ids, preds_a.values(), preds_l.values(), refs):
        if not len(a) == len(l) == len(r):
            raise LengthMismatchError(f"{conv_id}: predictions {len(a)}/{len(l)} vs reference {len(r)} segments")
    return (
        np.concatenate([preds_a[i] for i in ids]),
        np.concatenate([preds_l[i] for i in ids]),
        np.concatenate(refs),
    )


def search_decision_weight(
    models: Tuple[RegressorModel, RegressorModel],
    corpus: Corpus,
    streams: Tuple[Mapping[str, FeatureStream], Mapping[str, FeatureStream]],
    reference: str = "gold",
    config: Optional[FusionConfig] = None,
    jobs: int = 1,
) -> DecisionResult:
    """Pick the acoustic weight maximizing fused Dev CCC; report Dev and Test at it."""
    model_a, model_l = models
    streams_a, streams_l = streams
    dev = _split_arrays(model_a, model_l, corpus, streams_a, streams_l, "dev", reference, jobs)
    test = None
    if corpus.split.test:
        test = _split_arrays(model_a, model_l, corpus, streams_a, streams_l, "test", reference, jobs)
    return search_weight_from_predictions(dev, test, config=config, jobs=jobs)


@dataclass
class FusedModel:
    """Trained members of one fusion strategy."""

    kind: str
    models: List[RegressorModel]
    weight_a: Optional[float] = None

    def __post_init__(self):
        expected = 2 if self.kind == "decision" else 1
        if len(self.models) != expected:
            raise InvalidArgumentError(f"{self.kind} fusion holds {expected} model(s), got {len(self.models)}")
        if self.kind == "decision" and (self.weight_a is None or not 0.0 <= self.weight_a <= 1.0):
            raise InvalidArgumentError(f"decision fusion needs a weight in [0, 1], got {self.weight_a}")


def fused_inputs(kind: str, streams_a: Mapping[str, FeatureStream], streams_l: Mapping[str, FeatureStream]) -> Dict:
    """Per-conversation model inputs for feature or model fusion."""
    missing = sorted(set(streams_a) ^ set(streams_l))
    if missing:
        raise InvalidArgumentError(f"conversations without both modalities: {missing}")
    if kind == "feature":
        return {i: fuse_features(streams_a[i], streams_l[i]) for i in sorted(streams_a)}
    return {i: (streams_a[i], streams_l[i]) for i in sorted(streams_a)}


def predict_fused(fused: FusedModel, streams_a, streams_l, ids: Sequence[str], jobs: int = 1) -> Dict[str, np.ndarray]:
    if fused.kind == "decision":
        preds_a = predict(fused.models[0], streams_a, ids, jobs=jobs)
        preds_l = predict(fused.models[1], streams_l, ids, jobs=jobs)
        return {i: decision_fuse(preds_a[i], preds_l[i], fused.weight_a) for i in ids}
    return predict(fused.models[0], fused_inputs(fused.kind, streams_a, streams_l), ids, jobs=jobs)


@dataclass
class FusionOutcome:
    """A trained fusion strategy and its scores."""

    fused: FusedModel
    dev: CccReport
    test: Optional[CccReport]
    records: List[TrainRecord]
    decision: Optional[DecisionResult] = None


def train_fusion(
    kind: FusionKind,
    corpus: Corpus,
    streams_a: Mapping[str, FeatureStream],
    streams_l: Mapping[str, FeatureStream],
    config: TrainConfig,
    fusion: Optional[FusionConfig] = None,
    members: Optional[Tuple[RegressorModel, RegressorModel]] = None,
) -> FusionOutcome:
    """Train one fusion strategy end to end.

    Decision fusion trains one model per modality unless ``members`` are given.
    """
    fusion = fusion or FusionConfig(kind=kind)
    logger.info(f"Training {kind} fusion")
    if kind == "decision":
        records = []
        if members is None:
            model_a, record_a = train(corpus, streams_a, config)
            model_l, record_l = train(corpus, streams_l, config)
            members, records = (model_a, model_l), [record_a, record_l]
        result = search_decision_weight(members, corpus, (streams_a, streams_l), config.reference, fusion, config.jobs)
        fused = FusedModel(kind, list(members), result.weight_a)
        return FusionOutcome(fused, result.dev, result.test, records, result)

    inputs = fused_inputs(kind, streams_a, streams_l)
    model_config = None
    if kind != "feature":
        first = corpus.split.ids("train")[0]
        single_a = ModelConfig(input_dims=[streams_a[first].dim], widths=config.widths, seed=config.seed, per_direction=config.per_direction)
        single_l = single_a.model_copy(update={"input_dims": [streams_l[first].dim]})
        model_config = build_model_fusion(kind, single_a, single_l)
    model, record = train(corpus, inputs, config, model_config=model_config)
    return FusionOutcome(FusedModel(kind, [model]), record.dev, record.test, [record])


@dataclass(frozen=True)
class FusionRow:
    level: str
    dev: CccReport
    test: Optional[CccReport]


def fusion_report(rows: Sequence[FusionRow], baseline: Optional[str] = None) -> pd.DataFrame:
    """Fusion level, Dev, Test and the Dev to Test difference in percent.

    With ``baseline`` naming a row, an ``improvement_pct`` column gives each
    row's relative Test change against it.
    """
    by_level = {row.level: row for row in rows}
    if baseline is not None and baseline not in by_level:
        raise InvalidArgumentError(f"baseline {baseline!r} is not a report row")
    records = []
    for row in rows:
        test = row.test.ccc if row.test is not None else float("nan")
        entry = {
            "level": row.level,
            "dev": row.dev.ccc,
            "test": test,
            "diff_pct": relative_difference(row.dev.ccc, test) if row.test is not None else float("nan"),
        }
        if baseline is not None:
            reference = by_level[baseline].test
            missing = reference is None or row.test is None
            entry["improvement_pct"] = float("nan") if missing else relative_difference(reference.ccc, test)
        records.append(entry)
    return pd.DataFrame(records)


def write_fusion_report(path: Union[str, Path], rows: Sequence[FusionRow], baseline: Optional[str] = None) -> None:
    fusion_report(rows, baseline).to_csv(path, index=False, float_format="%.4f", lineterminator="\n")
