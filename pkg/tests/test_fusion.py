"""Tests for fusion module."""

import numpy as np
import pandas as pd
import pytest

from corpus import SyntheticSpec, generate_synthetic
from dsp import FeatureStream
from embeddings import export_synthetic_modality
from errors import InvalidArgumentError, LengthMismatchError
from fusion import (
    DecisionResult,
    FusedModel,
    FusionConfig,
    FusionRow,
    build_model_fusion,
    decision_fuse,
    describe_weights,
    fuse_features,
    fused_inputs,
    fusion_report,
    predict_fused,
    search_weight_from_predictions,
    split_features,
    train_fusion,
    write_fusion_report,
)
from metrics import CccReport, ccc, ccc_loss
from neural import ModelConfig, backward, forward, init_model
from training import TrainConfig, train


def _stream(rng, length, dim, source="test"):
    return FeatureStream(rng.standard_normal((length, dim)), source=source)


def _brute_force_weight(pred_a, pred_l, ref):
    weights = [k / 100 for k in range(10, 91)]
    scores = [ccc(w * pred_a + (1 - w) * pred_l, ref).ccc for w in weights]
    best = max(scores)
    return weights[scores.index(best)]


@pytest.fixture(scope="module")
def modality_streams(tiny_corpus):
    convs = tiny_corpus.conversations.values()
    acoustic = {c.id: export_synthetic_modality(c, "acoustic", 5, 0.1, 1) for c in convs}
    linguistic = {c.id: export_synthetic_modality(c, "linguistic", 4, 0.05, 2) for c in convs}
    return acoustic, linguistic


def test_fuse_features_concatenates(rng):
    """Test 48 acoustic and 40 linguistic dimensions fuse into 88."""
    a = _stream(rng, 6, 48, "mfcc")
    l = _stream(rng, 6, 40, "words")
    fused = fuse_features(a, l)
    assert fused.dim == 88
    assert fused.source == "mfcc+words"
    np.testing.assert_array_equal(fused.segments[:, :48], a.segments)
    assert split_features(fused, 48) == (a, l)


def test_fuse_features_errors(rng):
    """Test fused streams must align and splits must be inside the stream."""
    with pytest.raises(LengthMismatchError):
        fuse_features(_stream(rng, 6, 2), _stream(rng, 5, 2))
    with pytest.raises(InvalidArgumentError):
        split_features(_stream(rng, 6, 4), 4)


def test_build_model_fusion():
    """Test early and late fusion branch after one and three layers."""
    config_a = ModelConfig.single(48, widths=[8, 4, 4, 2], seed=3)
    config_l = ModelConfig.single(40, widths=[8, 4, 4, 2])
    early = build_model_fusion("early", config_a, config_l)
    late = build_model_fusion("model-late", config_a, config_l)
    assert (early.split, late.split) == (1, 3)
    assert early.input_dims == [48, 40]
    assert early.seed == 3
    with pytest.raises(InvalidArgumentError):
        build_model_fusion("middle", config_a, config_l)
    with pytest.raises(InvalidArgumentError):
        build_model_fusion("early", config_a, ModelConfig.single(40, widths=[8, 4, 4, 4]))
    with pytest.raises(InvalidArgumentError):
        build_model_fusion("late", ModelConfig.single(4, widths=[2, 2, 2]), ModelConfig.single(5, widths=[2, 2, 2]))


@pytest.mark.parametrize("split", [1, 3])
def test_branched_gradient_matches_finite_differences(rng, split):
    """Test the analytic gradient through both branches."""
    model = init_model(ModelConfig(input_dims=[4, 5], widths=[3, 2, 2, 2], split=split, seed=split))
    batch = [[_stream(rng, 5, 4), _stream(rng, 5, 5)], [_stream(rng, 3, 4), _stream(rng, 3, 5)]]
    refs = [rng.uniform(0, 1, 5), rng.uniform(0, 1, 3)]
    _, grads = backward(model, batch, refs)
    h = 1e-5
    for name, param in model.params.items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + h
            up = ccc_loss([forward(model, item) for item in batch], refs)
            flat[index] = original - h
            down = ccc_loss([forward(model, item) for item in batch], refs)
            flat[index] = original
            numeric = (up - down) / (2 * h)
            assert abs(analytic[index] - numeric) <= 1e-4 * max(abs(numeric), abs(analytic[index])) + 1e-7, name


def test_decision_fuse_examples():
    """Test the weighted average and its validation."""
    np.testing.assert_allclose(decision_fuse([0.2, 0.4], [0.6, 0.8], 0.25), [0.5, 0.7])
    np.testing.assert_array_equal(decision_fuse([0.3, 0.7], [0.3, 0.7], 0.37), [0.3, 0.7])
    np.testing.assert_array_equal(decision_fuse([0.2], [0.6], 1.0), [0.2])
    with pytest.raises(InvalidArgumentError):
        decision_fuse([0.2], [0.6], 1.5)
    with pytest.raises(LengthMismatchError):
        decision_fuse([0.2, 0.3], [0.6], 0.5)


def test_grid_bounds():
    """Test the default grid runs from 0.10 to 0.90 in 0.01 steps."""
    grid = FusionConfig().grid()
    assert grid.size == 81
    assert grid[0] == 0.10
    assert grid[-1] == 0.90
    assert grid[27] == 0.37


def test_grid_search_matches_brute_force():
    """Test the selected weight against an exhaustive search on 20 instances."""
    rng = np.random.default_rng(21)
    for _ in range(20):
        n = int(rng.integers(50, 400))
        ref = rng.uniform(0, 1, n)
        pred_a = ref + rng.normal(0, rng.uniform(0.05, 0.5), n) + rng.normal(0, 0.1)
        pred_l = ref + rng.normal(0, rng.uniform(0.05, 0.5), n)
        result = search_weight_from_predictions((pred_a, pred_l, ref))
        assert result.weight_a == _brute_force_weight(pred_a, pred_l, ref)
        assert result.certified


def test_perfect_linguistic_selects_smallest_acoustic_weight(rng):
    """Test a perfect linguistic prediction pulls the weight to the grid floor."""
    ref = rng.uniform(0, 1, 200)
    result = search_weight_from_predictions((rng.uniform(0, 1, 200), ref.copy(), ref))
    assert result.weight_a == 0.10
    assert result.weight_l == pytest.approx(0.90)


def test_identical_predictions_tie_to_smallest_weight(rng):
    """Test a flat grid keeps the smallest weight."""
    ref = rng.uniform(0, 1, 100)
    pred = ref + rng.normal(0, 0.1, 100)
    result = search_weight_from_predictions((pred, pred.copy(), ref))
    assert result.weight_a == 0.10
    assert np.all(result.dev_scores == result.dev_scores[0])


def test_ccc_averaging_variant(rng):
    """Test averaging CCC scores picks the better modality's endpoint."""
    ref = rng.uniform(0, 1, 300)
    good = ref + rng.normal(0, 0.05, 300)
    poor = ref + rng.normal(0, 0.5, 300)
    result = search_weight_from_predictions((good, poor, ref), config=FusionConfig(average="ccc"))
    assert result.weight_a == 0.90
    expected = 0.9 * ccc(good, ref).ccc + 0.1 * ccc(poor, ref).ccc
    assert result.dev.ccc == pytest.approx(expected)
    assert not result.dev.has_interval


def test_test_split_scored_at_dev_weight(rng):
    """Test the Test report uses the weight chosen on Dev."""
    dev_ref, test_ref = rng.uniform(0, 1, 150), rng.uniform(0, 1, 120)
    dev = (dev_ref + rng.normal(0, 0.2, 150), dev_ref + rng.normal(0, 0.3, 150), dev_ref)
    test = (test_ref + rng.normal(0, 0.2, 120), test_ref + rng.normal(0, 0.3, 120), test_ref)
    result = search_weight_from_predictions(dev, test)
    fused = result.weight_a * test[0] + (1 - result.weight_a) * test[1]
    assert result.test.ccc == pytest.approx(ccc(fused, test_ref).ccc, abs=1e-12)


def test_describe_weights():
    """Test the table and ratio renderings."""
    assert describe_weights(0.28, "Wav2Vec", "CamemBERT") == ".72 CamemBERT + .28 Wav2Vec"
    assert describe_weights(0.6, "MFCC", "Words") == ".60 MFCC + .40 Words"
    assert describe_weights(0.28, style="ratio") == "0.28 / 0.72"
    weights = np.array([0.1, 0.2])
    result = DecisionResult(0.2, CccReport(0.5, 0.4, 0.6, 10), None, weights, np.array([0.3, 0.5]))
    assert result.describe("A", "L") == ".80 L + .20 A"
    assert result.certified


def test_fused_model_validation():
    """Test member counts and decision weights are checked."""
    model = init_model(ModelConfig.single(2, widths=[2]))
    with pytest.raises(InvalidArgumentError):
        FusedModel("decision", [model], 0.5)
    with pytest.raises(InvalidArgumentError):
        FusedModel("decision", [model, model], None)
    with pytest.raises(InvalidArgumentError):
        FusedModel("feature", [model, model])


def test_fused_inputs_need_both_modalities(rng):
    """Test every conversation needs both streams."""
    with pytest.raises(InvalidArgumentError):
        fused_inputs("feature", {"c1": _stream(rng, 3, 2)}, {"c2": _stream(rng, 3, 2)})
    inputs = fused_inputs("model-early", {"c1": _stream(rng, 3, 2)}, {"c1": _stream(rng, 3, 4)})
    assert [s.dim for s in inputs["c1"]] == [2, 4]


@pytest.mark.parametrize("kind", ["feature", "model-early", "model-late", "decision"])
def test_train_fusion(tiny_corpus, modality_streams, kind):
    """Test every fusion strategy trains and predicts one value per segment."""
    acoustic, linguistic = modality_streams
    widths = [4, 2, 2, 2] if kind == "model-late" else [4, 2]
    config = TrainConfig(epochs=1, widths=widths, batch_size=2, lr=0.01, seed=2)
    outcome = train_fusion(kind, tiny_corpus, acoustic, linguistic, config)
    assert outcome.test is not None
    ids = tiny_corpus.split.ids("test")
    preds = predict_fused(outcome.fused, acoustic, linguistic, ids)
    for conv_id in ids:
        assert preds[conv_id].shape == (tiny_corpus.conversations[conv_id].grid_length,)
    if kind == "decision":
        assert len(outcome.records) == 2
        assert outcome.decision.certified
        assert 0.10 <= outcome.fused.weight_a <= 0.90
    else:
        assert outcome.fused.models[0].config.input_dims == ([9] if kind == "feature" else [5, 4])
    if kind.startswith("model-"):
        assert outcome.fused.models[0].config.split == (3 if kind == "model-late" else 1)


def test_fusion_report(tmp_path):
    """Test the Dev to Test difference and improvement columns."""
    rows = [
        FusionRow("none", CccReport(0.8, 0.79, 0.81, 10), CccReport(0.72, 0.71, 0.73, 10)),
        FusionRow("decision", CccReport(0.9, 0.89, 0.91, 10), CccReport(0.81, 0.80, 0.82, 10)),
    ]
    frame = fusion_report(rows, baseline="none")
    assert list(frame.columns) == ["level", "dev", "test", "diff_pct", "improvement_pct"]
    assert frame["diff_pct"].tolist() == pytest.approx([-10.0, -10.0])
    assert frame["improvement_pct"].tolist() == pytest.approx([0.0, 12.5])
    with pytest.raises(InvalidArgumentError):
        fusion_report(rows, baseline="feature")
    write_fusion_report(tmp_path / "f.csv", rows)
    assert pd.read_csv(tmp_path / "f.csv")["level"].tolist() == ["none", "decision"]


def test_fusion_report_without_test_scores():
    """Test rows or a baseline lacking a Test score give NaN improvements."""
    rows = [
        FusionRow("none", CccReport(0.8, 0.79, 0.81, 10), None),
        FusionRow("decision", CccReport(0.9, 0.89, 0.91, 10), CccReport(0.81, 0.80, 0.82, 10)),
    ]
    frame = fusion_report(rows, baseline="none")
    assert frame["improvement_pct"].isna().all()
    assert np.isnan(frame["diff_pct"].iloc[0])
    frame = fusion_report(rows, baseline="decision")
    assert np.isnan(frame["improvement_pct"].iloc[0])
    assert frame["improvement_pct"].iloc[1] == pytest.approx(0.0)


@pytest.mark.slow
def test_fusion_beats_weaker_modality_over_seeds():
    """Test every strategy's mean Test CCC over 3 seeds exceeds acoustic-only."""
    corpus = generate_synthetic(SyntheticSpec(seed=11, train=60, dev=10, test=10, mean_duration=60.0))
    convs = corpus.conversations.values()
    acoustic = {c.id: export_synthetic_modality(c, "acoustic", 8, 0.3, 1) for c in convs}
    linguistic = {c.id: export_synthetic_modality(c, "linguistic", 8, 0.1, 2) for c in convs}
    scores = {kind: [] for kind in ("acoustic", "feature", "model-early", "model-late", "decision")}
    for seed in (1, 2, 3):
        config = TrainConfig(epochs=40, widths=[16, 8, 8, 8], batch_size=8, lr=0.005, seed=seed)
        _, record = train(corpus, acoustic, config)
        scores["acoustic"].append(record.test.ccc)
        for kind in ("feature", "model-early", "model-late", "decision"):
            scores[kind].append(train_fusion(kind, corpus, acoustic, linguistic, config).test.ccc)
    baseline = np.mean(scores["acoustic"])
    for kind in ("feature", "model-early", "model-late", "decision"):
        assert np.mean(scores[kind]) > baseline, kind
