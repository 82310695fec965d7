"""Tests for dsp module."""

import numpy as np
import pytest

from dsp import (
    FeatureStream,
    FrameFeatures,
    NormStats,
    aggregate_to_segments,
    apply_norm,
    deltas,
    fit_norm,
    invert_norm,
    log_mel_energies,
    mel_filterbank,
    mfcc,
    read_stream,
    write_stream,
    write_stream_csv,
)
from errors import DimMismatchError, InvalidArgumentError, StreamFormatError


def test_mfcc_frame_count():
    """Test 1 s of audio gives 98 frames of dim 24."""
    audio = np.random.default_rng(0).standard_normal(8000)
    ff = mfcc(audio)
    assert ff.frames.shape == (98, 24)
    assert ff.hop == pytest.approx(0.01)


def test_mfcc_silence_is_finite():
    """Test all-zero audio yields finite coefficients and zero deltas."""
    ff = mfcc(np.zeros(8000))
    assert np.all(np.isfinite(ff.frames))
    np.testing.assert_array_equal(ff.frames[:, 12:], 0.0)


def test_mfcc_too_short():
    """Test audio shorter than one frame is rejected."""
    with pytest.raises(InvalidArgumentError):
        mfcc(np.zeros(239))


def test_mfcc_requires_8khz():
    """Test other sample rates are rejected."""
    with pytest.raises(InvalidArgumentError):
        mfcc(np.zeros(16000), sample_rate=16000)


def test_tone_peaks_in_its_mel_band():
    """Test a 1 kHz tone puts the highest filterbank energy in the band centered nearest 1 kHz."""
    t = np.arange(8000) / 8000.0
    energies = log_mel_energies(np.sin(2 * np.pi * 1000.0 * t))
    bank = mel_filterbank()
    bin_1k = int(round(1000.0 * 256 / 8000))
    expected = int(np.argmax(bank[:, bin_1k]))
    assert np.all(np.argmax(energies, axis=1) == expected)


def test_filterbank_shape_and_coverage():
    """Test filter count and that every filter has some weight."""
    bank = mel_filterbank()
    assert bank.shape == (26, 129)
    assert np.all(bank.max(axis=1) > 0)


def test_deltas_of_linear_ramp():
    """Test interior deltas of a unit ramp equal 1."""
    ramp = np.arange(10, dtype=float)[:, None]
    np.testing.assert_allclose(deltas(ramp)[2:-2, 0], 1.0)


def test_mfcc_shift_covariant():
    """Test prepending one hop of samples shifts frames by one index."""
    audio = np.random.default_rng(1).standard_normal(8000)
    shifted = np.concatenate([np.random.default_rng(2).standard_normal(80), audio])
    a = mfcc(audio).frames[:, :12]
    b = mfcc(shifted).frames[:, :12]
    assert b.shape[0] == a.shape[0] + 1
    np.testing.assert_allclose(b[2:], a[1:], atol=1e-9)


def test_aggregate_constant_frames():
    """Test constant frames give [c; 0] in every segment."""
    ff = FrameFeatures(np.full((100, 3), 2.5), hop=0.01, frame_length=0.03)
    stream = aggregate_to_segments(ff, 1.0)
    assert len(stream) == 4
    np.testing.assert_array_equal(stream.segments[:, :3], 2.5)
    np.testing.assert_array_equal(stream.segments[:, 3:], 0.0)


def test_aggregate_mfcc_one_second():
    """Test 1 s of MFCC gives 4 segments of dim 48."""
    stream = aggregate_to_segments(mfcc(np.random.default_rng(3).standard_normal(8000)), 1.0)
    assert len(stream) == 4
    assert stream.dim == 48


def test_aggregate_matches_two_pass_oracle():
    """Test segment mean and std against a direct two-pass computation."""
    frames = np.random.default_rng(4).standard_normal((98, 5))
    stream = aggregate_to_segments(FrameFeatures(frames, hop=0.01, frame_length=0.03), 1.0)
    for k in range(4):
        block = frames[25 * k:25 * (k + 1)]
        mean = block.sum(axis=0) / len(block)
        std = np.sqrt(((block - mean) ** 2).sum(axis=0) / len(block))
        np.testing.assert_allclose(stream.segments[k, :5], mean, atol=1e-12)
        np.testing.assert_allclose(stream.segments[k, 5:], std, atol=1e-12)


def test_aggregate_tail_copies_previous():
    """Test segments without frames repeat the last filled segment."""
    ff = FrameFeatures(np.random.default_rng(5).standard_normal((30, 2)), hop=0.01, frame_length=0.03)
    stream = aggregate_to_segments(ff, 1.0)
    assert len(stream) == 4
    np.testing.assert_array_equal(stream.segments[2], stream.segments[1])
    np.testing.assert_array_equal(stream.segments[3], stream.segments[1])


@pytest.mark.parametrize("duration", [0.25, 0.3, 1.0, 2.6, 7.01])
def test_aggregate_length_is_grid_length(duration):
    """Test output length is ceil(duration / 0.25)."""
    ff = FrameFeatures(np.ones((int(duration * 100) + 1, 1)), hop=0.01, frame_length=0.03)
    assert len(aggregate_to_segments(ff, duration)) == int(np.ceil(round(duration / 0.25, 9)))


def test_aggregate_empty_frames():
    """Test an empty frame sequence is rejected."""
    with pytest.raises(InvalidArgumentError):
        aggregate_to_segments(FrameFeatures(np.zeros((0, 2)), hop=0.01, frame_length=0.03), 1.0)


def test_norm_fit_apply_standardizes():
    """Test normalized train data has zero mean and unit std per dimension."""
    rng = np.random.default_rng(6)
    streams = [FeatureStream(rng.normal(3.0, 2.0, (n, 4))) for n in (10, 25, 7)]
    stats = fit_norm(streams)
    pooled = np.vstack([apply_norm(s, stats).segments for s in streams])
    np.testing.assert_allclose(pooled.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(pooled.std(axis=0), 1.0, atol=1e-10)


def test_norm_constant_dimension_centered_only():
    """Test a constant dimension is centered, not scaled."""
    segments = np.column_stack([np.full(6, 4.0), np.arange(6.0)])
    stats = fit_norm([FeatureStream(segments)])
    normalized = apply_norm(FeatureStream(segments), stats)
    np.testing.assert_array_equal(normalized.segments[:, 0], 0.0)


def test_norm_dev_statistics_differ():
    """Test train statistics applied to shifted dev data leave it non-standard."""
    rng = np.random.default_rng(7)
    stats = fit_norm([FeatureStream(rng.normal(0.0, 1.0, (200, 2)))])
    dev = apply_norm(FeatureStream(rng.normal(2.0, 3.0, (200, 2))), stats).segments
    assert abs(dev.mean()) > 0.5


def test_norm_invertible():
    """Test invert_norm undoes apply_norm."""
    rng = np.random.default_rng(8)
    stream = FeatureStream(rng.normal(1.0, 5.0, (20, 3)))
    stats = fit_norm([stream])
    np.testing.assert_allclose(invert_norm(apply_norm(stream, stats), stats).segments, stream.segments, atol=1e-12)


def test_norm_dim_mismatch():
    """Test stats and stream dimensions must agree."""
    with pytest.raises(DimMismatchError):
        apply_norm(FeatureStream(np.zeros((3, 2))), NormStats(np.zeros(3), np.ones(3)))


def test_stream_rejects_non_finite():
    """Test FeatureStream invariant on finite values."""
    with pytest.raises(InvalidArgumentError):
        FeatureStream(np.array([[0.0, np.nan]]))


def test_fstm_round_trip_bytes(tmp_path):
    """Test FSTM save, load, save is byte-identical."""
    stream = FeatureStream(np.random.default_rng(9).standard_normal((13, 4)).astype(np.float32), source="mfcc")
    write_stream(tmp_path / "a.fstm", stream)
    loaded = read_stream(tmp_path / "a.fstm")
    assert loaded == stream
    write_stream(tmp_path / "b.fstm", loaded)
    assert (tmp_path / "a.fstm").read_bytes() == (tmp_path / "b.fstm").read_bytes()


def test_fstm_truncated(tmp_path):
    """Test a truncated FSTM file is rejected."""
    write_stream(tmp_path / "a.fstm", FeatureStream(np.ones((4, 2))))
    data = (tmp_path / "a.fstm").read_bytes()
    (tmp_path / "a.fstm").write_bytes(data[:-3])
    with pytest.raises(StreamFormatError):
        read_stream(tmp_path / "a.fstm")


def test_fstm_bad_magic(tmp_path):
    """Test a file without the magic is rejected."""
    (tmp_path / "x.fstm").write_bytes(b"NOTFSTM" + bytes(40))
    with pytest.raises(StreamFormatError):
        read_stream(tmp_path / "x.fstm")


def test_csv_mirror(tmp_path):
    """Test the CSV mirror reloads the same values."""
    stream = FeatureStream(np.array([[0.5, 1.25], [2.0, -3.5]]))
    write_stream_csv(tmp_path / "s.csv", stream)
    loaded = read_stream(tmp_path / "s.csv")
    np.testing.assert_array_equal(loaded.segments, stream.segments)
    assert loaded.source == "s"
