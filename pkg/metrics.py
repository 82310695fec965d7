"""Agreement metrics for continuous satisfaction prediction.

This module computes the concordance correlation coefficient (CCC), the
``1 - CCC`` training loss over concatenated conversations together with its
analytic gradient, the Fisher-transform confidence interval of the CCC and
the coefficient of variation used to compare per-annotator models.

All moments are population (1/N) moments.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from errors import DegenerateStatisticError, InvalidArgumentError, LengthMismatchError

logger = logging.getLogger(__name__)

ShiftVariant = Literal["product", "sqrt"]

DEFAULT_Z_MULTIPLIER = 1.64
REPORT_COLUMNS = ["name", "ccc", "ci_low", "ci_high", "n"]


@dataclass(frozen=True)
class CccStats:
    """Moments behind one CCC value."""

    ccc: float
    pearson: float
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov: float
    n: int
    shift: float


@dataclass(frozen=True)
class CccReport:
    """A CCC value with its confidence interval."""

    ccc: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def width(self) -> float:
        return self.ci_high - self.ci_low

    @property
    def has_interval(self) -> bool:
        return math.isfinite(self.ci_low) and math.isfinite(self.ci_high)

    def to_cell(self) -> str:
        """Render as ``.8507 & [.8491; .8523]``."""
        def short(value: float) -> str:
            text = f"{value:.4f}"
            return text.replace("0.", ".", 1) if text.startswith(("0.", "-0.")) else text

        if not self.has_interval:
            return short(self.ccc)
        return f"{short(self.ccc)} & [{short(self.ci_low)}; {short(self.ci_high)}]"


def _as_vector(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 1:
        array = array.reshape(-1)
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return array


def ccc(x, y, shift_variant: ShiftVariant = "product") -> CccStats:
    """Compute the concordance correlation coefficient of two sequences.

    Args:
        x: Predictions.
        y: Reference values.
        shift_variant: Denominator of the location shift ``u``: ``product``
            uses sigma_x * sigma_y, ``sqrt`` uses sqrt(sigma_x * sigma_y).

    Returns:
        CccStats: The CCC and the moments it was computed from.

    Raises:
        LengthMismatchError: If the sequences differ in length.
        InvalidArgumentError: If fewer than two samples are given.
    """
    x = _as_vector(x, "x")
    y = _as_vector(y, "y")
    if x.shape != y.shape:
        raise LengthMismatchError(f"length mismatch: {x.size} != {y.size}")
    n = x.size
    if n < 2:
        raise InvalidArgumentError(f"CCC needs at least 2 samples, got {n}")

    mean_x = float(x.mean())
    mean_y = float(y.mean())
    dx = x - mean_x
    dy = y - mean_y
    var_x = float(np.mean(dx * dx))
    var_y = float(np.mean(dy * dy))
    cov = float(np.mean(dx * dy))
    std_x = math.sqrt(var_x)
    std_y = math.sqrt(var_y)

    if var_x == 0.0 and var_y == 0.0:
        value = 1.0 if mean_x == mean_y else 0.0
        pearson = 0.0
    elif var_x == 0.0 or var_y == 0.0:
        value = 0.0
        pearson = 0.0
    else:
        pearson = float(np.clip(cov / (std_x * std_y), -1.0, 1.0))
        value = float(np.clip(2.0 * cov / (var_x + var_y + (mean_x - mean_y) ** 2), -1.0, 1.0))

    scale = std_x * std_y
    if scale > 0.0:
        if shift_variant == "sqrt":
            scale = math.sqrt(scale)
        shift = (mean_x - mean_y) / scale
    else:
        shift = 0.0

    return CccStats(
        ccc=value,
        pearson=pearson,
        mean_x=mean_x,
        mean_y=mean_y,
        var_x=var_x,
        var_y=var_y,
        cov=cov,
        n=n,
        shift=shift,
    )


def _concatenate_batch(preds: Sequence, refs: Sequence) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    if len(preds) == 0:
        raise InvalidArgumentError("empty batch")
    if len(preds) != len(refs):
        raise LengthMismatchError(f"batch has {len(preds)} predictions but {len(refs)} references")
    lengths = []
    for index, (p, r) in enumerate(zip(preds, refs)):
        if len(p) != len(r):
            raise LengthMismatchError(f"conversation {index}: prediction length {len(p)} != reference length {len(r)}")
        lengths.append(len(p))
    p = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in preds])
    r = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in refs])
    return p, r, lengths


def ccc_loss(preds: Sequence, refs: Sequence) -> float:
    """Return ``1 - CCC`` over the concatenation of a batch of conversations."""
    p, r, _ = _concatenate_batch(preds, refs)
    return 1.0 - ccc(p, r).ccc


def ccc_loss_gradient(preds: Sequence, refs: Sequence) -> Tuple[float, List[np.ndarray]]:
    """Return the batch loss and its gradient with respect to every prediction.

    Args:
        preds: Per-conversation prediction sequences.
        refs: Per-conversation reference sequences of matching lengths.

    Returns:
        The loss and one gradient array per conversation.

    Raises:
        DegenerateStatisticError: If predictions are constant across the batch.
    """
    p, r, lengths = _concatenate_batch(preds, refs)
    n = p.size
    if n < 2:
        raise InvalidArgumentError(f"CCC needs at least 2 samples, got {n}")
    mean_p = p.mean()
    mean_r = r.mean()
    dp = p - mean_p
    dr = r - mean_r
    var_p = np.mean(dp * dp)
    var_r = np.mean(dr * dr)
    cov = np.mean(dp * dr)
    if var_p == 0.0:
        raise DegenerateStatisticError("constant predictions across the batch: CCC loss gradient undefined")

    denom = var_p + var_r + (mean_p - mean_r) ** 2
    value = 2.0 * cov / denom
    d_ccc = (2.0 / n) * (dr * denom - 2.0 * cov * (dp + (mean_p - mean_r))) / (denom * denom)
    grad = -d_ccc
    return float(1.0 - value), np.split(grad, np.cumsum(lengths)[:-1])


def ccc_ci(x, y, z_mult: float = DEFAULT_Z_MULTIPLIER, shift_variant: ShiftVariant = "product") -> CccReport:
    """Compute the CCC with its Fisher-transform confidence interval.

    The interval is ``[tanh(Z - z * s), tanh(Z + z * s)]`` with ``Z = atanh(ccc)``
    and ``s^2`` the three-term large-sample variance of Z divided by ``N - 2``.

    Raises:
        InvalidArgumentError: If fewer than three samples are given.
        DegenerateStatisticError: If ``|ccc| = 1`` or the Pearson correlation is 0.
    """
    s = ccc(x, y, shift_variant=shift_variant)
    if s.n < 3:
        raise InvalidArgumentError(f"confidence interval needs at least 3 samples, got {s.n}")
    if abs(s.ccc) >= 1.0:
        raise DegenerateStatisticError(f"degenerate interval: |ccc| = {abs(s.ccc)}")
    if s.pearson == 0.0:
        raise DegenerateStatisticError("undefined interval variance: pearson correlation is 0")

    rc = s.ccc
    rho = s.pearson
    u = s.shift
    one_minus = 1.0 - rc * rc
    variance = (
        (1.0 - rho * rho) * rc * rc / (one_minus * rho * rho)
        + 2.0 * rc ** 3 * (1.0 - rc) * u * u / (rho * one_minus * one_minus)
        - rc ** 4 * u ** 4 / (2.0 * rho * rho * one_minus * one_minus)
    ) / (s.n - 2)
    if not variance > 0.0:
        raise DegenerateStatisticError(f"non-positive interval variance {variance}")

    z = math.atanh(rc)
    half = z_mult * math.sqrt(variance)
    return CccReport(ccc=rc, ci_low=math.tanh(z - half), ci_high=math.tanh(z + half), n=s.n)


def ccc_report(x, y, z_mult: float = DEFAULT_Z_MULTIPLIER, shift_variant: ShiftVariant = "product") -> CccReport:
    """Like ``ccc_ci`` but degrade to a NaN interval instead of raising."""
    try:
        return ccc_ci(x, y, z_mult=z_mult, shift_variant=shift_variant)
    except DegenerateStatisticError as e:
        s = ccc(x, y, shift_variant=shift_variant)
        logger.warning(f"Confidence interval undefined ({e}); reporting CCC only")
        return CccReport(ccc=s.ccc, ci_low=math.nan, ci_high=math.nan, n=s.n)


def z_multiplier(confidence: float = 0.95, two_sided: bool = True) -> float:
    """Normal quantile for a confidence level."""
    if not 0.0 < confidence < 1.0:
        raise InvalidArgumentError(f"confidence must be in (0, 1), got {confidence}")
    alpha = 1.0 - confidence
    q = 1.0 - alpha / 2.0 if two_sided else 1.0 - alpha
    return float(stats.norm.ppf(q))


def coefficient_of_variation(values) -> float:
    """Population standard deviation over mean.

    Raises:
        InvalidArgumentError: If ``values`` is empty.
        DegenerateStatisticError: If the mean is zero.
    """
    array = np.asarray(values, dtype=np.float64).reshape(-1)
    if array.size == 0:
        raise InvalidArgumentError("coefficient of variation of an empty sequence")
    mean = float(array.mean())
    if mean == 0.0:
        raise DegenerateStatisticError("coefficient of variation undefined for zero mean")
    return float(np.std(array)) / mean


def intervals_overlap(a: CccReport, b: CccReport) -> bool:
    """Whether two confidence intervals intersect."""
    if not (a.has_interval and b.has_interval):
        raise InvalidArgumentError("both reports need a confidence interval")
    return a.ci_low <= b.ci_high and b.ci_low <= a.ci_high


def is_consistent_difference(a: CccReport, b: CccReport) -> bool:
    """A score difference counts only when the intervals do not overlap."""
    return not intervals_overlap(a, b)


def relative_difference(reference: float, value: float) -> float:
    """Relative change from ``reference`` to ``value`` in percent."""
    if reference == 0.0:
        raise DegenerateStatisticError("relative difference from a zero reference")
    return 100.0 * (value - reference) / reference


def write_reports(path: Union[str, Path], reports: Mapping[str, CccReport]) -> None:
    """Write ``name,ccc,ci_low,ci_high,n`` rows to 4 decimals."""
    frame = pd.DataFrame(
        [[name, r.ccc, r.ci_low, r.ci_high, r.n] for name, r in reports.items()],
        columns=REPORT_COLUMNS,
    )
    frame.to_csv(path, index=False, float_format="%.4f", lineterminator="\n")


def read_reports(path: Union[str, Path]) -> Dict[str, CccReport]:
    """Read a report CSV written by ``write_reports``."""
    frame = pd.read_csv(path, dtype={"name": str})
    missing = [c for c in REPORT_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidArgumentError(f"{path}: missing report columns {missing}")
    return {
        row.name: CccReport(ccc=float(row.ccc), ci_low=float(row.ci_low), ci_high=float(row.ci_high), n=int(row.n))
        for row in frame.itertuples(index=False)
    }
