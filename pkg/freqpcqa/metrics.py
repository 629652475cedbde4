"""
Correlation metrics between predicted quality and MOS
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import curve_fit
from scipy.stats import rankdata

from .errors import DegenerateMetricError

logger = logging.getLogger(__name__)


def _vectors(x: Sequence[float], y: Sequence[float], minimum: int) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise ValueError(f"vectors differ in length: {len(x)} vs {len(y)}")
    if len(x) < minimum:
        raise ValueError(f"need at least {minimum} values, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateMetricError("non-finite value in metric input")
    return x, y


def plcc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson linear correlation coefficient.

    Raises:
        DegenerateMetricError: either vector has zero variance
    """
    x, y = _vectors(x, y, 2)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateMetricError("PLCC undefined: zero variance")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def srocc(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Spearman rank correlation: Pearson of mid-ranks, ties sharing their
    average rank.

    Raises:
        DegenerateMetricError: either vector is entirely tied
    """
    x, y = _vectors(x, y, 2)
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise DegenerateMetricError("SROCC undefined: all values tied")
    return plcc(rx, ry)


def rmse(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _vectors(x, y, 1)
    return math.sqrt(float(np.mean((x - y) ** 2)))


def logistic4(x, b1: float, b2: float, b3: float, b4: float):
    """Monotonic 4-parameter logistic mapping predictions onto the MOS scale"""
    return (b1 - b2) / (1.0 + np.exp(-(x - b3) / abs(b4))) + b2


def fit_logistic(predicted: Sequence[float], mos: Sequence[float]) -> np.ndarray:
    """
    Least-squares logistic fit of MOS against predictions.

    Raises:
        DegenerateMetricError: the fit does not converge
    """
    x, y = _vectors(predicted, mos, 4)
    spread = float(np.std(x)) or 1.0
    p0 = [float(y.max()), float(y.min()), float(np.mean(x)), spread]
    try:
        params, _ = curve_fit(logistic4, x, y, p0=p0, maxfev=20000)
    except (RuntimeError, ValueError) as e:
        raise DegenerateMetricError(f"logistic fit failed: {e}")
    if not np.all(np.isfinite(params)):
        raise DegenerateMetricError("logistic fit produced non-finite parameters")
    return params


@dataclass
class MetricSet:
    """SROCC / PLCC / RMSE of one prediction vector; NaN where undefined"""
    srocc: float
    plcc: float
    rmse: float
    logistic: bool = False
    error: Optional[str] = None

    @property
    def defined(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)


def score(predicted: Sequence[float], mos: Sequence[float], logistic: bool = False) -> MetricSet:
    """
    All three metrics. With ``logistic`` the predictions are mapped through
    a fitted logistic before PLCC and RMSE; SROCC is unaffected by any
    monotonic map.

    A degenerate input yields a MetricSet with NaN values and the cause in
    ``error`` instead of raising.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    try:
        rho = srocc(predicted, mos)
        mapped = predicted
        if logistic:
            mapped = logistic4(predicted, *fit_logistic(predicted, mos))
        return MetricSet(srocc=rho, plcc=plcc(mapped, mos), rmse=rmse(mapped, mos),
                         logistic=logistic)
    except DegenerateMetricError as e:
        logger.warning(f"Metrics undefined: {e}")
        error_rmse = rmse(predicted, mos) if np.all(np.isfinite(predicted)) else math.nan
        return MetricSet(srocc=math.nan, plcc=math.nan, rmse=error_rmse,
                         logistic=logistic, error=str(e))
