"""
Detection thresholds, decisions and power analysis.
"""

import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.stats import norm

from .config import Settings
from .errors import GeometryError, InsufficientReplicatesError, ValidationError
from .net import Net
from .patterns import Pattern
from .scan import Geometry, PamssResult, v_h

logger = logging.getLogger(__name__)


class ThresholdSpec(BaseModel):
    method: Literal["theoretical", "monte_carlo"]
    delta: float = Field(gt=0, le=1)
    n: int = Field(ge=1)
    dict_size: int = Field(ge=1)
    L: float
    value: float
    K: Optional[float] = None
    regime: Optional[int] = None
    reps: Optional[int] = None
    seed: Optional[int] = None
    null_values: Optional[List[float]] = Field(default=None, exclude=True, repr=False)

    @model_validator(mode="after")
    def _check(self):
        if not math.isfinite(self.value):
            raise ValueError("threshold value must be finite")
        if self.method == "monte_carlo" and (self.reps is None or self.seed is None):
            raise ValueError("monte_carlo thresholds carry reps and seed")
        if self.method == "theoretical" and self.delta >= 1:
            raise ValueError("theoretical thresholds need delta < 1")
        return self


class DetectionReport(BaseModel):
    E_n: float
    threshold: ThresholdSpec
    reject: bool
    p_value_estimate: Optional[float] = None
    pamss: PamssResult

    def report(self) -> Dict:
        return {
            "E_n": self.E_n,
            "threshold": self.threshold.model_dump(),
            "reject": self.reject,
            "p_value": self.p_value_estimate,
            "best_pattern": self.pamss.best_pattern,
            "per_pattern_scores": self.pamss.per_pattern_scores,
            "per_tensor": [r.report() for r in self.pamss.per_tensor],
        }


class PowerInputs(BaseModel):
    mu: float = Field(ge=0)
    scales: List[List[float]]
    L: float
    epsilon: float = Field(0.0, ge=0)
    n: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.scales:
            raise ValueError("PowerInputs needs at least one per-tensor scale")
        for h in self.scales:
            if any(x < 1 or x >= self.L for x in h):
                raise ValueError(f"scale {h} outside [1, {self.L})")
        if self.n is None:
            self.n = len(self.scales)
        elif self.n != len(self.scales):
            raise ValueError(f"n={self.n} does not match {len(self.scales)} scales")
        return self

    @property
    def M_n(self) -> float:
        return float(sum(v_h(h, self.L) for h in self.scales))

    @property
    def V_n(self) -> float:
        return float(sum(v_h(h, self.L) ** 2 for h in self.scales))


def _check_threshold_inputs(n: int, dict_size: int, delta: float, L: float, K: float):
    if n < 1 or dict_size < 1:
        raise ValidationError(f"n and dict_size must be >= 1, got n={n}, dict_size={dict_size}")
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    if L <= math.e:
        raise GeometryError(f"L must exceed e so that log log L > 0, got {L}")
    if K <= 0:
        raise ValidationError(f"K must be positive, got {K}")


def threshold_branches(n: int, dict_size: int, delta: float, L: float, K: float) -> Dict:
    """
    Both branches of F_n(delta) and the active regime.

    Regime 1 (log|F| <= n/K + log delta): sqrt(K log(|F|/delta)).
    Regime 2: (K / sqrt(n)) log(|F|/delta).
    """
    _check_threshold_inputs(n, dict_size, delta, L, K)
    q = math.log(dict_size / delta)
    first = math.sqrt(K * q)
    second = K / math.sqrt(n) * q
    regime = 1 if math.log(dict_size) <= n / K + math.log(delta) else 2
    factor = math.log(math.log(L))
    return {
        "regime": regime,
        "branch1": first * factor,
        "branch2": second * factor,
        "value": (first if regime == 1 else second) * factor,
        "at_boundary": math.isclose(math.log(dict_size), n / K + math.log(delta), rel_tol=1e-9, abs_tol=1e-12),
    }


def theoretical_threshold(n: int, dict_size: int, delta: float, L: float, K: float) -> float:
    """F_n(delta) * log log L."""
    return threshold_branches(n, dict_size, delta, L, K)["value"]


def theoretical_spec(n: int, dict_size: int, delta: float, L: float, K: float) -> ThresholdSpec:
    branches = threshold_branches(n, dict_size, delta, L, K)
    return ThresholdSpec(method="theoretical", delta=delta, n=n, dict_size=dict_size, L=L,
                         value=branches["value"], K=K, regime=branches["regime"])


def smallest_K(quantile: float, n: int, dict_size: int, delta: float, L: float) -> float:
    """
    Smallest K whose threshold reaches `quantile`. F_n is continuous and
    increasing in K with F_n = sqrt(n) at the switch K = n / log(|F|/delta).
    """
    q = math.log(dict_size / delta)
    target = quantile / math.log(math.log(L))
    if target <= 0:
        return 0.0
    K = target ** 2 / q if target <= math.sqrt(n) else target * math.sqrt(n) / q
    return K * (1 + 1e-12)


class KCalibration(BaseModel):
    K: float
    per_delta: Dict[str, float]
    quantiles: Dict[str, float]
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    reps: int
    seed: int
    n: int
    dict_size: int
    geometry_hash: str
    null_values: Optional[List[float]] = Field(default=None, exclude=True, repr=False)


def calibration_key(geometry: Geometry, dictionary: Sequence[Pattern], net: Net, n: int) -> str:
    payload = {
        "geometry": geometry.model_dump(),
        "patterns": [f.to_json() for f in dictionary],
        "alpha": net.alpha,
        "beta": net.beta,
        "n": n,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _K_from_null(values: np.ndarray, n: int, dict_size: int, deltas: Sequence[float], L: float):
    per_delta, quantiles = {}, {}
    for delta in deltas:
        quantile = float(np.quantile(values, 1.0 - delta, method="higher"))
        quantiles[str(delta)] = quantile
        per_delta[str(delta)] = smallest_K(quantile, n, dict_size, delta, L)
    return max(per_delta.values()), per_delta, quantiles


def calibrate_K(
    geometry: Geometry,
    dictionary: Sequence[Pattern],
    net: Net,
    n: int,
    reps: int = 200,
    seed: int = 0,
    settings: Optional[Settings] = None,
    jobs: Optional[int] = None,
    null_values: Optional[np.ndarray] = None,
) -> KCalibration:
    """
    Smallest K such that the theoretical threshold covers the empirical
    (1 - delta) null quantile of E_n for every delta in settings.delta_grid.
    A bootstrap over the null replicates gives a percentile interval for K.
    """
    from .simulate import null_statistics

    settings = settings or Settings()
    if reps < 100:
        raise InsufficientReplicatesError(f"calibrate_K needs reps >= 100, got {reps}")
    if geometry.L <= math.e:
        raise GeometryError(f"L must exceed e, got {geometry.L}")

    if null_values is None:
        null_values = null_statistics(geometry, dictionary, net, n, reps, seed, settings, jobs)
    values = np.asarray(null_values, dtype=float)
    deltas = settings.delta_grid
    K, per_delta, quantiles = _K_from_null(values, n, len(dictionary), deltas, geometry.L)

    ci_low = ci_high = None
    if settings.bootstrap_reps > 0:
        rng = np.random.default_rng([seed, 53])
        boot = [
            _K_from_null(rng.choice(values, size=values.size, replace=True), n, len(dictionary), deltas, geometry.L)[0]
            for _ in range(settings.bootstrap_reps)
        ]
        ci_low, ci_high = (float(x) for x in np.percentile(boot, [2.5, 97.5]))

    if K == 0.0:
        logger.warning("All null quantiles are non-positive; K is set to the smallest positive value")
        K = float(np.finfo(float).tiny)
    logger.info(f"Calibrated K={K:.4g} from {values.size} null replicates")
    return KCalibration(
        K=K, per_delta=per_delta, quantiles=quantiles, ci_low=ci_low, ci_high=ci_high,
        reps=int(values.size), seed=seed, n=n, dict_size=len(dictionary),
        geometry_hash=calibration_key(geometry, dictionary, net, n), null_values=values.tolist(),
    )


class CalibrationCache:
    """K calibrations on disk, keyed by geometry hash."""

    def __init__(self, path: str):
        self.path = Path(path)

    def _load(self) -> Dict:
        if not self.path.exists():
            return {}
        try:
            with open(self.path) as fh:
                return json.load(fh)
        except json.JSONDecodeError as e:
            raise ValidationError(f"Calibration cache {self.path} is not valid JSON: {e}")

    def get(self, key: str) -> Optional[KCalibration]:
        entry = self._load().get(key)
        return KCalibration(**entry) if entry else None

    def put(self, calibration: KCalibration):
        data = self._load()
        data[calibration.geometry_hash] = calibration.model_dump()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w") as fh:
            json.dump(data, fh, sort_keys=True, indent=2)


def mc_threshold(
    geometry: Geometry,
    dictionary: Sequence[Pattern],
    net: Net,
    n: int,
    delta: float,
    reps: int,
    seed: int,
    settings: Optional[Settings] = None,
    jobs: Optional[int] = None,
    null_values: Optional[np.ndarray] = None,
) -> ThresholdSpec:
    """Empirical (1 - delta) quantile of E_n over `reps` null replicates."""
    from .simulate import null_statistics

    if not 0 < delta <= 1:
        raise ValidationError(f"delta must lie in (0, 1], got {delta}")
    if reps * delta < 5:
        raise InsufficientReplicatesError(
            f"reps * delta must be >= 5 for a Monte Carlo threshold, got reps={reps}, delta={delta}"
        )
    if null_values is None:
        null_values = null_statistics(geometry, dictionary, net, n, reps, seed, settings, jobs)
    values = np.asarray(null_values, dtype=float)
    value = float(np.quantile(values, 1.0 - delta, method="higher"))
    logger.info(f"Monte Carlo threshold at delta={delta}: {value:.4f} ({values.size} replicates)")
    return ThresholdSpec(method="monte_carlo", delta=delta, n=n, dict_size=len(dictionary), L=geometry.L,
                         value=value, reps=int(values.size), seed=seed, null_values=values.tolist())


def decide(result: PamssResult, threshold: ThresholdSpec) -> DetectionReport:
    """Reject when E_n strictly exceeds the threshold."""
    p_value = None
    if threshold.method == "monte_carlo" and threshold.null_values:
        null = np.asarray(threshold.null_values)
        p_value = float(np.mean(null >= result.E_n))
    return DetectionReport(
        E_n=result.E_n,
        threshold=threshold,
        reject=bool(result.E_n > threshold.value),
        p_value_estimate=p_value,
        pamss=result,
    )


class Type2Bound(BaseModel):
    u: float
    bound: float
    centering: float
    spread: float


def type2_bound(pw: PowerInputs, u: float) -> Type2Bound:
    """
    P{E_n - centering < u * spread} <= Phi(u), with
    centering = (mu (1 - eps^2/2) M_n - V_n) / sqrt(n) and spread = sqrt(V_n / n).
    """
    n = pw.n
    centering = (pw.mu * (1.0 - pw.epsilon ** 2 / 2.0) * pw.M_n - pw.V_n) / math.sqrt(n)
    spread = math.sqrt(pw.V_n / n)
    return Type2Bound(u=u, bound=float(norm.cdf(u)), centering=centering, spread=spread)


def miss_probability(pw: PowerInputs, threshold: float) -> float:
    """Bound on P{E_n <= threshold} from the type-2 display."""
    base = type2_bound(pw, 0.0)
    if base.spread == 0:
        return 0.0 if base.centering > threshold else 1.0
    return float(norm.cdf((threshold - base.centering) / base.spread))


def power_gap(pw: PowerInputs) -> float:
    """mu - sqrt(2) V_n / M_n."""
    return pw.mu - corollary_mu(pw.scales, pw.L)


def corollary_mu(scales: Sequence[Sequence[float]], L: float) -> float:
    """Amplitude at which the power gap is zero."""
    v = np.array([v_h(h, L) for h in scales])
    if v.sum() == 0:
        raise GeometryError("all scales have zero scale correction")
    return float(math.sqrt(2.0) * np.sum(v ** 2) / np.sum(v))
