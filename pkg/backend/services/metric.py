"""
Canonical distance between scan parameters and its closed-form brackets.

nu_f((t,h),(t',h')) is the L2 distance between the two placed, scaled copies
of f. It is evaluated from unit-norm samples on one global cell lattice
(centers (k + 1/2)/R), the same lattice the scan kernels live on.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from sklearn.linear_model import LinearRegression

from .config import Settings
from .errors import PatternError, ValidationError
from .patterns import Pattern

logger = logging.getLogger(__name__)

Condition = Literal["tvc", "ahc"]


@dataclass(frozen=True)
class ParamPair:
    t_a: np.ndarray
    h_a: np.ndarray
    t_b: np.ndarray
    h_b: np.ndarray

    def __post_init__(self):
        for name in ("t_a", "h_a", "t_b", "h_b"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if np.any(self.h_a <= 0) or np.any(self.h_b <= 0):
            raise ValidationError("scales must be positive")

    def swapped(self) -> "ParamPair":
        return ParamPair(self.t_b, self.h_b, self.t_a, self.h_a)


def _placed_samples(f: Pattern, t: np.ndarray, h: np.ndarray, axes: List[np.ndarray]) -> np.ndarray:
    if f.separable:
        values = np.ones(())
        for j, centers in enumerate(axes):
            values = np.multiply.outer(values, f.profile(j, (centers - t[j]) / h[j]))
        return values
    mesh = np.stack(np.meshgrid(*[(c - t[j]) / h[j] for j, c in enumerate(axes)], indexing="ij"), axis=-1)
    return f(mesh)


def _unit(values: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(values ** 2))
    if norm == 0:
        raise PatternError("placed kernel has no support on the cell lattice")
    return values / norm


def placed_kernels(f: Pattern, pair: ParamPair, R: int) -> Tuple[np.ndarray, np.ndarray]:
    """Both unit-norm copies sampled on the smallest lattice window holding their supports."""
    axes = []
    for j in range(f.d):
        lo = min(pair.t_a[j] - pair.h_a[j], pair.t_b[j] - pair.h_b[j])
        hi = max(pair.t_a[j] + pair.h_a[j], pair.t_b[j] + pair.h_b[j])
        k = np.arange(math.floor(lo * R) - 1, math.ceil(hi * R) + 1)
        axes.append((k + 0.5) / R)
    return _unit(_placed_samples(f, pair.t_a, pair.h_a, axes)), _unit(_placed_samples(f, pair.t_b, pair.h_b, axes))


def nu(f: Pattern, pair: ParamPair, R: int = 16) -> float:
    """sqrt(2 - 2<S_t f_h, S_t' f_h'>), computed as the norm of the difference."""
    if R < 4:
        raise ValidationError(f"Resolution must be >= 4, got {R}")
    if (np.array_equal(pair.t_a, pair.t_b) and np.array_equal(pair.h_a, pair.h_b)):
        return 0.0
    a, b = placed_kernels(f, pair, R)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def nu_bound_tvc(gamma1: float, pair: ParamPair, C: float = 8.0) -> float:
    """C*gamma1*(|(t-t')/h|^2 + |(h-h')/h|^2 + (sqrt(h'_./h_.) - 1)^2); bounds nu^2."""
    if gamma1 <= 0:
        raise ValidationError(f"gamma1 must be positive, got {gamma1}")
    shift = np.sum(((pair.t_a - pair.t_b) / pair.h_a) ** 2)
    dilation = np.sum(((pair.h_a - pair.h_b) / pair.h_a) ** 2)
    volume = (math.sqrt(np.prod(pair.h_b) / np.prod(pair.h_a)) - 1.0) ** 2
    return float(C * gamma1 * (shift + dilation + volume))


def nu_bound_ahc(gamma2: float, pair: ParamPair, C: float = 64.0) -> float:
    if not 0 < gamma2 <= 1:
        raise ValidationError(f"gamma2 must lie in (0, 1], got {gamma2}")
    shift = np.abs((pair.t_a - pair.t_b) / pair.h_a)
    dilation = np.abs((pair.h_a - pair.h_b) / np.sqrt(pair.h_a * pair.h_b))
    return float(C * (np.sum(shift ** (2 * gamma2)) + np.sum(dilation ** 2) + np.sum(dilation ** (2 * gamma2))))


def _bracket(f: Pattern, condition: Condition, pair: ParamPair) -> float:
    """Bound with C = 1."""
    if condition == "tvc":
        if f.gamma1 is None:
            raise PatternError(f"Pattern '{f.name}' declares no total variation bound")
        return nu_bound_tvc(f.gamma1, pair, C=1.0)
    if condition == "ahc":
        if f.gamma2 is None:
            raise PatternError(f"Pattern '{f.name}' declares no Hölder exponent")
        return nu_bound_ahc(f.gamma2, pair, C=1.0)
    raise ValidationError(f"Unknown smoothness condition: {condition}")


def _perturb(t: np.ndarray, h: np.ndarray, direction: np.ndarray, magnitude: float) -> Tuple[np.ndarray, np.ndarray]:
    d = t.shape[0]
    return t + magnitude * direction[:d] * h, h * np.exp(magnitude * direction[d:])


def sample_pairs(
    f: Pattern,
    count: int,
    L: float = 64.0,
    seed: int = 0,
    magnitude_range: Tuple[float, float] = (1e-3, 1.0),
) -> List[ParamPair]:
    """
    Random pairs: base scale log-uniform in [e, L/4] per axis, base location
    uniform in [-1, 1], then a perturbation along a random direction of
    (shift/h, log-scale) space with log-uniform magnitude.
    """
    if L / 4 <= math.e:
        raise ValidationError(f"L must exceed 4e for pair sampling, got {L}")
    rng = np.random.default_rng([seed, 31])
    pairs = []
    for _ in range(count):
        h = np.exp(rng.uniform(1.0, math.log(L / 4), size=f.d))
        t = rng.uniform(-1.0, 1.0, size=f.d)
        direction = rng.normal(size=2 * f.d)
        direction /= np.linalg.norm(direction)
        magnitude = math.exp(rng.uniform(math.log(magnitude_range[0]), math.log(magnitude_range[1])))
        t2, h2 = _perturb(t, h, direction, magnitude)
        pairs.append(ParamPair(t, h, t2, h2))
    return pairs


class DominationReport(BaseModel):
    pattern: str
    condition: str
    C: float
    pairs: int
    dominated_fraction: float
    worst_ratio: float
    passed: bool


def calibrate_bound_constant(
    f: Pattern,
    condition: Condition,
    count: int = 1000,
    seed: int = 0,
    settings: Optional[Settings] = None,
) -> float:
    """Smallest C with C*bracket >= nu^2 on the sample, times the safety factor."""
    settings = settings or Settings()
    ratios = [
        nu(f, pair, settings.resolution) ** 2 / _bracket(f, condition, pair)
        for pair in sample_pairs(f, count, seed=seed)
    ]
    C = max(ratios) * settings.bound_safety
    logger.info(f"Calibrated {condition} constant for '{f.name}': {C:.4g}")
    return C


def check_domination(
    f: Pattern,
    condition: Condition,
    C: Optional[float] = None,
    count: int = 1000,
    seed: int = 1,
    settings: Optional[Settings] = None,
) -> DominationReport:
    settings = settings or Settings()
    if C is None:
        C = settings.C_tvc if condition == "tvc" else settings.C_ahc

    ratios = np.array([
        nu(f, pair, settings.resolution) ** 2 / (C * _bracket(f, condition, pair))
        for pair in sample_pairs(f, count, seed=seed)
    ])
    fraction = float(np.mean(ratios <= 1.0))
    return DominationReport(
        pattern=f.name,
        condition=condition,
        C=C,
        pairs=count,
        dominated_fraction=fraction,
        worst_ratio=float(ratios.max()),
        passed=fraction == 1.0,
    )


class RateReport(BaseModel):
    pattern: str
    condition: str
    direction: str
    slope: float
    passed: bool


def rate_slope(
    f: Pattern,
    condition: Condition,
    direction: Literal["location", "scale", "mixed"] = "mixed",
    magnitudes: Optional[np.ndarray] = None,
    h: float = 8.0,
    seed: int = 0,
    R: int = 16,
) -> RateReport:
    """
    Log-log slope of nu^2 against the C = 1 bracket over shrinking
    perturbations along one direction. Passes at slope >= 0.95.
    """
    if magnitudes is None:
        magnitudes = np.geomspace(1e-3, 3e-2, 12)
    rng = np.random.default_rng([seed, 37])
    vec = rng.normal(size=2 * f.d)
    if direction == "location":
        vec[f.d:] = 0.0
    elif direction == "scale":
        vec[:f.d] = 0.0
    vec /= np.linalg.norm(vec)

    t = np.zeros(f.d)
    base = np.full(f.d, float(h))
    x, y = [], []
    for m in magnitudes:
        t2, h2 = _perturb(t, base, vec, float(m))
        pair = ParamPair(t, base, t2, h2)
        x.append(math.log(_bracket(f, condition, pair)))
        y.append(math.log(nu(f, pair, R) ** 2))

    fit = LinearRegression().fit(np.array(x).reshape(-1, 1), np.array(y))
    slope = float(fit.coef_[0])
    return RateReport(pattern=f.name, condition=condition, direction=direction, slope=slope, passed=slope >= 0.95)


class EmpiricalNu(BaseModel):
    nu: float
    empirical_sd: float
    variance_se: float
    draws: int


def empirical_nu(f: Pattern, pair: ParamPair, R: int = 16, draws: int = 4000, seed: int = 0) -> EmpiricalNu:
    """Standard deviation of the difference of the two matched-filter values under white noise."""
    a, b = placed_kernels(f, pair, R)
    diff = (a - b).ravel()
    rng = np.random.default_rng([seed, 41])
    samples = np.empty(draws)
    chunk = max(1, 2_000_000 // max(diff.size, 1))
    for start in range(0, draws, chunk):
        stop = min(draws, start + chunk)
        samples[start:stop] = rng.standard_normal((stop - start, diff.size)) @ diff
    exact = float(np.sqrt(np.sum(diff ** 2)))
    return EmpiricalNu(
        nu=exact,
        empirical_sd=float(np.std(samples, ddof=1)),
        variance_se=exact ** 2 * math.sqrt(2.0 / (draws - 1)),
        draws=draws,
    )
