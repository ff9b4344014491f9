"""
Pattern dictionary
------------------
Smooth, unit-norm patterns on the cube [-1, 1]^d, their rasterized kernels
and their smoothness functionals (total variation, Hölder functional).

Built-in families are products of one-dimensional profiles, which keeps the
normalization exact (one quadrature per axis) and the kernels cheap to build.
User patterns enter as tabulated samples with declared smoothness constants.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import quad
from scipy.interpolate import RegularGridInterpolator
from sklearn.linear_model import LinearRegression

from .errors import PatternError

logger = logging.getLogger(__name__)

PatternKind = Literal[
    "quadratic-bump",
    "truncated-gaussian",
    "windowed-sinusoid",
    "tensor-cosine",
    "tabulated",
]

BUILTIN_KINDS = ("quadratic-bump", "truncated-gaussian", "windowed-sinusoid", "tensor-cosine")

DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    "quadratic-bump": {},
    "truncated-gaussian": {"bandwidth": 0.2, "offset": 0.5},
    "windowed-sinusoid": {"cycles": 2.0},
    "tensor-cosine": {"frequency": 3.0},
}

Profile = Tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]


def _window(u):
    return np.cos(np.pi * u / 2.0) ** 2


def _window_grad(u):
    return -0.5 * np.pi * np.sin(np.pi * u)


def _profile(kind: str, params: Dict[str, float], axis: int) -> Profile:
    """One-dimensional factor g_j and its derivative for a built-in family."""
    if kind == "quadratic-bump":
        return (lambda u: 1.0 - u ** 2, lambda u: -2.0 * u)

    if kind == "truncated-gaussian":
        # Gaussians at +-offset, shifted so the profile vanishes at +-1; offset 0 is a single Gaussian
        s2 = params["bandwidth"] ** 2
        c = params["offset"]

        def lobes(u):
            return np.exp(-(u - c) ** 2 / (2.0 * s2)), np.exp(-(u + c) ** 2 / (2.0 * s2))

        floor = sum(float(e) for e in lobes(np.asarray(1.0)))

        def g(u):
            e1, e2 = lobes(u)
            return e1 + e2 - floor

        def dg(u):
            e1, e2 = lobes(u)
            return -((u - c) * e1 + (u + c) * e2) / s2

        return (g, dg)

    if kind == "windowed-sinusoid":
        if axis > 0:
            return (_window, _window_grad)
        c = params["cycles"] * np.pi
        return (
            lambda u: np.sin(c * u) * _window(u),
            lambda u: c * np.cos(c * u) * _window(u) + np.sin(c * u) * _window_grad(u),
        )

    if kind == "tensor-cosine":
        k = params["frequency"] * np.pi / 2.0
        return (lambda u: np.cos(k * u), lambda u: -k * np.sin(k * u))

    raise PatternError(f"Unknown pattern kind: {kind}")


def _validate_params(kind: str, params: Dict[str, float]) -> Dict[str, float]:
    if kind not in DEFAULT_PARAMS:
        raise PatternError(f"Unknown pattern kind: '{kind}'. Supported: {', '.join(BUILTIN_KINDS)}")
    merged = {**DEFAULT_PARAMS[kind], **{k: float(v) for k, v in (params or {}).items()}}
    unknown = set(merged) - set(DEFAULT_PARAMS[kind])
    if unknown:
        raise PatternError(f"Unknown parameters for {kind}: {sorted(unknown)}")

    if kind == "truncated-gaussian":
        if merged["bandwidth"] <= 0:
            raise PatternError("truncated-gaussian bandwidth must be positive")
        if not 0 <= merged["offset"] < 1:
            raise PatternError(f"truncated-gaussian offset must lie in [0, 1), got {merged['offset']}")
    if kind == "windowed-sinusoid" and merged["cycles"] <= 0:
        raise PatternError("windowed-sinusoid cycles must be positive (zero gives the zero function)")
    if kind == "tensor-cosine":
        k = merged["frequency"]
        # even or fractional frequencies do not vanish on the boundary of the cube
        if k <= 0 or k != int(k) or int(k) % 2 == 0:
            raise PatternError(f"tensor-cosine frequency must be an odd positive integer, got {k}")
    return merged


def _midpoint_grid(lower: Sequence[float], upper: Sequence[float], R: int) -> Tuple[List[np.ndarray], float]:
    """Cell centers of width 1/R covering [lower, upper] per axis, and the cell volume."""
    axes = []
    for lo, hi in zip(lower, upper):
        n = max(1, int(math.ceil((hi - lo) * R - 1e-9)))
        axes.append(lo + (np.arange(n) + 0.5) / R)
    return axes, (1.0 / R) ** len(axes)


def _mesh(axes: List[np.ndarray]) -> np.ndarray:
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class Pattern(BaseModel):
    """A unit L2-norm function on [-1, 1]^d with smoothness metadata."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str
    d: int = Field(ge=1)
    kind: PatternKind
    params: Dict[str, float] = Field(default_factory=dict)
    gamma1: Optional[float] = Field(default=None, ge=0)
    gamma2: Optional[float] = Field(default=None, gt=0, le=1)
    c_A: Optional[float] = Field(default=None, gt=0)
    norm_const: float = 1.0
    source: Optional[str] = None
    table: Optional[np.ndarray] = Field(default=None, exclude=True, repr=False)

    @property
    def separable(self) -> bool:
        return self.kind != "tabulated"

    def profiles(self) -> List[Profile]:
        return [_profile(self.kind, self.params, j) for j in range(self.d)]

    def profile(self, axis: int, u: np.ndarray) -> np.ndarray:
        """Axis factor g_j(u), zero outside [-1, 1]."""
        u = np.asarray(u, dtype=float)
        g, _ = _profile(self.kind, self.params, axis)
        return np.where(np.abs(u) <= 1.0, g(u), 0.0)

    def _interpolator(self) -> RegularGridInterpolator:
        m = self.table.shape[0]
        centers = (np.arange(m) + 0.5) / (m / 2.0) - 1.0
        # zero nodes on the boundary keep the interpolant continuous at the cube's faces;
        # cubic splines keep it C1 inside
        nodes = np.concatenate([[-1.0], centers, [1.0]])
        padded = np.pad(self.table, 1)
        return RegularGridInterpolator(
            [nodes] * self.d, padded, method="cubic", bounds_error=False, fill_value=0.0
        )

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.d:
            raise PatternError(f"Point dimension {u.shape[-1]} does not match pattern '{self.name}' (d={self.d})")
        inside = np.all(np.abs(u) <= 1.0, axis=-1)

        if not self.separable:
            values = self.norm_const * self._interpolator()(u.reshape(-1, self.d)).reshape(u.shape[:-1])
            return np.where(inside, values, 0.0)

        values = np.full(u.shape[:-1], self.norm_const)
        for j, (g, _) in enumerate(self.profiles()):
            values = values * g(u[..., j])
        return np.where(inside, values, 0.0)

    def gradient(self, u) -> np.ndarray:
        """Gradient of f at points u (..., d); zero outside the cube."""
        u = np.asarray(u, dtype=float)
        inside = np.all(np.abs(u) <= 1.0, axis=-1)[..., None]

        if not self.separable:
            step = 1e-5
            grads = []
            for j in range(self.d):
                e = np.zeros(self.d)
                e[j] = step
                grads.append((self(u + e) - self(u - e)) / (2 * step))
            return np.where(inside, np.stack(grads, axis=-1), 0.0)

        profiles = self.profiles()
        factors = [g(u[..., j]) for j, (g, _) in enumerate(profiles)]
        grads = []
        for j, (_, dg) in enumerate(profiles):
            component = np.full(u.shape[:-1], self.norm_const) * dg(u[..., j])
            for k in range(self.d):
                if k != j:
                    component = component * factors[k]
            grads.append(component)
        return np.where(inside, np.stack(grads, axis=-1), 0.0)

    def to_json(self) -> Dict:
        return self.model_dump(exclude={"norm_const", "table"}, exclude_none=True)


@dataclass(frozen=True)
class Kernel:
    """Rasterized f_h, rescaled to unit discrete l2 norm."""

    values: np.ndarray
    footprint: Tuple[int, ...]
    scale: Tuple[float, ...]
    resolution: int


def _normalization_constant(kind: str, params: Dict[str, float], d: int) -> float:
    const = 1.0
    for j in range(d):
        g, _ = _profile(kind, params, j)
        integral, _ = quad(lambda x: float(g(np.asarray(x))) ** 2, -1.0, 1.0, limit=400, epsabs=1e-14, epsrel=1e-13)
        if not integral > 1e-14:
            raise PatternError(f"{kind} with params {params} is the zero function")
        const /= math.sqrt(integral)
    return const


def _smoothness_resolution(d: int) -> int:
    return 256 if d <= 2 else 32


def make_pattern(
    kind: str,
    d: int,
    params: Optional[Dict[str, float]] = None,
    name: Optional[str] = None,
    gamma1: Optional[float] = None,
    gamma2: Optional[float] = None,
    c_A: Optional[float] = None,
) -> Pattern:
    """
    Build a built-in pattern normalized to unit L2 norm on [-1, 1]^d.

    When no smoothness constant is declared, gamma1 is set to the quadrature
    total variation and (gamma2, c_A) to the Lipschitz pair (1, energy), both
    with 1% headroom.

    Args:
        kind: one of the built-in families
        d: dimension
        params: family parameters (bandwidth, offset, cycles, frequency)
        name: dictionary name, defaults to the kind

    Returns:
        Pattern
    """
    if d < 1:
        raise PatternError(f"Pattern dimension must be positive, got {d}")
    if kind == "tabulated":
        raise PatternError("Tabulated patterns are built with make_tabulated_pattern")
    merged = _validate_params(kind, params or {})

    pattern = Pattern(
        name=name or kind,
        d=d,
        kind=kind,
        params=merged,
        norm_const=_normalization_constant(kind, merged, d),
    )

    if gamma1 is None and gamma2 is None:
        R = _smoothness_resolution(d)
        gamma1 = 1.01 * tv_norm(pattern, R)
        gamma2 = 1.0
        c_A = 1.01 * dirichlet_energy(pattern, R)
    elif gamma2 is not None and c_A is None:
        c_A = 1.01 * dirichlet_energy(pattern, _smoothness_resolution(d))

    return pattern.model_copy(update={"gamma1": gamma1, "gamma2": gamma2, "c_A": c_A})


def make_tabulated_pattern(
    name: str,
    table: np.ndarray,
    gamma1: Optional[float] = None,
    gamma2: Optional[float] = None,
    c_A: Optional[float] = None,
    source: Optional[str] = None,
) -> Pattern:
    """
    Pattern from samples at the cell centers of a uniform grid on [-1, 1]^d.
    Values are interpolated by cubic splines (zero on the faces) and renormalized
    by quadrature.
    """
    table = np.asarray(table, dtype=float)
    if gamma1 is None and gamma2 is None:
        raise PatternError(f"Tabulated pattern '{name}' must declare gamma1 or gamma2")
    if gamma2 is not None and c_A is None:
        raise PatternError(f"Tabulated pattern '{name}' declares gamma2 without c_A")
    if len(set(table.shape)) != 1 or table.shape[0] < 2:
        raise PatternError(f"Tabulated pattern '{name}' needs a cubic sample grid, got {table.shape}")
    if not np.all(np.isfinite(table)):
        raise PatternError(f"Tabulated pattern '{name}' has non-finite samples")

    raw = Pattern(name=name, d=table.ndim, kind="tabulated", table=table, source=source,
                  gamma1=gamma1, gamma2=gamma2, c_A=c_A)
    norm = l2_norm(raw, _smoothness_resolution(table.ndim))
    if norm < 1e-12:
        raise PatternError(f"Tabulated pattern '{name}' is the zero function")
    return raw.model_copy(update={"norm_const": 1.0 / norm})


def evaluate(f: Pattern, u) -> float:
    """f(u) at a single point; 0 outside the cube."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(f(u))


def rasterize(f: Pattern, h, R: int) -> Kernel:
    """
    Sample f(x / h) at cell centers over its support and rescale to unit l2 norm.

    The footprint is ceil(2 h_j R) cells per axis, centered on the kernel's
    location, so convolution against iid standard noise has variance 1.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.shape != (f.d,):
        raise PatternError(f"Scale {h.tolist()} does not match pattern '{f.name}' (d={f.d})")
    if np.any(h < 1.0 - 1e-12):
        raise PatternError(f"Scales must be >= 1, got {h.tolist()}")
    if R < 4:
        raise PatternError(f"Resolution must be >= 4, got {R}")

    footprint = tuple(int(math.ceil(2.0 * hj * R - 1e-9)) for hj in h)
    positions = [(np.arange(n) + 0.5 - n / 2.0) / R for n in footprint]

    if f.separable:
        values = np.ones(())
        for j, x in enumerate(positions):
            values = np.multiply.outer(values, f.profile(j, x / h[j]))
    else:
        values = f(_mesh([x / hj for x, hj in zip(positions, h)]))

    norm = np.sqrt(np.sum(values ** 2))
    if norm == 0:
        raise PatternError(f"Kernel of '{f.name}' at scale {h.tolist()} is identically zero")
    return Kernel(values=values / norm, footprint=footprint, scale=tuple(float(x) for x in h), resolution=R)


def l2_norm(f: Pattern, R: int = 64) -> float:
    axes, cell = _midpoint_grid([-1.0] * f.d, [1.0] * f.d, R)
    return float(np.sqrt(np.sum(f(_mesh(axes)) ** 2) * cell))


def tv_norm(f: Pattern, R: int = 16) -> float:
    """Isotropic total variation: midpoint quadrature of the gradient norm over the cube's interior."""
    axes, cell = _midpoint_grid([-1.0] * f.d, [1.0] * f.d, R)
    grad = f.gradient(_mesh(axes))
    return float(np.sum(np.linalg.norm(grad, axis=-1)) * cell)


def dirichlet_energy(f: Pattern, R: int = 16) -> float:
    axes, cell = _midpoint_grid([-1.0] * f.d, [1.0] * f.d, R)
    grad = f.gradient(_mesh(axes))
    return float(np.sum(grad ** 2) * cell)


def holder_functional(f: Pattern, delta, R: int = 64) -> float:
    """A(delta) = integral of |f(u) - f(u - delta)|^2 du by midpoint quadrature."""
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    if not np.any(delta):
        return 0.0
    lower = np.minimum(-1.0, -1.0 + delta)
    upper = np.maximum(1.0, 1.0 + delta)
    axes, cell = _midpoint_grid(lower, upper, R)
    u = _mesh(axes)
    return float(np.sum((f(u) - f(u - delta)) ** 2) * cell)


class HolderReport(BaseModel):
    pattern: str
    exponent: float
    constant: float
    declared_gamma2: Optional[float] = None
    declared_c_A: Optional[float] = None
    violations: List[Dict[str, float]] = Field(default_factory=list)
    passed: bool


def holder_check(
    f: Pattern,
    sample_count: int = 64,
    seed: int = 0,
    R: int = 64,
    delta_range: Tuple[float, float] = (1e-3, 0.1),
) -> HolderReport:
    """
    Fit the average Hölder exponent from random shift pairs and check the
    declared (gamma2, c_A) against every sample.

    Returns:
        HolderReport with exponent = slope/2 of log A against log |t - s|
    """
    if sample_count < 10:
        raise PatternError(f"holder_check needs at least 10 samples, got {sample_count}")

    rng = np.random.default_rng([seed, 17])
    directions = rng.normal(size=(sample_count, f.d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = np.exp(rng.uniform(np.log(delta_range[0]), np.log(delta_range[1]), size=sample_count))

    distances, values = [], []
    for direction, radius in zip(directions, radii):
        values.append(holder_functional(f, direction * radius, R))
        distances.append(radius)
    distances = np.asarray(distances)
    values = np.asarray(values)

    positive = values > 0
    fit = LinearRegression().fit(np.log(distances[positive]).reshape(-1, 1), np.log(values[positive]))
    exponent = float(fit.coef_[0]) / 2.0
    constant = float(np.exp(fit.intercept_))

    violations = []
    if f.gamma2 is not None and f.c_A is not None:
        bound = f.c_A * distances ** (2.0 * f.gamma2)
        for dist, value, b in zip(distances, values, bound):
            if value > b * (1.0 + 1e-9):
                violations.append({"distance": float(dist), "A": float(value), "bound": float(b)})
        if violations:
            logger.warning(f"Pattern '{f.name}' violates its declared Hölder condition on {len(violations)} samples")

    return HolderReport(
        pattern=f.name,
        exponent=exponent,
        constant=constant,
        declared_gamma2=f.gamma2,
        declared_c_A=f.c_A,
        violations=violations,
        passed=not violations,
    )


def builtin_dictionary(d: int = 1) -> List[Pattern]:
    """The four built-in families with their default parameters."""
    return [make_pattern(kind, d) for kind in BUILTIN_KINDS]


def load_dictionary(path: str) -> List[Pattern]:
    """
    Load a dictionary file: a JSON array of
    {name, kind, d, params, gamma1?, gamma2?, c_A?} (tabulated entries add "path").
    """
    dict_path = Path(path)
    if not dict_path.exists():
        raise PatternError(f"Dictionary file not found: {path}")
    with open(dict_path) as fh:
        try:
            entries = json.load(fh)
        except json.JSONDecodeError as e:
            raise PatternError(f"Dictionary file {path} is not valid JSON: {e}")
    if not isinstance(entries, list) or not entries:
        raise PatternError(f"Dictionary file {path} must hold a non-empty JSON array")

    patterns = []
    for entry in entries:
        kind = entry.get("kind")
        if kind == "tabulated":
            from .tensor_io import read_tensor

            table_path = dict_path.parent / entry["path"]
            field = read_tensor(str(table_path))
            patterns.append(make_tabulated_pattern(
                entry["name"], field.values,
                gamma1=entry.get("gamma1"), gamma2=entry.get("gamma2"), c_A=entry.get("c_A"),
                source=entry["path"],
            ))
        else:
            patterns.append(make_pattern(
                kind, int(entry.get("d", 1)), entry.get("params"), name=entry.get("name"),
                gamma1=entry.get("gamma1"), gamma2=entry.get("gamma2"), c_A=entry.get("c_A"),
            ))

    names = [p.name for p in patterns]
    if len(set(names)) != len(names):
        raise PatternError(f"Dictionary {path} has duplicate pattern names: {names}")
    dims = {p.d for p in patterns}
    if len(dims) != 1:
        raise PatternError(f"Dictionary {path} mixes dimensions {sorted(dims)}")
    logger.info(f"Loaded {len(patterns)} patterns from {path}")
    return patterns


def dictionary_to_json(patterns: Sequence[Pattern]) -> List[Dict]:
    return [p.to_json() for p in patterns]
