"""
Multiscale scan engine
----------------------
Valid-region cross-correlation of tensors with rasterized pattern kernels,
the scale correction v_h, the single-tensor net scan e(X; f) and the
pattern-adapted average E_n over a dictionary.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field
from scipy import fft as sp_fft
from scipy.signal import correlate

from .config import Settings
from .errors import GeometryError, ValidationError
from .net import Net, offsets_to_locations, refine_net, snap_offsets
from .patterns import Kernel, Pattern, rasterize

logger = logging.getLogger(__name__)


class Geometry(BaseModel):
    """Tensor domain [-L, L]^d sampled at R cells per unit length."""

    model_config = {"frozen": True}

    d: int = Field(ge=1)
    L: float = Field(gt=0)
    R: int = Field(ge=1)

    @property
    def cells(self) -> int:
        count = 2.0 * self.L * self.R
        if abs(count - round(count)) > 1e-9:
            raise GeometryError(f"2*L*R must be an integer, got L={self.L}, R={self.R}")
        return int(round(count))

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.cells,) * self.d

    def validate_for(self, settings: Settings) -> "Geometry":
        _ = self.cells
        if self.R < settings.min_resolution:
            raise GeometryError(f"Resolution {self.R} is below the minimum {settings.min_resolution}")
        return self


@dataclass
class TensorField:
    values: np.ndarray
    geometry: Geometry
    provenance: Dict = field(default_factory=lambda: {"kind": "null"})

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.shape:
            raise GeometryError(
                f"Tensor shape {self.values.shape} does not match geometry {self.geometry.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GeometryError("Tensor values must be finite")

    @property
    def d(self) -> int:
        return self.geometry.d

    @property
    def L(self) -> float:
        return self.geometry.L

    @property
    def R(self) -> int:
        return self.geometry.R


class ScanResult(BaseModel):
    pattern: str
    statistic: float
    argmax_t: List[float]
    argmax_h: List[float]
    raw_convolution_at_argmax: float
    per_scale_max: Dict[str, float]
    per_scale_raw_max: Dict[str, float] = Field(default_factory=dict)

    def report(self) -> Dict:
        return {
            "pattern": self.pattern,
            "statistic": self.statistic,
            "t": self.argmax_t,
            "h": self.argmax_h,
            "per_scale_max": self.per_scale_max,
        }


class PamssResult(BaseModel):
    best_pattern: str
    E_n: float
    n: int
    per_pattern_scores: Dict[str, float]
    per_tensor: List[ScanResult]


def scale_key(h) -> str:
    return ",".join(f"{x:.10g}" for x in np.atleast_1d(h))


def v_h(h, L: float) -> float:
    """Scale correction sqrt(2 * sum_j log(L / h_j))."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if np.any(h <= 0) or np.any(h > L):
        raise GeometryError(f"scale {h.tolist()} outside (0, {L}]")
    return float(math.sqrt(max(0.0, 2.0 * float(np.sum(np.log(L / h))))))


def _use_direct(kernel: Kernel, crossover: int) -> bool:
    # crossover bounds the footprint along every axis
    return max(kernel.footprint) < crossover


def _valid_slice(shape: Sequence[int], footprint: Sequence[int]) -> Tuple[slice, ...]:
    return tuple(slice(0, n_x - n_k + 1) for n_x, n_k in zip(shape, footprint))


def convolve_at_scale(
    X: TensorField,
    kernel: Kernel,
    method: str = "auto",
    crossover: int = 64,
) -> np.ndarray:
    """
    Valid-region cross-correlation: out[o] = sum_k X[o + k] * kernel[k].

    Args:
        method: "fft", "direct" or "auto" (direct when every axis of the footprint is below `crossover`)

    Returns:
        Array of shape (N - n + 1) per axis
    """
    if kernel.values.ndim != X.d:
        raise GeometryError(f"Kernel dimension {kernel.values.ndim} does not match tensor d={X.d}")
    if any(n > N for n, N in zip(kernel.footprint, X.values.shape)):
        raise GeometryError(f"Kernel footprint {kernel.footprint} is larger than the tensor {X.values.shape}")

    if method == "auto":
        method = "direct" if _use_direct(kernel, crossover) else "fft"
    if method == "direct":
        return correlate(X.values, kernel.values, mode="valid", method="direct")
    if method == "fft":
        spectrum = sp_fft.rfftn(X.values)
        return _fft_correlate(spectrum, _kernel_spectrum(kernel, X.values.shape), X.values.shape, kernel.footprint)
    raise GeometryError(f"Unknown convolution method: {method}")


def _kernel_spectrum(kernel: Kernel, shape: Tuple[int, ...]) -> np.ndarray:
    return np.conj(sp_fft.rfftn(kernel.values, s=shape))


def _fft_correlate(spectrum, kernel_spectrum, shape, footprint) -> np.ndarray:
    # circular correlation of size N has no wraparound on offsets 0..N-n
    full = sp_fft.irfftn(spectrum * kernel_spectrum, s=shape)
    return full[_valid_slice(shape, footprint)]


class ScanEngine:
    """
    Scans tensors of one geometry against a dictionary over a fixed net.

    Kernels, their spectra and the snapped offsets are cached per
    (pattern, scale); call prepare() before sharing the engine between
    threads so workers only read.
    """

    def __init__(
        self,
        dictionary: Sequence[Pattern],
        net: Net,
        geometry: Geometry,
        settings: Optional[Settings] = None,
        two_sided: Optional[bool] = None,
    ):
        self.settings = settings or Settings()
        self.dictionary = list(dictionary)
        self.net = net
        self.geometry = geometry.validate_for(self.settings)
        self.two_sided = self.settings.two_sided if two_sided is None else two_sided

        if not self.dictionary:
            raise GeometryError("Dictionary is empty")
        if net.size == 0:
            raise GeometryError("Net has no entries")
        if net.d != geometry.d or abs(net.L - geometry.L) > 1e-12:
            raise GeometryError(f"Net (L={net.L}, d={net.d}) does not match tensors (L={geometry.L}, d={geometry.d})")
        for f in self.dictionary:
            if f.d != geometry.d:
                raise GeometryError(f"Pattern '{f.name}' has d={f.d}, tensors have d={geometry.d}")

        self._v = [v_h(g.scale, net.L) for g in net.groups]
        self._kernels: Dict[Tuple[int, int], Kernel] = {}
        self._spectra: Dict[Tuple[int, int], np.ndarray] = {}
        self._offsets: Dict[int, np.ndarray] = {}
        self._prepared = False

    def _kernel(self, p: int, g: int) -> Kernel:
        key = (p, g)
        if key not in self._kernels:
            self._kernels[key] = rasterize(self.dictionary[p], self.net.groups[g].scale, self.geometry.R)
        return self._kernels[key]

    def _offsets_for(self, g: int) -> np.ndarray:
        if g not in self._offsets:
            footprint = self._kernel(0, g).footprint
            self._offsets[g] = snap_offsets(self.net.groups[g].locations, footprint, self.geometry)
        return self._offsets[g]

    def _spectrum(self, p: int, g: int) -> np.ndarray:
        key = (p, g)
        if key not in self._spectra:
            self._spectra[key] = _kernel_spectrum(self._kernel(p, g), self.geometry.shape)
        return self._spectra[key]

    def prepare(self) -> "ScanEngine":
        if self._prepared:
            return self
        for g in range(len(self.net.groups)):
            for p in range(len(self.dictionary)):
                kernel = self._kernel(p, g)
                if not _use_direct(kernel, self.settings.fft_crossover):
                    self._spectrum(p, g)
            self._offsets_for(g)
        self._prepared = True
        logger.info(f"Scan engine ready: {len(self.dictionary)} patterns x {len(self.net.groups)} scales, "
                    f"{len(self._spectra)} kernel spectra cached")
        return self

    def _check(self, X: TensorField):
        if X.geometry != self.geometry:
            raise GeometryError(f"Tensor geometry {X.geometry.model_dump()} does not match the engine's "
                                f"{self.geometry.model_dump()}")

    def _conv(self, X: TensorField, spectrum: Optional[np.ndarray], p: int, g: int) -> np.ndarray:
        kernel = self._kernel(p, g)
        if _use_direct(kernel, self.settings.fft_crossover):
            return correlate(X.values, kernel.values, mode="valid", method="direct")
        return _fft_correlate(spectrum, self._spectrum(p, g), self.geometry.shape, kernel.footprint)

    def _scan_pattern(self, X: TensorField, spectrum: np.ndarray, p: int) -> ScanResult:
        best = None  # (value, h_volume, t, raw, h)
        per_scale, per_scale_raw = {}, {}

        for g, group in enumerate(self.net.groups):
            offsets = self._offsets_for(g)
            conv = self._conv(X, spectrum, p, g)[tuple(offsets.T)]
            if self.two_sided:
                conv = np.abs(conv)
            v = self._v[g]
            standardized = v * (conv - v)
            i = int(np.argmax(standardized))
            value = float(standardized[i])
            key = scale_key(group.scale)
            per_scale[key] = value
            per_scale_raw[key] = float(conv.max())

            t = offsets_to_locations(offsets[i], self._kernel(p, g).footprint, self.geometry)
            candidate = (value, float(np.prod(group.scale)), t, float(conv[i]), group.scale)
            if best is None or _wins(candidate, best):
                best = candidate

        value, _, t, raw, h = best
        return ScanResult(
            pattern=self.dictionary[p].name,
            statistic=value,
            argmax_t=[float(x) for x in t],
            argmax_h=[float(x) for x in h],
            raw_convolution_at_argmax=raw,
            per_scale_max=per_scale,
            per_scale_raw_max=per_scale_raw,
        )

    def spectrum(self, X: TensorField) -> np.ndarray:
        return sp_fft.rfftn(X.values)

    def scan(self, X: TensorField, pattern: int = 0) -> ScanResult:
        self._check(X)
        return self._scan_pattern(X, self.spectrum(X), pattern)

    def scan_all(self, X: TensorField) -> List[ScanResult]:
        """One result per dictionary pattern; the tensor spectrum is computed once."""
        self._check(X)
        spectrum = self.spectrum(X)
        return [self._scan_pattern(X, spectrum, p) for p in range(len(self.dictionary))]


def _wins(candidate, incumbent) -> bool:
    """Larger value; ties go to the coarser scale, then the lexicographically smaller location."""
    if candidate[0] != incumbent[0]:
        return candidate[0] > incumbent[0]
    if candidate[1] != incumbent[1]:
        return candidate[1] > incumbent[1]
    return tuple(candidate[2]) < tuple(incumbent[2])


def scan_single(
    X: TensorField,
    f: Pattern,
    net: Net,
    settings: Optional[Settings] = None,
    two_sided: Optional[bool] = None,
) -> ScanResult:
    """e(X; f): max over net entries of v_h((f_h * X)(t) - v_h)."""
    return ScanEngine([f], net, X.geometry, settings, two_sided).scan(X)


def continuous_scan(
    X: TensorField,
    f: Pattern,
    net: Net,
    factor: int = 4,
    settings: Optional[Settings] = None,
) -> ScanResult:
    """Fine-net surrogate for the continuous scan s(X; f)."""
    return scan_single(X, f, refine_net(net, factor), settings)


def _common_geometry(Xs: Sequence[TensorField]) -> Geometry:
    if not Xs:
        raise GeometryError("No tensors given")
    geometry = Xs[0].geometry
    for i, X in enumerate(Xs):
        if X.geometry != geometry:
            raise GeometryError(f"Tensor {i} has geometry {X.geometry.model_dump()}, expected {geometry.model_dump()}")
    return geometry


def pamss(
    Xs: Sequence[TensorField],
    dictionary: Sequence[Pattern],
    net: Net,
    settings: Optional[Settings] = None,
    jobs: Optional[int] = None,
    engine: Optional[ScanEngine] = None,
) -> PamssResult:
    """
    E_n = max_f n^(-1/2) sum_i e(X^i; f), with the per-tensor argmax
    (t, h) of the winning pattern.

    Args:
        Xs: tensors sharing one geometry
        dictionary: non-empty pattern list; ties go to the earlier pattern
        jobs: worker threads over tensors (defaults to settings.jobs)
        engine: a prepared engine to reuse across calls; it must hold `dictionary`
    """
    settings = settings or Settings()
    geometry = _common_geometry(Xs)
    if engine is None:
        engine = ScanEngine(dictionary, net, geometry, settings)
    else:
        if engine.geometry != geometry:
            raise GeometryError("Engine geometry does not match the tensors")
        if [f.to_json() for f in dictionary] != [f.to_json() for f in engine.dictionary]:
            raise ValidationError(
                f"Engine dictionary [{', '.join(f.name for f in engine.dictionary)}] does not match "
                f"[{', '.join(f.name for f in dictionary)}]"
            )
    engine.prepare()

    jobs = jobs or settings.jobs
    if jobs == 1:
        results = [engine.scan_all(X) for X in Xs]
    else:
        results = Parallel(n_jobs=jobs, prefer="threads")(delayed(engine.scan_all)(X) for X in Xs)

    n = len(Xs)
    names = [f.name for f in engine.dictionary]
    sums = np.zeros(len(names))
    for per_tensor in results:
        sums += np.array([r.statistic for r in per_tensor])
    scores = sums / math.sqrt(n)
    best = int(np.argmax(scores))

    return PamssResult(
        best_pattern=names[best],
        E_n=float(scores[best]),
        n=n,
        per_pattern_scores={name: float(s) for name, s in zip(names, scores)},
        per_tensor=[per_tensor[best] for per_tensor in results],
    )
