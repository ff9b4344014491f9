"""
Epsilon-net over location/scale space
-------------------------------------
Geometric scales beta^l per axis and, for every scale h, the lattice of
spacing alpha*h_j intersected with the admissible locations |t_j| <= L - h_j.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from .config import Settings
from .errors import GeometryError, NetSizeError
from .patterns import Pattern

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScaleGroup:
    """All net locations sharing one scale vector."""

    scale: np.ndarray  # (d,)
    locations: np.ndarray  # (m, d)

    @property
    def size(self) -> int:
        return int(self.locations.shape[0])


@dataclass(frozen=True)
class Net:
    L: float
    d: int
    beta: float
    alpha: float
    epsilon: Optional[float]
    gamma_used: float
    groups: Tuple[ScaleGroup, ...] = field(repr=False)

    @property
    def size(self) -> int:
        return sum(g.size for g in self.groups)

    @property
    def scales(self) -> List[np.ndarray]:
        return [g.scale for g in self.groups]

    def entries(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """(t, h) pairs, grouped by scale."""
        for group in self.groups:
            for t in group.locations:
                yield t, group.scale

    def summary(self) -> Dict:
        return {
            "L": self.L,
            "d": self.d,
            "alpha": self.alpha,
            "beta": self.beta,
            "epsilon": self.epsilon,
            "gamma_used": self.gamma_used,
            "size": self.size,
            "scales": [
                {"h": [float(x) for x in g.scale], "locations": g.size} for g in self.groups
            ],
        }


class NetSpec(BaseModel):
    """Net description as it appears in config files."""

    L: float = Field(gt=1)
    d: int = Field(1, ge=1)
    epsilon: Optional[float] = Field(default=None, gt=0, le=1)
    gamma: float = Field(1.0, gt=0, le=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    beta: Optional[float] = Field(default=None, gt=1)
    C_alpha: Optional[float] = Field(default=None, gt=0)
    C_beta: Optional[float] = Field(default=None, gt=0)
    max_entries: Optional[int] = Field(default=None, ge=1)


class CoverageReport(BaseModel):
    pattern: str
    epsilon: float
    trials: int
    alpha: float
    beta: float
    max_min_distance: float
    covered_fraction: float
    worst_t: List[float]
    worst_h: List[float]


def params_for_epsilon(
    epsilon: float,
    gamma: float,
    d: int,
    C_alpha: float = 0.125,
    C_beta: float = 0.125,
) -> Tuple[float, float]:
    """
    Map a covering radius to lattice spacing and scale ratio.

    alpha = C_alpha * eps^(1/gamma), beta = 1 + C_beta * ((1 + eps)^(2/d) - 1)
    """
    if not epsilon > 0:
        raise GeometryError(f"epsilon must be positive, got {epsilon}")
    if epsilon > 1:
        raise GeometryError(f"epsilon must be at most 1, got {epsilon}")
    if not 0 < gamma <= 1:
        raise GeometryError(f"gamma must lie in (0, 1], got {gamma}")
    if d < 1:
        raise GeometryError(f"dimension must be positive, got {d}")
    if C_alpha <= 0 or C_beta <= 0:
        raise GeometryError(f"net constants must be positive, got C_alpha={C_alpha}, C_beta={C_beta}")

    alpha = C_alpha * epsilon ** (1.0 / gamma)
    beta = 1.0 + C_beta * ((1.0 + epsilon) ** (2.0 / d) - 1.0)
    return alpha, max(beta, 1.0 + 1e-9)


def gamma_for_dictionary(dictionary: Sequence[Pattern]) -> float:
    """Smallest declared Hölder exponent; 1 when only total variation is declared."""
    exponents = [f.gamma2 for f in dictionary if f.gamma2 is not None]
    return min(exponents) if exponents else 1.0


def _scale_levels(L: float, beta: float, factor: int = 1) -> List[float]:
    """beta^(q/factor) for q = 0, 1, ... while the value stays below L."""
    levels = []
    q = 0
    while True:
        value = beta ** (q // factor) if q % factor == 0 else beta ** (q / factor)
        if value >= L:
            break
        levels.append(value)
        q += 1
    return levels


def build_scales(L: float, beta: float, d: int) -> List[np.ndarray]:
    """
    All d-fold products of beta^0..beta^l_max, l_max = floor(log_beta L),
    minus any vector with a component >= L.
    """
    if beta <= 1:
        raise GeometryError(f"beta must exceed 1, got {beta}")
    if L <= 1:
        raise GeometryError(f"L must exceed 1, got {L}")
    levels = _scale_levels(L, beta)
    return [np.array(h, dtype=float) for h in itertools.product(levels, repeat=d)]


def _axis_count(h_j: float, L: float, spacing: float) -> int:
    return int(math.floor((L - h_j) / spacing + 1e-9))


def build_locations(h, L: float, alpha: float) -> np.ndarray:
    """The lattice prod_j (alpha*h_j*Z) intersected with |t_j| <= L - h_j, as an (m, d) array."""
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if alpha <= 0:
        raise GeometryError(f"alpha must be positive, got {alpha}")
    if np.any(h < 1.0) or np.any(h >= L):
        raise GeometryError(f"scale {h.tolist()} outside [1, {L})")

    axes = []
    for h_j in h:
        spacing = alpha * h_j
        m = _axis_count(h_j, L, spacing)
        axes.append(np.arange(-m, m + 1) * spacing)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in mesh], axis=-1)


def net_entry_count(scales: Sequence[np.ndarray], L: float, alpha: float) -> int:
    return sum(
        int(np.prod([2 * _axis_count(h_j, L, alpha * h_j) + 1 for h_j in h])) for h in scales
    )


def build_net(
    L: float,
    d: int,
    epsilon: Optional[float] = None,
    gamma: float = 1.0,
    settings: Optional[Settings] = None,
    alpha: Optional[float] = None,
    beta: Optional[float] = None,
    max_entries: Optional[int] = None,
) -> Net:
    """
    Build the epsilon-net for a domain [-L, L]^d.

    Args:
        L: half-width of the domain
        d: dimension
        epsilon: covering radius; sizes (alpha, beta) through params_for_epsilon
        gamma: smoothness exponent used for alpha
        settings: source of C_alpha, C_beta and the entry cap
        alpha, beta: explicit values, overriding the epsilon rule

    Returns:
        Net with entries grouped by scale
    """
    settings = settings or Settings()
    if alpha is None or beta is None:
        if epsilon is None:
            raise GeometryError("build_net needs epsilon or explicit alpha and beta")
        rule_alpha, rule_beta = params_for_epsilon(epsilon, gamma, d, settings.C_alpha, settings.C_beta)
        alpha = rule_alpha if alpha is None else alpha
        beta = rule_beta if beta is None else beta

    scales = build_scales(L, beta, d)
    cap = max_entries or settings.max_net_entries
    count = net_entry_count(scales, L, alpha)
    if count > cap:
        raise NetSizeError(
            f"Net with alpha={alpha:.6g}, beta={beta:.6g} on L={L}, d={d} has {count} entries, above the cap {cap}"
        )

    groups = tuple(ScaleGroup(scale=h, locations=build_locations(h, L, alpha)) for h in scales)
    net = Net(L=float(L), d=d, beta=float(beta), alpha=float(alpha), epsilon=epsilon,
              gamma_used=float(gamma), groups=groups)
    logger.info(f"Built net: L={L}, d={d}, alpha={alpha:.4g}, beta={beta:.4g}, "
                f"{len(groups)} scales, {net.size} entries")
    return net


def build_net_from_spec(spec: NetSpec, settings: Optional[Settings] = None) -> Net:
    settings = settings or Settings()
    overrides = {k: v for k, v in {"C_alpha": spec.C_alpha, "C_beta": spec.C_beta}.items() if v is not None}
    if overrides:
        settings = settings.model_copy(update=overrides)
    return build_net(spec.L, spec.d, epsilon=spec.epsilon, gamma=spec.gamma, settings=settings,
                     alpha=spec.alpha, beta=spec.beta, max_entries=spec.max_entries)


def refine_net(net: Net, factor: int = 4) -> Net:
    """
    Finer surrogate net: intermediate scale levels beta^(l + k/factor) and
    lattice spacing alpha*h/factor. Every coarse entry is kept with the same
    floats, so the result is a superset of the input.
    """
    if factor < 1:
        raise GeometryError(f"refinement factor must be >= 1, got {factor}")

    fine_alpha = net.alpha / factor
    levels = _scale_levels(net.L, net.beta, factor)
    coarse = {tuple(g.scale.tolist()): g.locations for g in net.groups}

    groups = []
    for h in itertools.product(levels, repeat=net.d):
        scale = np.array(h, dtype=float)
        locations = build_locations(scale, net.L, fine_alpha)
        if h in coarse:
            locations = np.unique(np.concatenate([coarse[h], locations]), axis=0)
        groups.append(ScaleGroup(scale=scale, locations=locations))

    epsilon = net.epsilon / factor if net.epsilon is not None else None
    refined = Net(L=net.L, d=net.d, beta=float(net.beta ** (1.0 / factor)), alpha=fine_alpha,
                  epsilon=epsilon, gamma_used=net.gamma_used, groups=tuple(groups))
    logger.debug(f"Refined net by {factor}: {net.size} -> {refined.size} entries")
    return refined


def snap_offsets(locations: np.ndarray, footprint: Sequence[int], geometry) -> np.ndarray:
    """
    Integer window offsets for kernel centers at the given locations.

    o = round((t + L) R - n/2), clipped to [0, N - n], deduplicated and
    sorted lexicographically. The snapped center is (o + n/2)/R - L.
    `geometry` needs attributes L, R and cells.
    """
    n = np.asarray(footprint, dtype=np.int64)
    upper = geometry.cells - n
    if np.any(upper < 0):
        raise GeometryError(f"Kernel footprint {tuple(n.tolist())} exceeds the tensor extent {geometry.cells}")

    raw = np.rint((np.asarray(locations, dtype=float) + geometry.L) * geometry.R - n / 2.0).astype(np.int64)
    clipped = np.clip(raw, 0, upper)
    moved = int(np.any(clipped != raw, axis=1).sum())
    if moved:
        logger.warning(f"{moved} net locations clipped to the valid region for footprint {tuple(n.tolist())}")
    return np.unique(clipped, axis=0)


def offsets_to_locations(offsets: np.ndarray, footprint: Sequence[int], geometry) -> np.ndarray:
    n = np.asarray(footprint, dtype=float)
    return (np.asarray(offsets, dtype=float) + n / 2.0) / geometry.R - geometry.L


def _candidates(net: Net, t: np.ndarray, h: np.ndarray) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Net entries within one beta step in scale and two alpha steps in location."""
    for group in net.groups:
        ratio = group.scale / h
        if np.any(ratio > net.beta * (1 + 1e-12)) or np.any(ratio < 1.0 / net.beta * (1 - 1e-12)):
            continue
        reach = 2.0 * net.alpha * group.scale + 1e-12
        close = np.all(np.abs(group.locations - t) <= reach, axis=1)
        for loc in group.locations[close]:
            yield loc, group.scale


def verify_net(
    net: Net,
    f: Pattern,
    epsilon: float,
    trials: int = 200,
    seed: int = 0,
    R: int = 16,
) -> CoverageReport:
    """
    Draw uniform (t, h) in the parameter domain and measure the canonical
    distance to the nearest candidate net entry.

    Returns:
        CoverageReport with the largest minimal distance and the covered fraction
    """
    from .metric import ParamPair, nu

    if trials < 1:
        raise GeometryError(f"trials must be >= 1, got {trials}")
    if f.d != net.d:
        raise GeometryError(f"Pattern '{f.name}' has d={f.d} but the net has d={net.d}")

    rng = np.random.default_rng([seed, 23])
    worst, worst_point = -1.0, (np.zeros(net.d), np.ones(net.d))
    covered = 0
    for _ in range(trials):
        h = rng.uniform(1.0, net.L, size=net.d)
        t = rng.uniform(-(net.L - h), net.L - h)
        best = math.inf
        for loc, scale in _candidates(net, t, h):
            best = min(best, nu(f, ParamPair(t, h, loc, scale), R))
            if best == 0.0:
                break
        if best <= epsilon:
            covered += 1
        if best > worst:
            worst, worst_point = best, (t, h)

    report = CoverageReport(
        pattern=f.name,
        epsilon=epsilon,
        trials=trials,
        alpha=net.alpha,
        beta=net.beta,
        max_min_distance=float(worst),
        covered_fraction=covered / trials,
        worst_t=[float(x) for x in worst_point[0]],
        worst_h=[float(x) for x in worst_point[1]],
    )
    logger.info(f"Coverage of '{f.name}' at eps={epsilon}: {report.covered_fraction:.3f} "
                f"(max distance {report.max_min_distance:.4f})")
    return report


def calibrate_net_constants(
    dictionary: Union[Pattern, Sequence[Pattern]],
    L: float,
    d: int,
    epsilon: float,
    grid: Sequence[float] = (1.0, 0.5, 0.25, 0.125),
    trials: int = 200,
    seed: int = 0,
    settings: Optional[Settings] = None,
) -> Dict:
    """
    Coverage search over (C_alpha, C_beta) pairs, coarsest nets first.

    A pair is accepted only when it covers every pattern in the dictionary,
    so the result is the worst case over its members.

    Returns the first accepted pair with one coverage report per pattern.
    """
    settings = settings or Settings()
    patterns = [dictionary] if isinstance(dictionary, Pattern) else list(dictionary)
    if not patterns:
        raise GeometryError("calibrate_net_constants needs at least one pattern")
    gamma = gamma_for_dictionary(patterns)
    names = ", ".join(f.name for f in patterns)

    pairs = sorted(itertools.product(grid, grid), key=lambda p: (-p[0] * p[1], -p[0]))
    for C_alpha, C_beta in pairs:
        trial = settings.model_copy(update={"C_alpha": C_alpha, "C_beta": C_beta})
        try:
            net = build_net(L, d, epsilon=epsilon, gamma=gamma, settings=trial)
        except NetSizeError:
            continue
        reports = []
        for f in patterns:
            report = verify_net(net, f, epsilon, trials=trials, seed=seed, R=settings.resolution)
            reports.append(report)
            if report.covered_fraction < 1.0:
                break
        else:
            worst = max(reports, key=lambda r: r.max_min_distance)
            logger.info(f"C_alpha={C_alpha}, C_beta={C_beta} covers [{names}]; worst is '{worst.pattern}' "
                        f"at {worst.max_min_distance:.4f}")
            return {
                "C_alpha": C_alpha,
                "C_beta": C_beta,
                "worst_pattern": worst.pattern,
                "coverage": {r.pattern: r.model_dump() for r in reports},
            }
    raise GeometryError(f"No (C_alpha, C_beta) pair in {list(grid)} covers [{names}] at eps={epsilon}")
