"""Smart features: derived channels computed from an event matrix by fixed transforms along the time axis.

Every transform takes a ``T x F`` matrix (time down the rows, one attribute per column) and returns a ``T x F`` matrix.

=================  ==============================================  ==============================
FeatureId          Transform                                       Pattern it brings out
=================  ==============================================  ==============================
EdgeChange         kernel ``[-1, 1]``, causal                      abrupt change
Smoothed           kernel ``[0.25, 0.5, 0.25]``, replicate         noise reduction
Blurred            kernel ``[1, 4, 6, 4, 1] / 16``, replicate      longer moving average
CumulativeSum      running sum over the window                     lifetime wear
ReversalCount      earlier samples strictly below the current one  up-trend
CusumF1Pos/Neg     CUSUM g+/g- of the raw series                   trend up/down from mean
CusumF2Pos/Neg     CUSUM g+/g- of the daily change                 momentum
=================  ==============================================  ==============================
"""
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple
from dataclasses import dataclass, replace
from enum import Enum, auto
import logging

from numpy.lib.stride_tricks import sliding_window_view
import numpy as np

l = logging.getLogger(__name__)

__all__ = (
    "FeatureId",
    "Padding",
    "CusumMode",
    "CusumParams",
    "FeatureStack",
    "EDGE_KERNEL",
    "WIDE_EDGE_KERNEL",
    "SMOOTH_KERNEL",
    "BLUR_KERNEL",
    "FEATURE_SETS",
    "parse_feature_set",
    "feature_set_name",
    "conv_time",
    "cumulative_sum",
    "reversal_counts",
    "cusum",
    "build_feature_stack",
    "render_image",
    "render_stack",
)

EDGE_KERNEL = (-1.0, 1.0)
WIDE_EDGE_KERNEL = (-1.0, 0.0, 1.0)
SMOOTH_KERNEL = (0.25, 0.5, 0.25)
BLUR_KERNEL = tuple(x / 16 for x in (1.0, 4.0, 6.0, 4.0, 1.0))


class FeatureId(Enum):
    """The channels a feature stack can hold, in stack order."""

    Original = auto()
    EdgeChange = auto()
    Smoothed = auto()
    Blurred = auto()
    CumulativeSum = auto()
    ReversalCount = auto()
    CusumF1Pos = auto()
    CusumF1Neg = auto()
    CusumF2Pos = auto()
    CusumF2Neg = auto()

    @property
    def slug(self) -> str:
        """The name used on the command line and in file names."""
        return _SLUGS[self]

    @classmethod
    def from_slug(cls, slug: str) -> "FeatureId":
        """Inverse of `slug`."""
        for member, name in _SLUGS.items():
            if name == slug:
                return member
        raise KeyError(f"features: unknown feature {slug!r}, you want e.g. {_SLUGS[cls.EdgeChange]!r}")


_SLUGS = {
    FeatureId.Original: "original",
    FeatureId.EdgeChange: "edge",
    FeatureId.Smoothed: "smooth",
    FeatureId.Blurred: "blur",
    FeatureId.CumulativeSum: "cumsum",
    FeatureId.ReversalCount: "reversal",
    FeatureId.CusumF1Pos: "cusum-f1-pos",
    FeatureId.CusumF1Neg: "cusum-f1-neg",
    FeatureId.CusumF2Pos: "cusum-f2-pos",
    FeatureId.CusumF2Neg: "cusum-f2-neg",
}

DERIVED_FEATURES = frozenset(f for f in FeatureId if f is not FeatureId.Original)

_GROUPS: Dict[str, Set[FeatureId]] = {
    "cusum-f1": {FeatureId.CusumF1Pos, FeatureId.CusumF1Neg},
    "cusum-f2": {FeatureId.CusumF2Pos, FeatureId.CusumF2Neg},
    "cusum": {FeatureId.CusumF1Pos, FeatureId.CusumF1Neg, FeatureId.CusumF2Pos, FeatureId.CusumF2Neg},
}

FEATURE_SETS: Dict[str, str] = {
    "original": "",
    "all": ",".join(f.slug for f in FeatureId if f is not FeatureId.Original),
    "strong": "all,-smooth,-cumsum,-cusum-f1",
}


def parse_feature_set(expr: str) -> Set[FeatureId]:
    """Parse a feature-set expression into the set of enabled derived channels.

    Tokens are comma separated; each is a preset from `FEATURE_SETS`, a group (``cusum-f1``, ``cusum-f2``, ``cusum``) or
    a single feature slug. A leading ``-`` removes instead of adding. ``original`` contributes nothing, since the
    original channel is always present.
    """
    enabled: Set[FeatureId] = set()
    for token in (t.strip() for t in expr.split(",")):
        if not token:
            continue
        remove = token.startswith("-")
        name = token.lstrip("-")
        if name in FEATURE_SETS:
            members = parse_feature_set(FEATURE_SETS[name]) if FEATURE_SETS[name] else set()
        elif name in _GROUPS:
            members = set(_GROUPS[name])
        else:
            members = {FeatureId.from_slug(name)}
        members.discard(FeatureId.Original)
        if remove:
            enabled -= members
        else:
            enabled |= members
    return enabled


def feature_set_name(enabled: Iterable[FeatureId]) -> str:
    """A canonical, order-stable name for a set of enabled channels."""
    enabled = set(enabled) - {FeatureId.Original}
    for name, expr in FEATURE_SETS.items():
        if enabled == (parse_feature_set(expr) if expr else set()):
            return name
    return ",".join(f.slug for f in FeatureId if f in enabled)


class Padding(Enum):
    """How `conv_time` extends the series so the output keeps length T."""

    CAUSAL = auto()
    REPLICATE = auto()


def conv_time(matrix: np.ndarray, kernel: Sequence[float], padding: Padding = Padding.REPLICATE) -> np.ndarray:
    """Apply a 1-D kernel along the time axis of every attribute column.

    Taps are applied oldest-first. With `Padding.CAUSAL`, ``out(t) = sum_j k[j] * x(t - K + 1 + j)`` and x(0) is
    repeated in front, so an edge kernel yields 0 at t = 0. With `Padding.REPLICATE` the kernel is centred and both
    ends are repeated.

    :raises ValueError: if the kernel is shorter than 2 or longer than the series.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 1 or len(k) < 2:
        raise ValueError(f"kernel must have at least 2 taps, got {list(kernel)}")
    if len(k) > matrix.shape[0]:
        raise ValueError(f"kernel of {len(k)} taps is longer than the series ({matrix.shape[0]} steps)")

    if padding is Padding.CAUSAL:
        before, after = len(k) - 1, 0
    else:
        before = (len(k) - 1) // 2
        after = len(k) - 1 - before
    padded = np.concatenate(
        [np.repeat(matrix[:1], before, axis=0), matrix, np.repeat(matrix[-1:], after, axis=0)], axis=0
    )
    windows = sliding_window_view(padded, len(k), axis=0)
    return windows @ k


def cumulative_sum(matrix: np.ndarray) -> np.ndarray:
    """``out(t) = sum of x(i) for i <= t``, per attribute."""
    return np.cumsum(np.asarray(matrix, dtype=np.float64), axis=0)


def reversal_counts(matrix: np.ndarray) -> np.ndarray:
    """``out(t) = |{i < t : x(i) < x(t)}|``, per attribute: how many earlier samples lie strictly below the current."""
    x = np.asarray(matrix, dtype=np.float64)
    earlier = np.tril(np.ones((x.shape[0], x.shape[0]), dtype=bool), k=-1)
    below = x[None, :, :] < x[:, None, :]
    return (below & earlier[:, :, None]).sum(axis=1).astype(np.float64)


class CusumMode(Enum):
    """Whether CUSUM accumulates deviations of the raw series (F1) or of its daily change (F2)."""

    F1 = auto()
    F2 = auto()


@dataclass(frozen=True)
class CusumParams:
    """Parameters of the accumulated-trend CUSUM.

    ``init_period`` is the number of leading samples whose mean becomes the target; None means ``max(2, T // 4)``,
    capped at T. ``slack`` is the allowance K.
    """

    mode: CusumMode = CusumMode.F1
    init_period: Optional[int] = None
    slack: float = 0.0

    def resolve(self, length: int) -> int:
        """The init period to use for a series of the given length."""
        if self.init_period is None:
            return min(length, max(2, length // 4))
        if not 1 <= self.init_period <= length:
            raise ValueError(f"cusum.init_period must be in [1, {length}], got {self.init_period}")
        return self.init_period


def cusum(matrix: np.ndarray, params: CusumParams) -> Tuple[np.ndarray, np.ndarray]:
    """Accumulate positive and negative deviations from the initial-period mean over the whole window.

    ``g+(t) = max(0, g+(t-1) + s(t) - (target + K))`` and ``g-(t) = max(0, g-(t-1) - s(t) + (target - K))`` with both
    sums starting from zero and never reset. ``s`` is the raw series in F1 mode and the daily change (``s(0) = 0``) in
    F2 mode.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if params.mode is CusumMode.F1:
        s = x
    else:
        s = np.zeros_like(x)
        s[1:] = x[1:] - x[:-1]
    target = s[: params.resolve(len(s))].mean(axis=0)

    g_plus = np.zeros_like(s)
    g_minus = np.zeros_like(s)
    prev_plus = np.zeros(s.shape[1:])
    prev_minus = np.zeros(s.shape[1:])
    for t in range(len(s)):
        prev_plus = np.maximum(0.0, prev_plus + s[t] - (target + params.slack))
        prev_minus = np.maximum(0.0, prev_minus - s[t] + (target - params.slack))
        g_plus[t] = prev_plus
        g_minus[t] = prev_minus
    return g_plus, g_minus


def _rescale_columns(matrix: np.ndarray) -> np.ndarray:
    lo = matrix.min(axis=0)
    span = matrix.max(axis=0) - lo
    out = (matrix - lo) / np.where(span == 0, 1.0, span)
    out[:, span == 0] = 0.0
    return out


@dataclass(frozen=True)
class FeatureStack:
    """An ordered set of named ``T x F`` channels; the original channel is always first."""

    features: Tuple[FeatureId, ...]
    matrices: np.ndarray  # channels x T x F

    def __post_init__(self):
        if not self.features or self.features[0] is not FeatureId.Original:
            raise ValueError("A feature stack must start with the original channel")
        if self.matrices.ndim != 3 or self.matrices.shape[0] != len(self.features):
            raise ValueError(f"Stack of {len(self.features)} features has matrices of shape {self.matrices.shape}")

    @property
    def window_length(self) -> int:
        """T."""
        return self.matrices.shape[1]

    @property
    def n_attributes(self) -> int:
        """F."""
        return self.matrices.shape[2]

    def channel(self, feature: FeatureId) -> np.ndarray:
        """The ``T x F`` matrix of one channel."""
        return self.matrices[self.features.index(feature)]

    def flatten(self) -> np.ndarray:
        """The network input: ``(channels * F) x T``, channel-major."""
        c, t, f = self.matrices.shape
        return self.matrices.transpose(0, 2, 1).reshape(c * f, t)


def build_feature_stack(
    window: np.ndarray,
    enabled: Iterable[FeatureId],
    cusum_params: Optional[CusumParams] = None,
    edge_kernel: Sequence[float] = EDGE_KERNEL,
) -> FeatureStack:
    """Stack the original window with every enabled derived channel, in `FeatureId` order.

    Derived channels are rescaled per attribute to [0, 1] over the window (constant columns become 0). The original
    channel is passed through as is; it has already been normalized.
    """
    window = np.asarray(window, dtype=np.float64)
    wanted = set(enabled) | {FeatureId.Original}
    if cusum_params is None:
        cusum_params = CusumParams()

    cusums: Dict[CusumMode, Tuple[np.ndarray, np.ndarray]] = {}

    def cusum_for(mode: CusumMode) -> Tuple[np.ndarray, np.ndarray]:
        if mode not in cusums:
            cusums[mode] = cusum(window, replace(cusum_params, mode=mode))
        return cusums[mode]

    transforms = {
        FeatureId.Original: lambda: window,
        FeatureId.EdgeChange: lambda: conv_time(window, edge_kernel, Padding.CAUSAL),
        FeatureId.Smoothed: lambda: conv_time(window, SMOOTH_KERNEL, Padding.REPLICATE),
        FeatureId.Blurred: lambda: conv_time(window, BLUR_KERNEL, Padding.REPLICATE),
        FeatureId.CumulativeSum: lambda: cumulative_sum(window),
        FeatureId.ReversalCount: lambda: reversal_counts(window),
        FeatureId.CusumF1Pos: lambda: cusum_for(CusumMode.F1)[0],
        FeatureId.CusumF1Neg: lambda: cusum_for(CusumMode.F1)[1],
        FeatureId.CusumF2Pos: lambda: cusum_for(CusumMode.F2)[0],
        FeatureId.CusumF2Neg: lambda: cusum_for(CusumMode.F2)[1],
    }

    features = tuple(f for f in FeatureId if f in wanted)
    matrices: List[np.ndarray] = []
    for feature in features:
        matrix = transforms[feature]()
        matrices.append(matrix if feature is FeatureId.Original else _rescale_columns(matrix))
    return FeatureStack(features, np.stack(matrices))


def render_image(matrix: np.ndarray) -> bytes:
    """Render an event matrix as a binary PGM (P5): time runs left to right, one pixel row per attribute.

    Each attribute is min-max scaled to 0-255 with floor rounding; constant attributes render black.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("Cannot render a matrix with non-finite entries")
    rows = x.T
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    scaled = np.floor(255.0 * (rows - lo) / np.where(span == 0, 1.0, span))
    scaled[(span == 0)[:, 0]] = 0
    pixels = np.clip(scaled, 0, 255).astype(np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def render_stack(stack: FeatureStack) -> Dict[FeatureId, bytes]:
    """Render every channel of a stack."""
    return {feature: render_image(stack.channel(feature)) for feature in stack.features}
