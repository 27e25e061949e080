"""Seeded synthetic telemetry with injected failure signatures.

Every device gets a per-attribute baseline level, a sinusoidal oscillation and uniform noise. Failed devices also carry
one or more signatures on a fixed subset of attributes:

``abrupt``
    a step of ``abrupt_magnitude`` starting ``abrupt_lead`` days before failure
``trend``
    a linear drift of ``trend_slope`` per day, either over the whole lifetime (crossing zero ``trend_center`` days
    before failure) or as a ramp starting ``trend_onset`` days before failure
``rare``
    single-day spikes of ``rare_magnitude`` occurring with probability ``rare_rate`` per day
``wear``
    a constant elevation of ``wear_level`` across the lifetime

Normal devices carry none. Every device can also show readout glitches: single-day jumps of either sign, sized
between half and all of ``glitch_magnitude``, with probability ``glitch_rate`` per day on every attribute. Glitches
are not failure signatures and hit both classes alike.

Everything except the baseline level is multiplied by a per-device, per-attribute scale drawn log-uniformly from
``[1 / scale_spread, scale_spread]``. With ``scale_spread`` above 1 the raw magnitude of a window says little about
its class, while rank and accumulation statistics are unaffected.

Device ``i`` draws everything from ``derive_seed(seed, i, "device")``.
"""
from typing import Any, Dict, List, Optional, Tuple
from dataclasses import asdict, dataclass, replace
import logging
import math

from dateutil.parser import isoparse
import numpy as np

from .ingest import DEFAULT_ATTRIBUTES, Corpus, DeviceHistory
from .utils import derive_seed

l = logging.getLogger(__name__)

__all__ = (
    "SIGNATURES",
    "ScenarioSpec",
    "signature_attributes",
    "attribute_ids",
    "generate_corpus",
    "generate",
    "scenario_presets",
    "preset",
)

SIGNATURES = ("abrupt", "trend", "rare", "wear")


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of a synthetic corpus. See the module docstring for what each signature does."""

    devices: int = 400
    failure_fraction: float = 0.5
    min_lifetime: int = 60
    max_lifetime: int = 120
    attributes: int = 6
    noise: float = 0.1
    level_spread: float = 1.0
    oscillation_amplitude: float = 0.0
    oscillation_period: float = 7.0
    signatures: Tuple[str, ...] = ("abrupt",)
    signature_probability: float = 1.0
    signature_attributes: int = 3
    abrupt_magnitude: float = 1.0
    abrupt_lead: int = 5
    trend_slope: float = 0.0
    trend_center: int = 15
    trend_onset: Optional[int] = None
    rare_rate: float = 0.0
    rare_magnitude: float = 0.0
    wear_level: float = 0.0
    glitch_rate: float = 0.0
    glitch_magnitude: float = 0.0
    scale_spread: float = 1.0
    seed: int = 0
    start: str = "2017-01-01"

    def __post_init__(self):
        if self.devices < 2:
            raise ValueError(f"devices must be at least 2, got {self.devices}")
        if not 0 < self.failure_fraction < 1:
            raise ValueError(f"failure_fraction must be strictly between 0 and 1, got {self.failure_fraction}")
        if not 1 <= self.min_lifetime <= self.max_lifetime:
            raise ValueError(f"lifetime range [{self.min_lifetime}, {self.max_lifetime}] is empty")
        if self.attributes < 1:
            raise ValueError(f"attributes must be positive, got {self.attributes}")
        if self.noise < 0 or self.level_spread < 0 or self.oscillation_amplitude < 0:
            raise ValueError("noise, level_spread and oscillation_amplitude must be non-negative")
        if self.oscillation_period <= 0:
            raise ValueError(f"oscillation_period must be positive, got {self.oscillation_period}")
        if not self.signatures:
            raise ValueError("signatures must name at least one signature")
        for name in self.signatures:
            if name not in SIGNATURES:
                raise KeyError(f"signatures: unknown signature {name!r}, you want one of {', '.join(SIGNATURES)}")
        if not 0 < self.signature_probability <= 1:
            raise ValueError(f"signature_probability must be in (0, 1], got {self.signature_probability}")
        if self.signature_attributes < 1:
            raise ValueError(f"signature_attributes must be positive, got {self.signature_attributes}")
        if not 0 <= self.abrupt_lead < self.min_lifetime:
            raise ValueError(
                f"abrupt_lead {self.abrupt_lead} must be non-negative and below the shortest lifetime "
                f"{self.min_lifetime}"
            )
        if self.trend_onset is not None and not 0 < self.trend_onset < self.min_lifetime:
            raise ValueError(f"trend_onset {self.trend_onset} must be positive and below the shortest lifetime")
        if not 0 <= self.rare_rate <= 1:
            raise ValueError(f"rare_rate must be a probability, got {self.rare_rate}")
        if not 0 <= self.glitch_rate <= 1:
            raise ValueError(f"glitch_rate must be a probability, got {self.glitch_rate}")
        if self.glitch_magnitude < 0:
            raise ValueError(f"glitch_magnitude must be non-negative, got {self.glitch_magnitude}")
        if not self.scale_spread >= 1:
            raise ValueError(f"scale_spread must be at least 1, got {self.scale_spread}")
        isoparse(self.start)

    @property
    def failed_devices(self) -> int:
        """How many devices fail: ``devices * failure_fraction`` rounded half up, and at least one of each class."""
        return min(max(math.floor(self.devices * self.failure_fraction + 0.5), 1), self.devices - 1)

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result["signatures"] = list(self.signatures)
        return result


def signature_attributes(spec: ScenarioSpec) -> Tuple[int, ...]:
    """The attribute columns carrying failure signatures, shared by every device of the corpus."""
    rng = np.random.default_rng(derive_seed(spec.seed, "attributes"))
    count = min(spec.signature_attributes, spec.attributes)
    return tuple(sorted(int(i) for i in rng.choice(spec.attributes, size=count, replace=False)))


def attribute_ids(spec: ScenarioSpec) -> List[str]:
    """Column ids for the synthetic attributes, borrowed from the real SMART layout."""
    return [DEFAULT_ATTRIBUTES[i] if i < len(DEFAULT_ATTRIBUTES) else f"{1000 + i}_raw" for i in range(spec.attributes)]


def _pick_signatures(spec: ScenarioSpec, rng: np.random.Generator) -> Tuple[str, ...]:
    chosen = tuple(s for s in spec.signatures if rng.random() < spec.signature_probability)
    if not chosen:
        chosen = (spec.signatures[int(rng.integers(len(spec.signatures)))],)
    return tuple(s for s in SIGNATURES if s in chosen)


def _device(spec: ScenarioSpec, index: int, failed: bool, columns: Tuple[int, ...]) -> DeviceHistory:
    rng = np.random.default_rng(derive_seed(spec.seed, index, "device"))
    length = int(rng.integers(spec.min_lifetime, spec.max_lifetime + 1))
    t = np.arange(length, dtype=np.float64)

    levels = rng.uniform(0.0, spec.level_spread, size=spec.attributes)
    phases = rng.uniform(0.0, 2 * np.pi, size=spec.attributes)
    scales = np.ones(spec.attributes)
    if spec.scale_spread > 1:
        bound = math.log(spec.scale_spread)
        scales = np.exp(rng.uniform(-bound, bound, size=spec.attributes))

    # everything added to values from here on is scaled; the levels are added last
    values = spec.oscillation_amplitude * np.sin(2 * np.pi * t[:, None] / spec.oscillation_period + phases)
    values += rng.uniform(-spec.noise, spec.noise, size=values.shape)
    if spec.glitch_rate > 0:
        hits = rng.random(values.shape) < spec.glitch_rate
        sizes = rng.uniform(spec.glitch_magnitude / 2, spec.glitch_magnitude, size=values.shape)
        signs = rng.choice((-1.0, 1.0), size=values.shape)
        values += np.where(hits, signs * sizes, 0.0)

    model = "synthetic"
    if failed:
        signatures = _pick_signatures(spec, rng)
        end = length - 1
        cols = list(columns)
        for name in signatures:
            if name == "abrupt":
                values[end - spec.abrupt_lead :, cols] += spec.abrupt_magnitude
            elif name == "trend":
                if spec.trend_onset is None:
                    drift = spec.trend_slope * (t - (end - spec.trend_center))
                else:
                    drift = spec.trend_slope * np.maximum(0.0, t - (end - spec.trend_onset))
                values[:, cols] += drift[:, None]
            elif name == "rare":
                spikes = rng.random((length, len(cols))) < spec.rare_rate
                values[:, cols] += spec.rare_magnitude * spikes
            elif name == "wear":
                values[:, cols] += spec.wear_level
        model = "synthetic:" + "+".join(signatures)

    return DeviceHistory(
        serial_number=f"SYN{index:06d}",
        model=model,
        dates=np.datetime64(isoparse(spec.start).date(), "D") + np.arange(length),
        values=levels + scales * values,
        failed=failed,
    )


def generate_corpus(spec: ScenarioSpec) -> List[DeviceHistory]:
    """Generate ``spec.devices`` histories, exactly ``spec.failed_devices`` of them failed. Bit-identical per seed."""
    columns = signature_attributes(spec)
    order = np.random.default_rng(derive_seed(spec.seed, "failures")).permutation(spec.devices)
    failed = set(order[: spec.failed_devices].tolist())
    histories = [_device(spec, i, i in failed, columns) for i in range(spec.devices)]
    l.info("Generated %d synthetic devices (%d failed), signatures on columns %s", spec.devices, len(failed), columns)
    return histories


def generate(spec: ScenarioSpec) -> Corpus:
    """`generate_corpus` wrapped as a `Corpus`, with the scenario recorded in its report."""
    return Corpus(attribute_ids(spec), generate_corpus(spec), {"scenario": spec.to_dict()})


def scenario_presets() -> Dict[str, ScenarioSpec]:
    """Named scenarios. The names are stable."""
    return {
        # step 5 days out plus a ramp from 20 days out, so longer horizons see progressively less signal
        "abrupt-near-failure": ScenarioSpec(
            noise=0.3,
            level_spread=2.0,
            oscillation_amplitude=0.3,
            signatures=("abrupt", "trend"),
            abrupt_magnitude=3.0,
            abrupt_lead=5,
            trend_slope=0.05,
            trend_onset=20,
        ),
        # drift crosses zero mid-window, so per-day marginals of both classes coincide; glitches and a 400-fold
        # range of scales swamp the drift in raw values but not in ranks
        "noisy-trend": ScenarioSpec(
            noise=0.6,
            level_spread=3.0,
            oscillation_amplitude=0.2,
            signatures=("trend",),
            trend_slope=0.04,
            trend_center=15,
            glitch_rate=0.1,
            glitch_magnitude=8.0,
            scale_spread=20.0,
        ),
        "wearout": ScenarioSpec(
            noise=0.3,
            level_spread=2.0,
            oscillation_amplitude=0.2,
            signatures=("wear", "rare"),
            wear_level=0.5,
            rare_rate=0.05,
            rare_magnitude=2.0,
        ),
    }


def preset(name: str, **overrides) -> ScenarioSpec:
    """A preset with some fields replaced, e.g. ``preset("noisy-trend", devices=100, seed=7)``."""
    presets = scenario_presets()
    if name not in presets:
        raise KeyError(f"preset: unknown scenario {name!r}, you want one of {', '.join(presets)}")
    return replace(presets[name], **overrides)

