"""Synthetic channel taps, first-arriving-path extraction and LoS/NLoS testing."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InsufficientData, NoDetectablePath, ParseError
from .raypath import Mechanism, MechanismKind, Mpc
from .scene import SPEED_OF_LIGHT, Band, FrequencyBand


class LosLabel(str, Enum):
    LOS = "LoS"
    NLOS = "NLoS"


@dataclass(frozen=True)
class DiffuseParams:
    mean_count: float = 5.0
    mean_excess_delay_s: float = 20e-9
    loss_spread_db: float = 20.0


def _band_map(values: Mapping) -> dict:
    return {Band(k): float(v) for k, v in values.items()}


@dataclass(frozen=True)
class LossParams:
    """Per-mechanism attenuation and receiver settings.

    ``tx_power_db`` is the transmit EIRP per band; tap power is
    ``tx_power_db[band] + path_gain``. Detection needs
    ``power >= noise_floor_db + fap_threshold_db``.
    """

    wall_loss_db: Mapping[Band, float] = field(
        default_factory=lambda: {Band.FR1: 5.0, Band.FR2: 25.0, Band.FR3: 15.0})
    reflection_loss_db: float = 7.0
    diffraction_loss_db: float = 15.0
    noise_floor_db: float = -100.0
    fap_threshold_db: float = 20.0
    toa_sigma_m: float = 0.1
    diffuse: DiffuseParams = DiffuseParams()
    tx_power_db: Mapping[Band, float] = field(
        default_factory=lambda: {Band.FR1: 23.0, Band.FR2: 30.0, Band.FR3: 20.0})

    def __post_init__(self):
        losses = [*self.wall_loss_db.values(), self.reflection_loss_db, self.diffraction_loss_db]
        if any(v < 0 for v in losses):
            raise ParseError("losses must be >= 0")
        if self.fap_threshold_db <= 0:
            raise ParseError("fap_threshold_db must be > 0")
        if self.toa_sigma_m < 0:
            raise ParseError("toa_sigma_m must be >= 0")
        d = self.diffuse
        if d.mean_count < 0 or d.mean_excess_delay_s <= 0 or d.loss_spread_db < 5:
            raise ParseError("diffuse needs mean_count >= 0, delay > 0, loss_spread_db >= 5")

    @property
    def detection_level_db(self) -> float:
        return self.noise_floor_db + self.fap_threshold_db

    @classmethod
    def from_dict(cls, cfg: Mapping | None) -> "LossParams":
        cfg = dict(cfg or {})
        known = {"wall_loss_db", "reflection_loss_db", "diffraction_loss_db", "noise_floor_db",
                 "fap_threshold_db", "toa_sigma_m", "diffuse", "tx_power_db"}
        extra = set(cfg) - known
        if extra:
            raise ParseError(f"unknown loss_params keys: {sorted(extra)}")
        base = cls()
        try:
            kw = {}
            for key in ("wall_loss_db", "tx_power_db"):
                if key in cfg:
                    kw[key] = {**getattr(base, key), **_band_map(cfg[key])}
            for key in ("reflection_loss_db", "diffraction_loss_db", "noise_floor_db",
                        "fap_threshold_db", "toa_sigma_m"):
                if key in cfg:
                    kw[key] = float(cfg[key])
            if "diffuse" in cfg:
                kw["diffuse"] = replace(base.diffuse, **{k: float(v) for k, v in cfg["diffuse"].items()})
        except (TypeError, ValueError) as exc:
            raise ParseError(f"loss_params: {exc}") from exc
        return replace(base, **kw)

    def to_dict(self) -> dict:
        return {
            "wall_loss_db": {b.value: v for b, v in sorted(self.wall_loss_db.items())},
            "reflection_loss_db": self.reflection_loss_db,
            "diffraction_loss_db": self.diffraction_loss_db,
            "noise_floor_db": self.noise_floor_db,
            "fap_threshold_db": self.fap_threshold_db,
            "toa_sigma_m": self.toa_sigma_m,
            "diffuse": asdict(self.diffuse),
            "tx_power_db": {b.value: v for b, v in sorted(self.tx_power_db.items())},
        }


@dataclass(frozen=True)
class CirTap:
    delay: float
    power: float
    mechanism: Mechanism
    anchor_id: str = ""
    mpc: Mpc | None = field(default=None, compare=False)


@dataclass(frozen=True)
class ToaMeasurement:
    anchor_id: str
    range: float
    sigma: float
    true_mechanism: Mechanism | None = None
    los_label: LosLabel | None = None
    edge_id: str | None = None
    power: float | None = None

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError(f"range must be positive, got {self.range}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def link_rng(seed: int, node_index: int, anchor_id: str, trial: int = 0) -> np.random.Generator:
    """Independent stream per (seed, node, anchor, trial), stable across processes."""
    tag = zlib.crc32(anchor_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, node_index, tag, trial]))


def fspl_db(path_length: float, carrier_hz: float) -> float:
    return 20.0 * math.log10(4.0 * math.pi * path_length * carrier_hz / SPEED_OF_LIGHT)


def path_gain(mpc: Mpc, band: FrequencyBand, loss_params: LossParams) -> float:
    """Free-space loss plus wall, bounce and edge losses, as a (negative) gain in dB."""
    kind = mpc.mechanism.kind
    gain = -fspl_db(mpc.path_length, band.carrier_hz)
    gain -= mpc.crossings * loss_params.wall_loss_db[band.band]
    if kind is MechanismKind.REFLECTION:
        gain -= mpc.mechanism.order * loss_params.reflection_loss_db
    elif kind is MechanismKind.DIFFRACTION:
        gain -= loss_params.diffraction_loss_db
    return gain


def specular_taps(mpcs: Sequence[Mpc], band: FrequencyBand, loss_params: LossParams) -> list[CirTap]:
    tx = loss_params.tx_power_db[band.band]
    taps = [CirTap(m.path_length / SPEED_OF_LIGHT, tx + path_gain(m, band, loss_params),
                   m.mechanism, m.anchor_id, m) for m in mpcs]
    taps.sort(key=lambda t: (t.delay, int(t.mechanism.kind), t.mechanism.source_id))
    return taps


def synthesize_cir(mpcs: Sequence[Mpc], band: FrequencyBand, loss_params: LossParams,
                   rng: np.random.Generator) -> list[CirTap]:
    """One tap per MPC plus Poisson diffuse clutter trailing the earliest tap."""
    taps = specular_taps(mpcs, band, loss_params)
    d = loss_params.diffuse
    if taps and d.mean_count > 0:
        first = taps[0]
        count = int(rng.poisson(d.mean_count))
        excess = rng.exponential(d.mean_excess_delay_s, size=count)
        drop = rng.uniform(5.0, d.loss_spread_db, size=count)
        for e, l in zip(excess, drop):
            # strictly after the first tap even if the exponential draw is 0
            delay = first.delay + max(float(e), 1e-15)
            taps.append(CirTap(delay, first.power - float(l), Mechanism.diffuse(), first.anchor_id))
        taps.sort(key=lambda t: (t.delay, int(t.mechanism.kind), t.mechanism.source_id))
    return taps


def detectable(taps: Iterable[CirTap], loss_params: LossParams) -> list[CirTap]:
    level = loss_params.detection_level_db
    return [t for t in taps if t.power >= level]


def fap_tap(cir: Sequence[CirTap], loss_params: LossParams) -> CirTap:
    if not cir:
        raise ValueError("empty channel impulse response")
    hits = detectable(cir, loss_params)
    if not hits:
        raise NoDetectablePath("no tap above the detection threshold")
    return min(hits, key=lambda t: t.delay)


def tap_measurement(tap: CirTap, loss_params: LossParams,
                    rng: np.random.Generator | None = None) -> ToaMeasurement:
    sigma = loss_params.toa_sigma_m
    rng_range = SPEED_OF_LIGHT * tap.delay
    if sigma > 0 and rng is not None:
        rng_range += rng.normal(0.0, sigma)
    return ToaMeasurement(tap.anchor_id, max(rng_range, 1e-9), sigma, tap.mechanism,
                          edge_id=tap.mechanism.edge_id, power=tap.power)


def extract_fap(cir: Sequence[CirTap], loss_params: LossParams,
                rng: np.random.Generator | None = None) -> ToaMeasurement:
    """Range from the earliest tap clearing ``noise_floor_db + fap_threshold_db``.

    Raises:
        NoDetectablePath: nothing clears the threshold (coverage hole).
    """
    return tap_measurement(fap_tap(cir, loss_params), loss_params, rng)


def classify_los_nlos(measurement_power: float, decision_threshold: float) -> LosLabel:
    return LosLabel.LOS if measurement_power >= decision_threshold else LosLabel.NLOS


def calibrate_threshold(labeled_powers: Iterable[tuple[float, LosLabel | str]]) -> float:
    """Midpoint of the class means (equal-variance Gaussian likelihood ratio)."""
    los, nlos = [], []
    for power, label in labeled_powers:
        (los if LosLabel(label) is LosLabel.LOS else nlos).append(float(power))
    if not los or not nlos:
        raise InsufficientData("both LoS and NLoS samples are required")
    return 0.5 * (math.fsum(los) / len(los) + math.fsum(nlos) / len(nlos))


def oracle_los_label(mechanism: Mechanism) -> LosLabel:
    """LoS when the path carries no NLoS bias (straight path, possibly through walls)."""
    return LosLabel.LOS if mechanism.is_unbiased else LosLabel.NLOS
