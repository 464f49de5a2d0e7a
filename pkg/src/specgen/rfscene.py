"""Synthetic RF scenes rendered to labeled spectrogram datasets.

The simulation is a deliberate desk-scale caricature of a shared-band capture:
a complex-baseband slice (default 1 MHz over 16 ms) containing some mixture of

  - radar: rectangular-envelope pulse trains at a fixed pulse repetition
    interval, optionally chirped across the emitter bandwidth,
  - lte_like: a continuous band-limited block built from random-phase
    subcarriers (narrow bandwidth, always on),
  - fiveg_like: the same multicarrier construction but wider and gated by a
    slotted on/off duty pattern,

plus circular complex Gaussian noise. Scenes are rendered with a short-time
Fourier transform and log-power mapping into square single-channel images.

Five dataset classes: Noise, FiveG, LTE, FiveG+Radar, LTE+Radar (codes 0-4).
A second three-class "target" profile with shifted SNR and pulse parameters
stands in for separately collected lab captures in the transfer study.

Dataset layout on disk: ``images/<label>_<index>.png`` (8-bit grayscale) and
``manifest.csv`` with header ``file,label_code,label_name,seed,params_json``.
Generation is a pure function of (seed, config): every sample derives its own
stream from the dataset seed and its sample index, so parallel and serial
generation are identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import RngState
from .pngio import load_gray, save_gray, save_rgb


class SceneError(ValueError):
    """Invalid scene configuration or emitter placement."""


class ClassLabel(IntEnum):
    NOISE = 0
    FIVEG = 1
    LTE = 2
    FIVEG_PLUS_RADAR = 3
    LTE_PLUS_RADAR = 4

    @property
    def label_name(self) -> str:
        return _CLASS_NAMES[self]


_CLASS_NAMES = {
    ClassLabel.NOISE: "noise",
    ClassLabel.FIVEG: "fiveg",
    ClassLabel.LTE: "lte",
    ClassLabel.FIVEG_PLUS_RADAR: "fiveg_radar",
    ClassLabel.LTE_PLUS_RADAR: "lte_radar",
}


class TargetLabel(IntEnum):
    """Label space of the shifted target task (distinct from ClassLabel)."""

    RADAR = 0
    FIVEG = 1
    FIVEG_PLUS_RADAR = 2

    @property
    def label_name(self) -> str:
        return _TARGET_NAMES[self]


_TARGET_NAMES = {
    TargetLabel.RADAR: "radar",
    TargetLabel.FIVEG: "fiveg",
    TargetLabel.FIVEG_PLUS_RADAR: "fiveg_radar",
}


@dataclass
class SceneConfig:
    rng: RngState
    sample_rate: float = 1e6
    duration: float = 0.016
    band_span: float = 1e6
    noise_power: float = 1.0

    def __post_init__(self):
        n = self.duration * self.sample_rate
        if abs(n - round(n)) > 1e-6 or round(n) < 1:
            raise SceneError(
                f"duration * sample_rate must be a positive integer, got {n}"
            )
        if self.noise_power <= 0:
            raise SceneError(f"noise_power must be > 0, got {self.noise_power}")
        if self.band_span <= 0 or self.band_span > self.sample_rate:
            raise SceneError(
                f"band_span must be in (0, sample_rate], got {self.band_span}"
            )

    @property
    def num_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class EmitterSpec:
    kind: str  # "radar" | "lte_like" | "fiveg_like"
    center_offset: float  # Hz relative to band center
    bandwidth: float  # Hz (chirp span for radar, block width otherwise)
    power: float  # linear mean power while on
    # radar only
    pulse_width: float = 0.0
    pri: float = 0.0
    start_offset: float = 0.0
    # lte/5g only: on for burst_duty * burst_period out of every burst_period
    burst_period: float = 0.0
    burst_duty: float = 1.0
    burst_offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("radar", "lte_like", "fiveg_like"):
            raise SceneError(f"unknown emitter kind {self.kind!r}")
        if self.power <= 0:
            raise SceneError(f"emitter power must be > 0, got {self.power}")
        if self.bandwidth < 0:
            raise SceneError(f"bandwidth must be >= 0, got {self.bandwidth}")
        if self.kind == "radar":
            if not (0 < self.pulse_width < self.pri):
                raise SceneError(
                    f"radar needs 0 < pulse_width < pri, got "
                    f"pulse_width={self.pulse_width}, pri={self.pri}"
                )
        else:
            if not (0 < self.burst_duty <= 1.0):
                raise SceneError(f"burst_duty must be in (0, 1], got {self.burst_duty}")


def _check_in_band(emitter: EmitterSpec, band_span: float) -> None:
    half = band_span / 2.0
    lo = emitter.center_offset - emitter.bandwidth / 2.0
    hi = emitter.center_offset + emitter.bandwidth / 2.0
    if lo < -half or hi > half:
        raise SceneError(
            f"emitter band [{lo:.1f}, {hi:.1f}] Hz exceeds span [-{half:.1f}, {half:.1f}] Hz"
        )


def _radar_waveform(t: np.ndarray, e: EmitterSpec, rng: RngState) -> np.ndarray:
    tau = t - e.start_offset
    in_train = tau >= 0
    phase_in_pulse = np.mod(tau, e.pri)
    envelope = in_train & (phase_in_pulse < e.pulse_width)
    phi0 = 2.0 * math.pi * rng.uniform(())
    carrier = 2.0 * math.pi * e.center_offset * t + phi0
    if e.bandwidth > 0:
        # linear chirp across the bandwidth over each pulse
        tp = np.where(envelope, phase_in_pulse, 0.0)
        rate = e.bandwidth / e.pulse_width
        carrier = carrier + 2.0 * math.pi * (-0.5 * e.bandwidth * tp + 0.5 * rate * tp * tp)
    return math.sqrt(e.power) * envelope * np.exp(1j * carrier)


def _multicarrier_waveform(
    t: np.ndarray, e: EmitterSpec, rng: RngState, num_subcarriers: int = 32
) -> np.ndarray:
    k = num_subcarriers
    if k > 1:
        offsets = (np.arange(k) / (k - 1) - 0.5) * e.bandwidth
    else:
        offsets = np.zeros(1)
    phases = 2.0 * math.pi * rng.uniform((k,))
    amp = math.sqrt(e.power / k)
    wave = np.zeros(t.size, dtype=np.complex128)
    for fk, ph in zip(offsets, phases):
        wave += np.exp(1j * (2.0 * math.pi * (e.center_offset + fk) * t + ph))
    wave *= amp
    if e.burst_period > 0:
        gate = np.mod(t - e.burst_offset, e.burst_period) < e.burst_duty * e.burst_period
        wave = wave * gate
    return wave


def synth_iq(config: SceneConfig, emitters: list[EmitterSpec]) -> np.ndarray:
    """Complex baseband scene: emitter waveforms plus circular Gaussian noise.

    Draws come from substreams of ``config.rng`` (emitter i uses derive(100+i),
    noise uses derive(999)), so the result is a pure function of (seed, config,
    emitters) regardless of evaluation order.
    """
    for e in emitters:
        _check_in_band(e, config.band_span)
    n = config.num_samples
    t = np.arange(n) / config.sample_rate
    signal = np.zeros(n, dtype=np.complex128)
    for i, e in enumerate(emitters):
        sub = config.rng.derive(100 + i)
        if e.kind == "radar":
            signal += _radar_waveform(t, e, sub)
        else:
            signal += _multicarrier_waveform(t, e, sub)
    noise_rng = config.rng.derive(999)
    z = noise_rng.normal((2, n))
    signal += math.sqrt(config.noise_power / 2.0) * (z[0] + 1j * z[1])
    return signal


def stft(iq: np.ndarray, nfft: int, hop: int, window: str = "hann") -> np.ndarray:
    """Time x frequency power matrix: rows are frames, columns DFT bins.

    Bin k holds frequency k * fs / nfft in natural DFT order (DC at column 0,
    negative frequencies in the upper half); use ``center_spectrum`` to get a
    DC-centered layout for display. Frame count is floor((len-nfft)/hop) + 1.
    """
    iq = np.asarray(iq)
    if nfft < 1 or (nfft & (nfft - 1)) != 0:
        raise SceneError(f"nfft must be a power of two, got {nfft}")
    if not (1 <= hop <= nfft):
        raise SceneError(f"hop must be in [1, nfft], got {hop}")
    if iq.size < nfft:
        raise SceneError(f"signal length {iq.size} shorter than nfft {nfft}")
    if window == "hann":
        win = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(nfft) / nfft)
    elif window == "rectangular":
        win = np.ones(nfft)
    else:
        raise SceneError(f"unknown window {window!r}")
    frames = (iq.size - nfft) // hop + 1
    idx = np.arange(nfft)[None, :] + hop * np.arange(frames)[:, None]
    spectra = np.fft.fft(iq[idx] * win, axis=1)
    return np.abs(spectra) ** 2


def center_spectrum(power: np.ndarray) -> np.ndarray:
    """Reorder DFT bins so DC sits at column nfft // 2."""
    return np.fft.fftshift(power, axes=-1)


def _resize_area_1d(x: np.ndarray, m: int, axis: int) -> np.ndarray:
    """Exact area-average resampling along one axis."""
    n = x.shape[axis]
    edges = np.linspace(0.0, n, m + 1)
    weights = np.zeros((m, n))
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        j0, j1 = int(math.floor(lo)), int(math.ceil(hi))
        for j in range(j0, min(j1, n)):
            weights[i, j] = max(0.0, min(hi, j + 1) - max(lo, j))
    weights /= n / m
    moved = np.moveaxis(x, axis, 0)
    out = np.tensordot(weights, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def resize_area(image: np.ndarray, height: int, width: int) -> np.ndarray:
    out = _resize_area_1d(np.asarray(image, dtype=np.float64), height, axis=0)
    return _resize_area_1d(out, width, axis=1)


def render_image(power: np.ndarray, dyn_range_db: float, resolution: int = 32) -> np.ndarray:
    """Log-power image in [0, 1]: clip to the top dyn_range_db, map affinely.

    Orientation: rows are frequency (highest at the top after DC-centering),
    columns are time; the matrix is area-resampled to resolution x resolution.
    """
    if dyn_range_db <= 0:
        raise SceneError(f"dyn_range_db must be > 0, got {dyn_range_db}")
    power = np.asarray(power, dtype=np.float64)
    if not np.any(power > 0):
        raise SceneError("all-zero power matrix has no defined log image")
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    top = db.max()
    db = np.clip(db, top - dyn_range_db, top)
    img = (db - (top - dyn_range_db)) / dyn_range_db
    img = np.flipud(center_spectrum(img).T)  # (freq rows, time cols), high f up
    return np.clip(resize_area(img, resolution, resolution), 0.0, 1.0)


@dataclass
class SpectrogramSample:
    image: np.ndarray  # (H, W) in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)


# -- randomized scene profiles -------------------------------------------------

# Parameter ranges are uniform draws over [lo, hi]; SNR is dB above the scene
# noise power. The "source" profile feeds the five-class generation corpus;
# the "target" profile shifts SNR and pulse parameters to stand in for a
# separately collected lab dataset in the transfer study.
SOURCE_PROFILE = {
    "radar_snr_db": (15.0, 25.0),
    "radar_pulse_width": (0.15e-3, 0.4e-3),
    "radar_pri": (1.5e-3, 3.0e-3),
    "radar_bandwidth": (200e3, 450e3),
    "lte_snr_db": (10.0, 20.0),
    "lte_bandwidth": (80e3, 180e3),
    "fiveg_snr_db": (10.0, 20.0),
    "fiveg_bandwidth": (300e3, 500e3),
    "fiveg_period": (1.0e-3, 2.0e-3),
    "fiveg_duty": (0.4, 0.7),
}

TARGET_PROFILE = {
    "radar_snr_db": (6.0, 14.0),
    "radar_pulse_width": (0.3e-3, 0.8e-3),
    "radar_pri": (2.5e-3, 5.0e-3),
    "radar_bandwidth": (100e3, 300e3),
    "lte_snr_db": (5.0, 12.0),
    "lte_bandwidth": (60e3, 140e3),
    "fiveg_snr_db": (5.0, 12.0),
    "fiveg_bandwidth": (250e3, 600e3),
    "fiveg_period": (1.5e-3, 3.0e-3),
    "fiveg_duty": (0.3, 0.8),
}


def _udraw(rng: RngState, lo_hi) -> float:
    lo, hi = lo_hi
    return float(lo + (hi - lo) * rng.uniform(()))


def _draw_center(rng: RngState, bandwidth: float, band_span: float) -> float:
    margin = band_span / 2.0 - bandwidth / 2.0
    return float((2.0 * rng.uniform(()) - 1.0) * margin * 0.9)


def _draw_radar(rng: RngState, config: SceneConfig, profile: dict) -> EmitterSpec:
    bw = _udraw(rng, profile["radar_bandwidth"])
    pri = _udraw(rng, profile["radar_pri"])
    return EmitterSpec(
        kind="radar",
        center_offset=_draw_center(rng, bw, config.band_span),
        bandwidth=bw,
        power=config.noise_power * 10.0 ** (_udraw(rng, profile["radar_snr_db"]) / 10.0),
        pulse_width=_udraw(rng, profile["radar_pulse_width"]),
        pri=pri,
        start_offset=pri * rng.uniform(()),
    )


def _draw_lte(rng: RngState, config: SceneConfig, profile: dict) -> EmitterSpec:
    bw = _udraw(rng, profile["lte_bandwidth"])
    return EmitterSpec(
        kind="lte_like",
        center_offset=_draw_center(rng, bw, config.band_span),
        bandwidth=bw,
        power=config.noise_power * 10.0 ** (_udraw(rng, profile["lte_snr_db"]) / 10.0),
        burst_period=0.0,  # continuous
        burst_duty=1.0,
    )


def _draw_fiveg(rng: RngState, config: SceneConfig, profile: dict) -> EmitterSpec:
    bw = _udraw(rng, profile["fiveg_bandwidth"])
    period = _udraw(rng, profile["fiveg_period"])
    return EmitterSpec(
        kind="fiveg_like",
        center_offset=_draw_center(rng, bw, config.band_span),
        bandwidth=bw,
        power=config.noise_power * 10.0 ** (_udraw(rng, profile["fiveg_snr_db"]) / 10.0),
        burst_period=period,
        burst_duty=_udraw(rng, profile["fiveg_duty"]),
        burst_offset=period * rng.uniform(()),
    )


def _scene_emitters(label: int, rng: RngState, config: SceneConfig, profile: dict, target: bool):
    """Emitter list for one sample; composite classes overlap radar in time."""
    if target:
        kinds = {
            TargetLabel.RADAR: ["radar"],
            TargetLabel.FIVEG: ["fiveg"],
            TargetLabel.FIVEG_PLUS_RADAR: ["fiveg", "radar"],
        }[TargetLabel(label)]
    else:
        kinds = {
            ClassLabel.NOISE: [],
            ClassLabel.FIVEG: ["fiveg"],
            ClassLabel.LTE: ["lte"],
            ClassLabel.FIVEG_PLUS_RADAR: ["fiveg", "radar"],
            ClassLabel.LTE_PLUS_RADAR: ["lte", "radar"],
        }[ClassLabel(label)]
    draw = {"radar": _draw_radar, "lte": _draw_lte, "fiveg": _draw_fiveg}
    return [draw[k](rng.derive(j), config, profile) for j, k in enumerate(kinds)]


def _emitter_params(e: EmitterSpec) -> dict:
    d = {"kind": e.kind, "center_offset": e.center_offset, "bandwidth": e.bandwidth, "power": e.power}
    if e.kind == "radar":
        d.update(pulse_width=e.pulse_width, pri=e.pri, start_offset=e.start_offset)
    else:
        d.update(burst_period=e.burst_period, burst_duty=e.burst_duty, burst_offset=e.burst_offset)
    return d


MANIFEST_HEADER = ["file", "label_code", "label_name", "seed", "params_json"]


@dataclass
class ManifestRow:
    file: str
    label_code: int
    label_name: str
    seed: int
    params_json: str


def _generate(
    labels: list[int],
    label_names: dict,
    per_class_count: int,
    config: SceneConfig,
    out_dir,
    resolution: int,
    nfft: int,
    hop: int,
    window: str,
    dyn_range_db: float,
    profile: dict,
    target: bool,
    rgb: bool,
) -> list[ManifestRow]:
    if per_class_count < 1:
        raise SceneError(f"per_class_count must be >= 1, got {per_class_count}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SceneError(f"cannot create output directory {out_dir}: {exc}") from exc
    rows: list[ManifestRow] = []
    sample_index = 0
    for label in labels:
        for i in range(per_class_count):
            rng = config.rng.derive(sample_index)
            scene_cfg = SceneConfig(
                rng=rng,
                sample_rate=config.sample_rate,
                duration=config.duration,
                band_span=config.band_span,
                noise_power=config.noise_power,
            )
            emitters = _scene_emitters(label, rng.derive(1), scene_cfg, profile, target)
            iq = synth_iq(scene_cfg, emitters)
            image = render_image(stft(iq, nfft, hop, window), dyn_range_db, resolution)
            name = f"images/{label_names[label]}_{i:04d}.png"
            save = save_rgb if rgb else save_gray
            save(image, out_dir / name)
            params = {
                "noise_power": scene_cfg.noise_power,
                "emitters": [_emitter_params(e) for e in emitters],
            }
            rows.append(
                ManifestRow(
                    file=name,
                    label_code=int(label),
                    label_name=label_names[label],
                    seed=rng.seed,
                    params_json=json.dumps(params, sort_keys=True),
                )
            )
            sample_index += 1
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.file, r.label_code, r.label_name, r.seed, r.params_json])
    return rows


def generate_dataset(
    per_class_count: int,
    config: SceneConfig,
    out_dir,
    resolution: int = 32,
    nfft: int = 64,
    hop: int = 64,
    window: str = "hann",
    dyn_range_db: float = 50.0,
    rgb: bool = False,
) -> list[ManifestRow]:
    """Write the five-class labeled dataset plus manifest under ``out_dir``."""
    return _generate(
        [int(c) for c in ClassLabel],
        {int(c): c.label_name for c in ClassLabel},
        per_class_count,
        config,
        out_dir,
        resolution,
        nfft,
        hop,
        window,
        dyn_range_db,
        SOURCE_PROFILE,
        target=False,
        rgb=rgb,
    )


def generate_target_dataset(
    per_class_count: int,
    config: SceneConfig,
    out_dir,
    resolution: int = 32,
    nfft: int = 64,
    hop: int = 64,
    window: str = "hann",
    dyn_range_db: float = 50.0,
    rgb: bool = False,
) -> list[ManifestRow]:
    """Write the shifted three-class target-task dataset (Radar/5G/5G+Radar)."""
    return _generate(
        [int(c) for c in TargetLabel],
        {int(c): c.label_name for c in TargetLabel},
        per_class_count,
        config,
        out_dir,
        resolution,
        nfft,
        hop,
        window,
        dyn_range_db,
        TARGET_PROFILE,
        target=True,
        rgb=rgb,
    )


def read_manifest(dataset_dir) -> list[ManifestRow]:
    path = Path(dataset_dir) / "manifest.csv"
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise SceneError(f"unexpected manifest header {reader.fieldnames} in {path}")
        for rec in reader:
            rows.append(
                ManifestRow(
                    file=rec["file"],
                    label_code=int(rec["label_code"]),
                    label_name=rec["label_name"],
                    seed=int(rec["seed"]),
                    params_json=rec["params_json"],
                )
            )
    return rows


def load_dataset(dataset_dir, dtype=np.float32):
    """Read a generated dataset: (images (N,1,H,W) in [0,1], labels (N,), rows)."""
    dataset_dir = Path(dataset_dir)
    rows = read_manifest(dataset_dir)
    images = np.stack([load_gray(dataset_dir / r.file) for r in rows]).astype(dtype)
    labels = np.array([r.label_code for r in rows], dtype=np.int64)
    return images[:, None, :, :], labels, rows
