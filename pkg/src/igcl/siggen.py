"""Synthetic multi-station seismic recordings and their spectrogram segments.

Every event is generated once as a source waveform and then observed by all
(station, channel) streams through a station-specific transfer: gain, a
first-order spectral tilt, a small propagation delay and an independent noise
floor.  The same event therefore shows up as several different "views".
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps

from .exceptions import ConfigurationError

CLASS_NAMES = ("earthquake", "slope_failure", "noise")
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def station_name(station: int) -> str:
    return f"ILL{station + 1:02d}"


@dataclass(frozen=True, order=True)
class StreamId:
    station: int
    channel: int


@dataclass(frozen=True)
class Event:
    start: float
    end: float
    label: int

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class StationTransfer:
    """How one station distorts every event it records."""

    gain: float = 1.0
    tilt: float = 0.0
    delay_ms: float = 0.0
    noise_floor: float = 1.0


@dataclass
class RawStream:
    id: StreamId
    sample_rate: float
    samples: np.ndarray
    event_log: list[Event]
    n_classes: int = 3

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def noise_class(self) -> int:
        return self.n_classes - 1


@dataclass
class Segment:
    seg_id: int
    stream: StreamId
    t_start: float
    t_end: float
    samples: np.ndarray
    label: int | None = None
    # index into the stream's event_log of the event this window belongs to
    owner: int | None = None


@dataclass(frozen=True)
class SegmenterConfig:
    T_w: float = 30.0
    T_h: float = 30.0

    def __post_init__(self):
        if not (self.T_w > 0 and self.T_h > 0):
            raise ConfigurationError(f"T_w and T_h must be positive, got {self.T_w}, {self.T_h}")


@dataclass
class SpectrogramFeature:
    values: np.ndarray

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class SynthConfig:
    """Recipe for a synthetic deployment.

    ``events_per_class`` counts logged intervals of every class, including
    quiet intervals of the noise class (the last class index).  The timeline
    is a sequence of ``slot_s``-long slots with one logged interval each.
    ``divergence`` scales how far station transfers spread apart; it may be
    a single value or one value per station.  ``transfers`` overrides the
    drawn transfers entirely.
    """

    n_stations: int = 8
    n_channels: int = 3
    n_classes: int = 3
    events_per_class: int = 20
    event_duration: tuple[float, float] = (16.0, 30.0)
    slot_s: float = 40.0
    sample_rate: float = 100.0
    amplitude: tuple[float, float] = (3.0, 12.0)
    divergence: float | list[float] = 1.0
    max_gain_db: float = 12.0
    max_tilt: float = 1.5
    max_delay_ms: float = 40.0
    transfers: list[StationTransfer] | None = None
    seed: int = 0

    def __post_init__(self):
        self.event_duration = tuple(self.event_duration)
        self.amplitude = tuple(self.amplitude)
        if self.transfers is not None:
            self.transfers = [
                t if isinstance(t, StationTransfer) else StationTransfer(**t) for t in self.transfers
            ]

    def validate(self) -> None:
        if self.n_stations < 1 or self.n_channels < 1:
            raise ConfigurationError("need at least one station and one channel")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.events_per_class < 0:
            raise ConfigurationError("events_per_class must be >= 0")
        lo, hi = self.event_duration
        if not (0 < lo <= hi):
            raise ConfigurationError(f"bad event_duration range {self.event_duration}")
        if hi >= self.slot_s:
            raise ConfigurationError("events must be shorter than slot_s")
        if self.sample_rate <= 0 or self.slot_s <= 0:
            raise ConfigurationError("sample_rate and slot_s must be positive")
        if self.amplitude[0] <= 0 or self.amplitude[1] < self.amplitude[0]:
            raise ConfigurationError(f"bad amplitude range {self.amplitude}")
        if isinstance(self.divergence, (list, tuple)) and len(self.divergence) != self.n_stations:
            raise ConfigurationError("divergence list must have one entry per station")
        if self.transfers is not None and len(self.transfers) != self.n_stations:
            raise ConfigurationError("transfers must have one entry per station")

    @property
    def duration(self) -> float:
        return max(self.events_per_class * self.n_classes, 1) * self.slot_s

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


def load_synth_config(path: str | Path) -> SynthConfig:
    """Read a SynthConfig from a JSON file (keys as in ``SynthConfig``).

    A top-level ``"synth"`` object is accepted so one file can hold the
    whole experiment configuration.
    """
    d = json.loads(Path(path).read_text())
    if "synth" in d:
        d = d["synth"]
    return SynthConfig.from_dict(d)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def station_transfers(cfg: SynthConfig) -> list[StationTransfer]:
    if cfg.transfers is not None:
        return list(cfg.transfers)
    n = cfg.n_stations
    div = np.broadcast_to(np.asarray(cfg.divergence, dtype=float), (n,))
    rng = np.random.default_rng([cfg.seed, 7001])
    # evenly spread then shuffled, so every station differs from every other
    spread = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
    gain_db = rng.permutation(spread) * cfg.max_gain_db * div
    tilt = rng.permutation(spread) * cfg.max_tilt * div
    floor_exp = rng.uniform(-0.3, 0.3, n) * div
    delay = rng.uniform(0.0, cfg.max_delay_ms, n)
    return [
        StationTransfer(
            gain=float(10 ** (gain_db[k] / 20)),
            tilt=float(tilt[k]),
            delay_ms=float(delay[k]),
            noise_floor=float(10 ** floor_exp[k]),
        )
        for k in range(n)
    ]


def _bandlimited(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    X = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    X[(f < lo) | (f > hi)] = 0.0
    y = np.fft.irfft(X, n)
    return y / (y.std() + 1e-12)


def _earthquake(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    # impulsive primary arrival, stronger secondary arrival, exponential coda
    t = np.arange(n) / fs
    dur = n / fs
    t_s = rng.uniform(0.12, 0.3) * dur
    decay = (dur - t_s) / 4.0
    env = 0.35 * np.exp(-t / decay) + np.where(t >= t_s, np.exp(-np.clip(t - t_s, 0, None) / decay), 0.0)
    return env * _bandlimited(rng, n, fs, rng.uniform(1.0, 3.0), rng.uniform(8.0, 12.0))


def _slope_failure(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    # emergent spindle: slow build-up, then a tail, with boulder-impact bursts
    t = np.arange(n) / fs
    dur = n / fs
    peak = rng.uniform(0.45, 0.7) * dur
    env = np.where(t < peak, (t / peak) ** 2, np.cos(0.5 * np.pi * (t - peak) / (dur - peak)) ** 2)
    n_hits = rng.integers(3, 9)
    for t_hit in rng.uniform(0.2 * dur, 0.9 * dur, n_hits):
        env = env + 0.6 * np.exp(-np.abs(t - t_hit) / 0.3)
    return env * _bandlimited(rng, n, fs, rng.uniform(8.0, 12.0), rng.uniform(25.0, 35.0))


def _source_waveform(rng: np.random.Generator, label: int, n: int, fs: float, n_classes: int) -> np.ndarray:
    if label == n_classes - 1:
        return np.zeros(n)
    if label % 2 == 0:
        base = _earthquake(rng, n, fs)
    else:
        base = _slope_failure(rng, n, fs)
    # classes beyond the two base shapes shift frequency content for distinguishability
    extra = label // 2
    if extra:
        base = base * np.cos(2 * np.pi * 3.0 * extra * np.arange(n) / fs)
    return base / (np.abs(base).max() + 1e-12)


def event_schedule(cfg: SynthConfig) -> list[Event]:
    rng = np.random.default_rng([cfg.seed, 7002])
    labels = np.repeat(np.arange(cfg.n_classes), cfg.events_per_class)
    labels = rng.permutation(labels)
    events = []
    lo, hi = cfg.event_duration
    for slot, label in enumerate(labels):
        dur = rng.uniform(lo, hi)
        # keep a small margin to the slot borders
        margin = min(2.0, (cfg.slot_s - dur) / 2)
        onset = rng.uniform(margin, cfg.slot_s - dur - margin)
        start = slot * cfg.slot_s + onset
        events.append(Event(float(start), float(start + dur), int(label)))
    return events


def _tilt_filter(x: np.ndarray, fs: float, tilt: float) -> np.ndarray:
    if tilt == 0.0:
        return x
    X = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / fs)
    X *= (np.maximum(f, 0.5) / 10.0) ** tilt
    return np.fft.irfft(X, len(x))


def _colored_noise(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    X = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    X *= 1.0 / np.sqrt(np.maximum(f, 0.5))
    y = np.fft.irfft(X, n)
    return y / (y.std() + 1e-12)


def synth_dataset(cfg: SynthConfig) -> list[RawStream]:
    """Generate one RawStream per (station, channel), ordered station-major."""
    cfg.validate()
    fs = cfg.sample_rate
    n = int(round(cfg.duration * fs))
    events = event_schedule(cfg)

    source = np.zeros(n)
    amp_rng = np.random.default_rng([cfg.seed, 7003])
    lo_a, hi_a = cfg.amplitude
    for k, ev in enumerate(events):
        i0 = int(round(ev.start * fs))
        i1 = min(int(round(ev.end * fs)), n)
        rng = np.random.default_rng([cfg.seed, 7004, k])
        amp = math.exp(amp_rng.uniform(math.log(lo_a), math.log(hi_a)))
        source[i0:i1] += amp * _source_waveform(rng, ev.label, i1 - i0, fs, cfg.n_classes)

    transfers = station_transfers(cfg)
    streams = []
    for st in range(cfg.n_stations):
        tr = transfers[st]
        shift = int(round(tr.delay_ms * 1e-3 * fs))
        delayed = np.concatenate([np.zeros(shift), source[: n - shift]]) if shift else source
        view = _tilt_filter(delayed, fs, tr.tilt)
        for ch in range(cfg.n_channels):
            rng = np.random.default_rng([cfg.seed, 7005, st, ch])
            channel_gain = rng.uniform(0.6, 1.0)
            x = tr.gain * (channel_gain * view + tr.noise_floor * _colored_noise(rng, n, fs))
            streams.append(
                RawStream(StreamId(st, ch), fs, x.astype(np.float32), list(events), cfg.n_classes)
            )
    return streams


# --------------------------------------------------------------------------
# segmentation and features
# --------------------------------------------------------------------------


def _overlap(a0: float, a1: float, b0: float, b1: float) -> float:
    return max(0.0, min(a1, b1) - max(a0, b0))


def window_label(event_log: Sequence[Event], t0: float, t1: float, noise_class: int) -> int:
    """Class of the window [t0, t1).

    A window takes an event's class when it covers at least half of the event
    or the event fills at least half of the window; ties go to the larger
    overlap.  Anything else is noise.
    """
    best, best_ov = noise_class, 0.0
    for ev in event_log:
        ov = _overlap(t0, t1, ev.start, ev.end)
        if ov <= 0:
            continue
        if (ov >= 0.5 * ev.duration or ov >= 0.5 * (t1 - t0)) and ov > best_ov:
            best, best_ov = ev.label, ov
    return best


def window_owner(event_log: Sequence[Event], t0: float, t1: float) -> int | None:
    if not event_log:
        return None
    ovs = [_overlap(t0, t1, ev.start, ev.end) for ev in event_log]
    k = int(np.argmax(ovs))
    if ovs[k] > 0:
        return k
    mid = 0.5 * (t0 + t1)
    return int(np.argmin([abs(0.5 * (ev.start + ev.end) - mid) for ev in event_log]))


def segment_stream(stream: RawStream, cfg: SegmenterConfig, *, id_start: int = 0) -> list[Segment]:
    fs = stream.sample_rate
    win = int(round(cfg.T_w * fs))
    hop = cfg.T_h
    duration = stream.duration
    segments = []
    k = 0
    while k * hop + cfg.T_w <= duration + 1e-9:
        t0 = k * hop
        i0 = int(round(t0 * fs))
        segments.append(
            Segment(
                seg_id=id_start + k,
                stream=stream.id,
                t_start=t0,
                t_end=t0 + cfg.T_w,
                samples=stream.samples[i0 : i0 + win],
                label=window_label(stream.event_log, t0, t0 + cfg.T_w, stream.noise_class),
                owner=window_owner(stream.event_log, t0, t0 + cfg.T_w),
            )
        )
        k += 1
    return segments


def segment_streams(streams: Iterable[RawStream], cfg: SegmenterConfig, *, id_start: int = 0) -> list[Segment]:
    """Segment several streams with dataset-global, increasing seg_ids."""
    out: list[Segment] = []
    next_id = id_start
    for s in streams:
        segs = segment_stream(s, cfg, id_start=next_id)
        next_id += len(segs)
        out.extend(segs)
    return out


def detrend_linear(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("detrend_linear needs a 1-d sequence of length >= 2")
    return sps.detrend(x, type="linear")


LOG_EPS = 1e-8


def log_spectrogram(seg, win_s: float = 2.56, hop_s: float = 0.08, sample_rate: float = 100.0) -> SpectrogramFeature:
    """Hann-windowed magnitude STFT, log(m + 1e-8), no padding.

    ``seg`` is a Segment or a plain sample array; callers detrend first.
    """
    x = np.asarray(seg.samples if isinstance(seg, Segment) else seg, dtype=float)
    win = int(round(win_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if win > len(x):
        raise ValueError(f"window of {win} samples exceeds segment length {len(x)}")
    if hop < 1:
        raise ValueError("hop must be at least one sample")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    taper = sps.get_window("hann", win)
    mag = np.abs(np.fft.rfft(frames * taper, axis=1)).T
    return SpectrogramFeature(np.log(mag + LOG_EPS))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def _stream_file(sid: StreamId) -> str:
    return f"{station_name(sid.station)}_c{sid.channel}.f32"


def save_dataset(streams: Sequence[RawStream], path: str | Path, config: SynthConfig | None = None) -> Path:
    """Write ``manifest.json`` plus one little-endian float32 file per stream."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not streams:
        raise ValueError("nothing to save")
    manifest = {
        "format": FORMAT_VERSION,
        "config": config.to_dict() if config is not None else None,
        "n_classes": streams[0].n_classes,
        "event_log": [[e.start, e.end, e.label] for e in streams[0].event_log],
        "streams": [],
    }
    for s in streams:
        fname = _stream_file(s.id)
        np.asarray(s.samples, dtype="<f4").tofile(path / fname)
        manifest["streams"].append(
            {
                "station": s.id.station,
                "channel": s.id.channel,
                "file": fname,
                "sample_rate": s.sample_rate,
                "n_samples": int(len(s.samples)),
            }
        )
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path: str | Path) -> tuple[list[RawStream], SynthConfig | None]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_NAME).read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported dataset format {manifest.get('format')!r}")
    events = [Event(float(a), float(b), int(c)) for a, b, c in manifest["event_log"]]
    streams = []
    for entry in manifest["streams"]:
        samples = np.fromfile(path / entry["file"], dtype="<f4").astype(np.float32)
        if len(samples) != entry["n_samples"]:
            raise ConfigurationError(f"{entry['file']}: expected {entry['n_samples']} samples, got {len(samples)}")
        streams.append(
            RawStream(
                StreamId(entry["station"], entry["channel"]),
                float(entry["sample_rate"]),
                samples,
                list(events),
                int(manifest["n_classes"]),
            )
        )
    cfg = SynthConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return streams, cfg
