"""Audio clips: WAV I/O, windowed-sinc resampling, synthetic instruments, manifests."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .autodiff.checkpoint import atomic_write

AUDIO_EXTENSIONS = (".wav",)
RESAMPLE_TAPS = 64
KAISER_BETA = 8.6
SYNTH_PEAK = 0.9
DESK_RATE = 8000


class AudioError(ValueError):
    """Raised for unreadable, empty or malformed audio and datasets."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: str | None = None
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError("clip samples must be a non-empty 1-D array")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self):
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


# ----------------------------------------------------------------------- I/O

def _to_float(data):
    kind, bits = data.dtype.kind, data.dtype.itemsize * 8
    if kind == "f":
        return data.astype(np.float64)
    if kind == "u" and bits == 8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if kind == "i" and bits in (16, 32):
        # scipy left-justifies 24-bit PCM into int32, so 2**31 covers both
        return data.astype(np.float64) / float(2 ** (bits - 1))
    raise AudioError(f"unsupported sample encoding {data.dtype}")


def load_wav(path, label=None):
    """Read a PCM (8/16/24/32-bit) or float32 WAV as a mono clip in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        raise AudioError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"{path} has an empty payload")
    samples = _to_float(data)
    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise AudioError(f"{path}: {samples.shape[1]} channels, expected 1 or 2")
        samples = samples.mean(axis=1)
    return AudioClip(np.clip(samples, -1.0, 1.0), rate, label, str(path))


def write_wav(path, clip):
    """Write a clip as 16-bit little-endian PCM."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".tmp-{path.name}")
    wavfile.write(tmp, clip.sample_rate, pcm)
    os.replace(tmp, path)


# ---------------------------------------------------------------- resampling

def resample(clip, target_rate):
    """Band-limited resampling with a 64-tap Kaiser-windowed sinc kernel.

    Output length is ``round(len * target / source)``. When downsampling the
    sinc cutoff drops to the target Nyquist.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    src = clip.sample_rate
    if target_rate == src:
        return AudioClip(clip.samples.copy(), src, clip.label, clip.source_id)
    x = clip.samples
    n_out = int(round(x.size * target_rate / src))
    cutoff = min(1.0, target_rate / src)
    pos = np.arange(n_out) * (src / target_rate)
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-RESAMPLE_TAPS // 2 + 1, RESAMPLE_TAPS // 2 + 1)
    idx = base[:, None] + offsets[None, :]
    dist = pos[:, None] - idx
    half = RESAMPLE_TAPS / 2
    ratio = np.clip(dist / half, -1.0, 1.0)
    win = np.i0(KAISER_BETA * np.sqrt(1.0 - ratio * ratio)) / np.i0(KAISER_BETA)
    kernel = cutoff * np.sinc(cutoff * dist) * win
    valid = (idx >= 0) & (idx < x.size)
    taps = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0.0)
    y = np.einsum("ij,ij->i", taps, kernel)
    return AudioClip(np.clip(y, -1.0, 1.0), target_rate, clip.label, clip.source_id)


# ----------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthClassSpec:
    fundamental_hz: float
    harmonic_amplitudes: tuple
    envelope: tuple = (0.01, 0.1, 0.8, 0.1)  # attack_s, decay_s, sustain_level, release_s
    vibrato: tuple = (0.0, 0.0)  # rate_hz, depth_cents
    noise_floor: float = 0.0
    note_range_semitones: float = 6.0
    noise_highpass_hz: float = 0.0  # 0: white noise

    def validate(self, duration_s=None):
        if self.fundamental_hz <= 0:
            raise AudioError("fundamental must be positive")
        attack, decay, sustain, release = self.envelope
        if min(attack, decay, release) < 0:
            raise AudioError("envelope segments must be non-negative")
        if not 0 <= sustain <= 1:
            raise AudioError("sustain level must lie in [0, 1]")
        if duration_s is not None and attack + decay + release > duration_s:
            raise AudioError("envelope segments exceed clip duration")
        if self.noise_floor < 0:
            raise AudioError("noise floor must be non-negative")
        if self.noise_highpass_hz < 0:
            raise AudioError("noise high-pass corner must be non-negative")


def adsr(n, rate, envelope):
    attack, decay, sustain, release = envelope
    t = np.arange(n) / rate
    dur = n / rate
    env = np.full(n, float(sustain))
    if attack > 0:
        m = t < attack
        env[m] = t[m] / attack
    if decay > 0:
        m = (t >= attack) & (t < attack + decay)
        env[m] = 1.0 - (1.0 - sustain) * (t[m] - attack) / decay
    start = dur - release
    if release > 0:
        m = t >= start
        env[m] *= np.clip((dur - t[m]) / release, 0.0, 1.0)
    return env


def synth_instrument(spec, note_hz, duration_s, rate, seed):
    """Additive harmonic tone with ADSR envelope, vibrato and uniform noise.

    Peak-normalized to 0.9. Deterministic in ``seed``.
    """
    if duration_s <= 0:
        raise AudioError("duration must be positive")
    spec.validate(duration_s)
    rate = int(rate)
    amps = np.asarray(spec.harmonic_amplitudes, dtype=np.float64)
    vib_rate, vib_cents = spec.vibrato
    peak_ratio = 2.0 ** (abs(vib_cents) / 1200.0)
    for k, a in enumerate(amps, start=1):
        if a != 0 and k * note_hz * peak_ratio >= rate / 2:
            raise AudioError(f"harmonic {k} of {note_hz:.1f} Hz aliases at {rate} Hz")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    vib_phase = rng.uniform(0, 2 * np.pi)
    inst = note_hz * 2.0 ** (vib_cents / 1200.0 * np.sin(2 * np.pi * vib_rate * t + vib_phase))
    phase = 2 * np.pi * np.concatenate(([0.0], np.cumsum(inst[:-1]))) / rate
    tone = np.zeros(n)
    for k, a in enumerate(amps, start=1):
        if a:
            tone += a * np.sin(k * phase)
    tone *= adsr(n, rate, spec.envelope)
    if spec.noise_floor:
        noise = rng.uniform(-spec.noise_floor, spec.noise_floor, n)
        if spec.noise_highpass_hz:
            if spec.noise_highpass_hz >= rate / 2:
                raise AudioError(f"noise high-pass at {spec.noise_highpass_hz} Hz is above Nyquist")
            sos = signal.butter(4, spec.noise_highpass_hz, "highpass", fs=rate, output="sos")
            noise = signal.sosfilt(sos, noise)
        tone += noise
    peak = np.max(np.abs(tone))
    if peak > 0:
        tone *= SYNTH_PEAK / peak
    return AudioClip(tone, rate)


# Eight classes from three binary timbre factors: envelope (percussive or
# sustained), harmonic series (full or odd-only) and breath noise (clean or
# breathy). All share one register, so pitch carries no class information.
# Breath noise sits above the harmonic region, clean clips keep a faint white floor.
_FULL = (1.0, 0.8, 0.65, 0.5, 0.4, 0.3, 0.25, 0.2)
_ODD = (1.0, 0.0, 0.6, 0.0, 0.4, 0.0, 0.25, 0.0)
_PERC = (0.003, 0.5, 0.0, 0.05)
_SUST = (0.06, 0.1, 0.85, 0.1)
_CLEAN, _BREATHY = 0.001, 0.04
_BREATH_HZ = 2000.0
_VIBRATO = (5.5, 12.0)  # shared by every class, so it carries no label
PRESETS = {
    "plucked": SynthClassSpec(220.0, _FULL, _PERC, _VIBRATO, _CLEAN),
    "struck": SynthClassSpec(220.0, _FULL, _PERC, _VIBRATO, _BREATHY, noise_highpass_hz=_BREATH_HZ),
    "mallet": SynthClassSpec(220.0, _ODD, _PERC, _VIBRATO, _CLEAN),
    "kalimba": SynthClassSpec(220.0, _ODD, _PERC, _VIBRATO, _BREATHY, noise_highpass_hz=_BREATH_HZ),
    "bowed": SynthClassSpec(220.0, _FULL, _SUST, _VIBRATO, _CLEAN),
    "reedy": SynthClassSpec(220.0, _FULL, _SUST, _VIBRATO, _BREATHY, noise_highpass_hz=_BREATH_HZ),
    "clarinetish": SynthClassSpec(220.0, _ODD, _SUST, _VIBRATO, _CLEAN),
    "flutey": SynthClassSpec(220.0, _ODD, _SUST, _VIBRATO, _BREATHY, noise_highpass_hz=_BREATH_HZ),
}


def preset_note(spec, rng):
    """Note frequency drawn uniformly in pitch within the preset's range."""
    semis = rng.uniform(-spec.note_range_semitones, spec.note_range_semitones)
    return spec.fundamental_hz * 2.0 ** (semis / 12.0)


def vary_spec(spec, rng, jitter=0.25):
    """Per-performance variant of a preset: envelope times, harmonic weights and noise scaled by up to ``jitter``."""
    attack, decay, sustain, release = spec.envelope
    scale = lambda: 1.0 + rng.uniform(-jitter, jitter)
    amps = tuple(a * scale() for a in spec.harmonic_amplitudes)
    envelope = (attack * scale(), decay * scale(), min(1.0, sustain * scale()), release * scale())
    vib_rate, vib_depth = spec.vibrato
    return replace(
        spec,
        harmonic_amplitudes=amps,
        envelope=envelope,
        vibrato=(vib_rate * scale(), vib_depth * scale()),
        noise_floor=spec.noise_floor * 2.0 ** rng.uniform(-1, 1),
    )


def performance(spec, duration_s, rate, rng, max_delay_s=0.35):
    """One varied note of a preset, starting after a random silent lead-in."""
    variant = vary_spec(spec, rng)
    note = preset_note(spec, rng)
    # band-limit: drop harmonics the vibrato would push past Nyquist
    ceiling = rate / 2 / 2.0 ** (abs(variant.vibrato[1]) / 1200.0)
    amps = tuple(a if k * note < 0.98 * ceiling else 0.0 for k, a in enumerate(variant.harmonic_amplitudes, 1))
    variant = replace(variant, harmonic_amplitudes=amps)
    delay = int(round(rng.uniform(0, max_delay_s) * rate))
    n = int(round(duration_s * rate))
    body_s = (n - delay) / rate
    attack, decay, sustain, release = variant.envelope
    used = attack + decay + release
    if used > body_s:
        f = body_s / used * (1 - 1e-9)
        variant = replace(variant, envelope=(attack * f, decay * f, sustain, release * f))
    body = synth_instrument(variant, note, body_s, rate, int(rng.integers(0, 2 ** 31)))
    samples = np.concatenate([np.zeros(delay), body.samples])
    return AudioClip(samples, rate)


def synth_corpus(out_dir, clips_per_class, seed, rate=DESK_RATE, duration_s=1.0, presets=None):
    """Write ``<out>/<class>/<i>.wav`` for every preset; returns the file list."""
    presets = PRESETS if presets is None else presets
    out_dir = Path(out_dir)
    written = []
    for c, name in enumerate(sorted(presets)):
        rng = np.random.default_rng([seed, c])
        for i in range(clips_per_class):
            clip = performance(presets[name], duration_s, rate, rng)
            path = out_dir / name / f"{i:04d}.wav"
            write_wav(path, clip)
            written.append(path)
    return written


# ----------------------------------------------------------------- manifests

@dataclass
class DatasetManifest:
    classes: list
    entries: dict
    per_class_quota: int
    root: str = ""
    labels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise AudioError("class names must be unique")
        seen = set()
        for c in self.classes:
            files = self.entries[c]
            if len(files) != self.per_class_quota:
                raise AudioError(f"class {c!r} has {len(files)} entries, quota {self.per_class_quota}")
            for f in files:
                if f in seen:
                    raise AudioError(f"duplicate path {f}")
                seen.add(f)
                self.labels[f] = c

    def class_index(self, name):
        return self.classes.index(name)

    def label_of(self, path):
        return self.labels[path]

    def all_paths(self):
        return [p for c in self.classes for p in self.entries[c]]

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def to_json(self):
        return json.dumps(
            {"classes": self.classes, "quota": self.per_class_quota, "entries": self.entries},
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(list(d["classes"]), {k: list(v) for k, v in d["entries"].items()}, int(d["quota"]))

    def save(self, path):
        atomic_write(path, self.to_json(), mode="w")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def build_manifest(root_dir, per_class_quota):
    """Lexicographically pick ``per_class_quota`` files from each class directory."""
    root = Path(root_dir)
    if not root.is_dir():
        raise AudioError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise AudioError(f"dataset root {root} has no class directories")
    entries = {}
    for d in class_dirs:
        files = sorted(
            str(f) for f in d.iterdir() if f.is_file() and f.suffix.lower() in AUDIO_EXTENSIONS
        )
        if len(files) < per_class_quota:
            raise AudioError(
                f"class {d.name!r} has {len(files)} audio files, fewer than the quota {per_class_quota}"
            )
        entries[d.name] = files[:per_class_quota]
    return DatasetManifest([d.name for d in class_dirs], entries, per_class_quota, str(root))
