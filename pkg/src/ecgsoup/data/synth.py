"""Synthetic 12-lead ECG from sum-of-Gaussians beat templates.

Each beat is five Gaussian waves (P, Q, R, S, T). Every wave carries a 3D
cardiac dipole direction; a lead sees the wave scaled by the projection of
that direction onto the lead axis, so the twelve leads are correlated views
of one source. Classes differ by heart-rate range (and optionally template
amplitudes); disjoint rate ranges make the classes separable by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..errors import ConfigError
from .preprocess import TARGET_LENGTH, TARGET_RATE, preprocess
from .records import EcgRecord, write_dataset

# lead axes: limb leads in the frontal plane (x left, y inferior), chest leads
# in the horizontal plane (x left, z anterior)
_LIMB_ANGLES = {"I": 0.0, "II": 60.0, "III": 120.0, "AVR": -150.0, "AVL": -30.0, "AVF": 90.0}
_CHEST_ANGLES = {"V1": 115.0, "V2": 95.0, "V3": 75.0, "V4": 55.0, "V5": 30.0, "V6": 0.0}


def lead_axes() -> np.ndarray:
    axes = []
    for angle in _LIMB_ANGLES.values():
        a = np.deg2rad(angle)
        axes.append([np.cos(a), np.sin(a), 0.0])
    for angle in _CHEST_ANGLES.values():
        a = np.deg2rad(angle)
        axes.append([np.cos(a), 0.0, np.sin(a)])
    return np.array(axes)


@dataclass
class Wave:
    amplitude: float
    width: float  # seconds (Gaussian sigma)
    offset: float  # seconds relative to the R peak
    direction: tuple = (0.5, 0.85, -0.2)


def _default_waves():
    return {
        "P": Wave(0.20, 0.060, -0.20, (0.55, 0.80, 0.25)),
        "Q": Wave(-0.15, 0.035, -0.04, (-0.30, 0.20, -0.90)),
        "R": Wave(1.10, 0.045, 0.0, (0.50, 0.80, -0.35)),
        "S": Wave(-0.30, 0.040, 0.045, (-0.40, -0.30, 0.85)),
        "T": Wave(0.40, 0.110, 0.30, (0.55, 0.65, 0.50)),
    }


@dataclass
class ClassTemplate:
    name: str
    rate_range: tuple = (60.0, 80.0)
    waves: dict = field(default_factory=_default_waves)
    amplitude_scale: float = 1.0


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic generator.

    ``min_rate_gap`` is the documented separation margin: class heart-rate
    ranges must be at least this far apart (bpm) unless the classes differ
    in ``amplitude_scale`` by at least ``min_amplitude_gap``.

    Baseline wander, beat-to-beat rate variability and amplitude jitter are
    off by default. They add realism, but make masked reconstruction far
    slower to learn at desk scale.
    """

    classes: list = field(
        default_factory=lambda: [ClassTemplate("slow", (50.0, 70.0)), ClassTemplate("fast", (100.0, 130.0))]
    )
    task: str = "synthetic_rhythm"
    noise: float = 0.01
    baseline_wander: float = 0.0
    amplitude_jitter: float = 0.0
    rate_variability: float = 0.0
    sampling_rate: float = TARGET_RATE
    duration: float = 10.0
    seed: int = 0
    min_rate_gap: float = 5.0
    min_amplitude_gap: float = 0.3

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassTemplate) else _class_from_dict(c) for c in self.classes]
        self.validate()

    def validate(self):
        if not self.classes:
            raise ConfigError("synthetic spec needs at least one class")
        for c in self.classes:
            lo, hi = c.rate_range
            if not 20 <= lo <= hi <= 250:
                raise ConfigError(f"class {c.name}: implausible rate range {c.rate_range}")
        for i, a in enumerate(self.classes):
            for b in self.classes[i + 1 :]:
                gap = max(b.rate_range[0] - a.rate_range[1], a.rate_range[0] - b.rate_range[1])
                amp_gap = abs(a.amplitude_scale - b.amplitude_scale)
                if gap < self.min_rate_gap and amp_gap < self.min_amplitude_gap:
                    raise ConfigError(f"classes {a.name!r} and {b.name!r} are not separated by the required margin")
        if self.noise < 0 or self.baseline_wander < 0 or self.sampling_rate <= 0 or self.duration <= 0:
            raise ConfigError("noise, wander, sampling rate and duration must be non-negative/positive")

    @property
    def label_names(self):
        return [c.name for c in self.classes]

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def _class_from_dict(d):
    d = dict(d)
    unknown = set(d) - {f.name for f in fields(ClassTemplate)}
    if unknown:
        raise ConfigError(f"unknown class keys: {sorted(unknown)}")
    if "waves" in d:
        waves = _default_waves()
        for k, v in d["waves"].items():
            if k not in waves:
                raise ConfigError(f"unknown wave {k!r}")
            waves[k] = Wave(**{**asdict(waves[k]), **v})
        d["waves"] = waves
    if "rate_range" in d:
        d["rate_range"] = tuple(d["rate_range"])
    return ClassTemplate(**d)


def render_beats(rng, template: ClassTemplate, spec: SyntheticSpec) -> np.ndarray:
    """One raw ``(12, duration * rate)`` recording of the given class."""
    fs = spec.sampling_rate
    n = int(round(spec.duration * fs))
    t = np.arange(n) / fs
    axes = lead_axes()
    rate = rng.uniform(*template.rate_range)
    rr = 60.0 / rate
    beats = []
    tb = rng.uniform(0.0, rr) - rr
    while tb < spec.duration + rr:
        beats.append(tb)
        tb += rr * (1.0 + spec.rate_variability * rng.standard_normal())
    beats = np.array(beats)
    out = np.zeros((len(axes), n))
    for wave in template.waves.values():
        direction = np.asarray(wave.direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        gains = axes @ direction
        amp = wave.amplitude * template.amplitude_scale
        amps = amp * (1.0 + spec.amplitude_jitter * rng.standard_normal(len(beats)))
        centers = beats + wave.offset
        shape = (amps[:, None] * np.exp(-0.5 * ((t[None, :] - centers[:, None]) / wave.width) ** 2)).sum(axis=0)
        out += gains[:, None] * shape[None, :]
    if spec.baseline_wander:
        freq = rng.uniform(0.1, 0.4, size=(len(axes), 1))
        phase = rng.uniform(0, 2 * np.pi, size=(len(axes), 1))
        out += spec.baseline_wander * np.sin(2 * np.pi * freq * t[None, :] + phase)
    if spec.noise:
        out += spec.noise * rng.standard_normal(out.shape)
    return out


def synth_records(spec: SyntheticSpec, count: int, prefix="syn"):
    """Generate ``count`` preprocessed records, classes assigned round-robin."""
    rng = np.random.default_rng(spec.seed)
    k = len(spec.classes)
    records = []
    for i in range(count):
        cls = i % k
        raw = render_beats(rng, spec.classes[cls], spec)
        labels = np.zeros(k, dtype=np.int8)
        labels[cls] = 1
        sig = preprocess(raw, spec.sampling_rate, TARGET_LENGTH, TARGET_RATE)
        records.append(EcgRecord(f"{prefix}{i:06d}", sig, labels, spec.sampling_rate, raw.shape[1]))
    return records


def synth_generate(spec: SyntheticSpec, count: int, out_dir=None):
    """Generate records; with ``out_dir`` also write the dataset files."""
    records = synth_records(spec, count)
    if out_dir is not None:
        write_dataset(out_dir, records, spec.task, spec.label_names)
    return records
