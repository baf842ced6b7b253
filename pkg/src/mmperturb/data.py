"""Synthetic multimodal skeletal motion and its text serialization.

Each observation id owns a sinusoidal prefix shared by all of its records.
Every record then continues with one of ``M`` future modes, so a single
prefix has several plausible continuations and the mode label is known.

File format (text, one header then records)::

    mmdata v1 J=5 t=16 T=40 M=3 separation=0.9 records=2
    0 1                      # "<id> <mode>"; mode 0 marks unlabeled output
    w x y z w x y z ...      # T lines, J*4 floats each
    ...
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import Skeleton, axis_angle, forward_kinematics, normalize, quat_multiply
from .rng import substream

MAGIC = "mmdata"
VERSION = "v1"

_MODE_AXES = [(1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, 0.0, -1.0)]
_MODE_FREQS = [1.0, 1.3, 0.8, 1.15]


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FutureMode:
    freq: float
    axis: tuple[float, float, float]
    phase: float = 0.0


def default_modes(count: int) -> list[FutureMode]:
    modes = []
    for m in range(count):
        axis = _MODE_AXES[m % len(_MODE_AXES)]
        freq = _MODE_FREQS[m % len(_MODE_FREQS)] + 0.35 * (m // len(_MODE_AXES))
        modes.append(FutureMode(freq, axis))
    return modes


@dataclass
class SyntheticSpec:
    joints: int = 5
    modes: int = 3
    observed: int = 16
    total: int = 40
    base_amplitude: float = 0.4
    base_frequency: float = 0.2
    mode_amplitude: float = 0.6
    noise_std: float = 0.01
    records_per_id: int = 3
    seed: int = 0
    future_modes: list[FutureMode] = field(default_factory=list)

    def __post_init__(self):
        if not self.future_modes:
            self.future_modes = default_modes(self.modes)
        self.validate()

    @property
    def horizon(self) -> int:
        return self.total - self.observed

    def skeleton(self) -> Skeleton:
        return Skeleton.chain(self.joints)

    def validate(self) -> None:
        if self.joints < 1:
            raise ValueError("joints must be positive")
        if self.modes < 1:
            raise ValueError("modes must be positive")
        if not self.total > self.observed >= 1:
            raise ValueError(f"need total > observed >= 1, got {self.total}, {self.observed}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.records_per_id < 1:
            raise ValueError("records_per_id must be positive")
        if len(self.future_modes) != self.modes:
            raise ValueError(f"{len(self.future_modes)} future modes given for modes={self.modes}")
        if len(set(self.future_modes)) != len(self.future_modes):
            raise ValueError("future mode parameters must be pairwise distinct")


@dataclass
class DatasetRecord:
    id: int
    mode: int
    frames: np.ndarray  # (T, J, 4)

    def __eq__(self, other):
        return (
            isinstance(other, DatasetRecord)
            and self.id == other.id
            and self.mode == other.mode
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )


@dataclass
class Dataset:
    joints: int
    observed: int
    total: int
    modes: int
    records: list[DatasetRecord]
    separation: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def horizon(self) -> int:
        return self.total - self.observed

    def frames(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.total, self.joints, 4))
        return np.stack([r.frames for r in self.records])

    def ids(self) -> np.ndarray:
        return np.array([r.id for r in self.records], dtype=np.int64)

    def subset(self, records: list[DatasetRecord]) -> "Dataset":
        return Dataset(self.joints, self.observed, self.total, self.modes, records, self.separation)


def _id_params(spec: SyntheticSpec, obs_id: int) -> tuple[float, float]:
    rng = substream(spec.seed, "data", obs_id, 0)
    return rng.uniform(0.0, 2.0 * math.pi), rng.uniform(0.7, 1.3)


def _base_angles(spec: SyntheticSpec, phase: float, amp_scale: float) -> np.ndarray:
    k = np.arange(spec.total, dtype=np.float64)[:, None]
    j = np.arange(spec.joints, dtype=np.float64)[None, :]
    omega = spec.base_frequency * (1.0 + 0.15 * j)
    return amp_scale * spec.base_amplitude * np.sin(omega * k + phase + 0.5 * j)


def _clean_motion(spec: SyntheticSpec, obs_id: int, mode: int) -> np.ndarray:
    """Noise-free (T, J, 4) motion for ``obs_id`` continued with ``mode`` (1-based)."""
    phase, amp_scale = _id_params(spec, obs_id)
    angles = _base_angles(spec, phase, amp_scale)
    # root yaws about the vertical axis, every other joint bends about z
    axes = np.tile([0.0, 0.0, 1.0], (spec.joints, 1))
    axes[0] = (0.0, 1.0, 0.0)
    q = axis_angle(axes[None, :, :], angles)
    fm = spec.future_modes[mode - 1]
    tau = np.arange(spec.total, dtype=np.float64) - (spec.observed - 1)
    tau = np.clip(tau, 0.0, None)
    omega = 0.5 * math.pi / spec.horizon
    theta = spec.mode_amplitude * (np.sin(omega * fm.freq * tau + fm.phase) - math.sin(fm.phase))
    theta = np.where(tau > 0, theta, 0.0)
    extra = axis_angle(np.asarray(fm.axis), theta)  # (T, 4)
    out = q.copy()
    out[:, 1:, :] = quat_multiply(q[:, 1:, :], extra[:, None, :])
    return out


def mode_continuations(spec: SyntheticSpec, obs_id: int) -> np.ndarray:
    """Noise-free motions for every mode of one id, shape ``(M, T, J, 4)``."""
    return np.stack([_clean_motion(spec, obs_id, m) for m in range(1, spec.modes + 1)])


def separation_bound(spec: SyntheticSpec, ids) -> float:
    """Smallest, over ids and mode pairs, of the largest joint-position gap at the final frame."""
    if spec.modes < 2:
        return 0.0
    skel = spec.skeleton()
    best = math.inf
    for obs_id in ids:
        pos = forward_kinematics(skel, mode_continuations(spec, obs_id)[:, -1])  # (M, J, 3)
        for a in range(spec.modes):
            for b in range(a + 1, spec.modes):
                gap = float(np.max(np.linalg.norm(pos[a] - pos[b], axis=-1)))
                best = min(best, gap)
    return best


def generate_dataset(spec: SyntheticSpec, count: int) -> Dataset:
    """``count`` observation ids with ``spec.records_per_id`` records each."""
    if count < 1:
        raise ValueError("count must be positive")
    spec.validate()
    t = spec.observed
    records = []
    for obs_id in range(count):
        prefix_rng = substream(spec.seed, "data", obs_id, 1)
        prefix_noise = prefix_rng.normal(0.0, 0.5 * spec.noise_std, size=(t, spec.joints, 4))
        for r in range(spec.records_per_id):
            rec_rng = substream(spec.seed, "data", obs_id, 2, r)
            mode = int(rec_rng.integers(1, spec.modes + 1))
            frames = _clean_motion(spec, obs_id, mode)
            noise = rec_rng.normal(0.0, 0.5 * spec.noise_std, size=frames.shape)
            noise[:t] = prefix_noise
            frames = normalize(frames + noise)
            records.append(DatasetRecord(obs_id, mode, frames))
    return Dataset(
        spec.joints, spec.observed, spec.total, spec.modes, records, separation_bound(spec, range(count))
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps(dataset: Dataset) -> str:
    lines = [
        f"{MAGIC} {VERSION} J={dataset.joints} t={dataset.observed} T={dataset.total} "
        f"M={dataset.modes} separation={_fmt(dataset.separation)} records={len(dataset.records)}"
    ]
    for rec in dataset.records:
        if rec.frames.shape != (dataset.total, dataset.joints, 4):
            raise ValueError(f"record {rec.id} has frames of shape {rec.frames.shape}")
        lines.append(f"{rec.id} {rec.mode}")
        for frame in rec.frames.reshape(dataset.total, -1):
            lines.append(" ".join(_fmt(v) for v in frame))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    head = lines[0].split()
    if len(head) < 2 or head[0] != MAGIC or head[1] != VERSION:
        raise DatasetFormatError(f"line 1: expected '{MAGIC} {VERSION}' header")
    meta = {}
    for tok in head[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise DatasetFormatError(f"line 1: malformed header field {tok!r}")
        meta[key] = val
    try:
        J, t, T, M = (int(meta[k]) for k in ("J", "t", "T", "M"))
        count = int(meta["records"])
        separation = float(meta.get("separation", "0"))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"line 1: bad or missing header field ({exc})") from exc
    width = 4 * J
    expected = 1 + count * (T + 1)
    records = []
    pos = 1
    for _ in range(count):
        if pos >= len(lines):
            raise DatasetFormatError(f"line {pos + 1}: unexpected end of file (expected {expected} lines)")
        fields = lines[pos].split()
        if len(fields) != 2:
            raise DatasetFormatError(f"line {pos + 1}: expected '<id> <mode>'")
        try:
            obs_id, mode = int(fields[0]), int(fields[1])
        except ValueError as exc:
            raise DatasetFormatError(f"line {pos + 1}: field id/mode: {exc}") from exc
        frames = np.empty((T, width))
        for k in range(T):
            lineno = pos + 2 + k
            if lineno > len(lines):
                raise DatasetFormatError(f"line {lineno}: unexpected end of file")
            vals = lines[lineno - 1].split()
            if len(vals) != width:
                raise DatasetFormatError(f"line {lineno}: expected {width} floats, got {len(vals)}")
            for c, v in enumerate(vals):
                try:
                    frames[k, c] = float(v)
                except ValueError as exc:
                    raise DatasetFormatError(f"line {lineno}: field {c + 1}: {exc}") from exc
        records.append(DatasetRecord(obs_id, mode, frames.reshape(T, J, 4)))
        pos += T + 1
    if pos != len(lines):
        raise DatasetFormatError(f"line {pos + 1}: trailing content after {count} records")
    return Dataset(J, t, T, M, records, separation)


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps(dataset))


def read_dataset(path) -> Dataset:
    return loads(Path(path).read_text())


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by observation id so no prefix appears in two splits."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    ids = np.unique(dataset.ids())
    order = substream(seed, "split").permutation(len(ids))
    n_train = int(math.floor(ratios[0] * len(ids) + 1e-9))
    n_val = int(math.floor(ratios[1] * len(ids) + 1e-9))
    if ratios[2] == 0.0:
        n_val = len(ids) - n_train
    groups = [
        set(ids[order[:n_train]].tolist()),
        set(ids[order[n_train : n_train + n_val]].tolist()),
        set(ids[order[n_train + n_val :]].tolist()),
    ]
    return tuple(dataset.subset([r for r in dataset.records if r.id in g]) for g in groups)
