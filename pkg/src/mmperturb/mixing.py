"""Stochastic index sampling, vector resampling and the curriculum scheduler.

Indices are 0-based. ``kept_count(L, alpha)`` is the ``ceil(alpha * L)``
coordinates taken from the first vector; the remaining
``L - ceil(alpha * L) == floor((1 - alpha) * L)`` come from the second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad


class FusionMode(str, Enum):
    MM = "mm"
    LHP = "lhp"
    RHP = "rhp"
    LPP = "lpp"


def kept_count(length: int, alpha: float) -> int:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    # round first so that e.g. 0.3 * 10 == 3.0000000000000004 does not ceil to 4
    return min(length, math.ceil(round(alpha * length, 9)))


def noise_dim(length: int, alpha: float) -> int:
    return length - kept_count(length, alpha)


@dataclass(frozen=True)
class IndexSet:
    length: int
    chosen: np.ndarray

    def __post_init__(self):
        chosen = np.unique(np.asarray(self.chosen, dtype=np.intp))
        if len(chosen) != len(self.chosen):
            raise ValueError("indices must be distinct")
        if chosen.size and (chosen[0] < 0 or chosen[-1] >= self.length):
            raise ValueError(f"indices must lie in [0, {self.length})")
        object.__setattr__(self, "chosen", chosen)

    def __len__(self) -> int:
        return len(self.chosen)

    def complement(self) -> np.ndarray:
        mask = np.ones(self.length, dtype=bool)
        mask[self.chosen] = False
        return np.flatnonzero(mask)

    @classmethod
    def prefix(cls, length: int, count: int) -> "IndexSet":
        return cls(length, np.arange(count))


def sample_indices(length: int, alpha: float, rng: np.random.Generator) -> IndexSet:
    """``ceil(alpha * L)`` distinct indices drawn uniformly without replacement."""
    if length < 1:
        raise ValueError("length must be positive")
    k = kept_count(length, alpha)
    return IndexSet(length, rng.choice(length, size=k, replace=False))


def resample(a: np.ndarray, b: np.ndarray, index: IndexSet) -> np.ndarray:
    """Take ``a`` at ``index`` and ``b`` elsewhere.

    ``b`` either has the full length (read at the complementary positions) or
    the compact length ``L - |I|`` (read in ascending complement order).
    Leading batch axes are allowed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    L = index.length
    comp = index.complement()
    if a.shape[-1] != L:
        raise ValueError(f"first vector has length {a.shape[-1]}, expected {L}")
    if b.shape[-1] == L:
        b = b[..., comp]
    elif b.shape[-1] != len(comp):
        raise ValueError(
            f"second vector has length {b.shape[-1]}; expected {L} or {len(comp)}"
        )
    out = np.empty(np.broadcast_shapes(a.shape[:-1], b.shape[:-1]) + (L,))
    out[..., index.chosen] = a[..., index.chosen]
    out[..., comp] = b
    return out


def resample_var(a, b, index: IndexSet) -> ad.Var:
    """Differentiable :func:`resample` on tape variables (last axis)."""
    tape = ad._tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    L = index.length
    comp = index.complement()
    if a.shape[-1] != L:
        raise ad.ShapeError(f"first vector has length {a.shape[-1]}, expected {L}")
    if b.shape[-1] == L:
        b = ad.gather(b, comp)
    elif b.shape[-1] != len(comp):
        raise ad.ShapeError(f"second vector has length {b.shape[-1]}; expected {L} or {len(comp)}")
    parts = []
    if len(index):
        parts.append(ad.scatter(ad.gather(a, index.chosen), index.chosen, L))
    if len(comp):
        parts.append(ad.scatter(b, comp, L))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out


@dataclass(frozen=True)
class CurriculumSchedule:
    """Index sampling that starts on a fixed block and randomizes over epochs.

    For ``s = epoch // step`` below the threshold, ``k - s`` indices come
    from the known block ``{0..k-1}`` and ``s`` from the rest; afterwards
    all ``k`` are uniform over ``[0, L)``.
    """

    alpha: float
    length: int
    step: int

    def __post_init__(self):
        if self.step < 1:
            raise ValueError("curriculum step must be a positive integer")
        kept_count(self.length, self.alpha)

    @property
    def k(self) -> int:
        return kept_count(self.length, self.alpha)

    @property
    def threshold(self) -> int:
        return min(self.k // 2, (self.length - self.k) // 2)

    def swaps(self, epoch: int) -> int:
        """Curriculum counter ``s``; the schedule is fully random once it reaches the threshold."""
        return epoch // self.step

    def known_count(self, epoch: int) -> int:
        """``k - min(s, th)``; from the threshold on the draw itself is uniform over ``[0, L)``."""
        return self.k - min(self.swaps(epoch), self.threshold)


def curriculum_indices(schedule: CurriculumSchedule, epoch: int, rng: np.random.Generator) -> IndexSet:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    L, k = schedule.length, schedule.k
    s = schedule.swaps(epoch)
    if s < schedule.threshold:
        known = rng.choice(k, size=k - s, replace=False)
        rest = k + rng.choice(L - k, size=s, replace=False)
        return IndexSet(L, np.concatenate([known, rest]))
    return sample_indices(L, schedule.alpha, rng)


def fuse(h, z, index: IndexSet, mode: FusionMode | str, alpha: float | None = None, weight=None) -> ad.Var:
    """Combine hidden state ``h`` (``(B, L)``) with noise ``z``.

    ``mm`` keeps ``h`` at the stochastic ``index``; ``lhp`` ignores ``index``
    and keeps ``h`` on the fixed prefix ``{0..ceil(alpha L)-1}``; ``rhp``
    returns ``h + z @ weight.T`` with ``weight`` of shape ``(L, z_dim)``.
    """
    mode = FusionMode(mode)
    tape = ad._tape_of(h, z, weight)
    h, z = tape.lift(h), tape.lift(z)
    L = h.shape[-1]
    if mode is FusionMode.MM:
        return resample_var(h, z, index)
    if mode is FusionMode.LHP:
        if alpha is None:
            alpha = len(index) / index.length
        return resample_var(h, z, IndexSet.prefix(L, kept_count(L, alpha)))
    if mode is FusionMode.RHP:
        weight = tape.lift(weight)
        if weight.shape != (L, z.shape[-1]):
            raise ad.ShapeError(
                f"rhp weight shape {weight.shape} does not match hidden {L} and noise {z.shape[-1]}"
            )
        return ad.add(h, ad.matmul(z, ad.transpose(weight)))
    raise ValueError(f"fusion mode {mode.value!r} does not fuse into the hidden state")

