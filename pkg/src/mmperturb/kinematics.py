"""Quaternion algebra and skeleton forward kinematics.

Quaternions are numpy arrays with a trailing axis of length 4 in
(w, x, y, z) order; leading axes broadcast. A pose is a ``(J, 4)`` array of
local joint rotations, a motion a ``(T, J, 4)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# Convention used by quat_to_euler and every Euler-angle metric.
EULER_ORDER = "intrinsic ZYX (yaw, pitch, roll)"


class SkeletonError(ValueError):
    pass


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b`` (apply ``b`` first, then ``a``)."""
    return ad._hamilton(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def rotate_vector(q: np.ndarray, v: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise ValueError(f"rotate_vector needs unit quaternions (norm {norms.max():.6g})")
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def euler_to_quat(yaw, pitch, roll) -> np.ndarray:
    """Inverse of :func:`quat_to_euler`: ``Rz(yaw) Ry(pitch) Rx(roll)``."""
    qz = axis_angle([0.0, 0.0, 1.0], yaw)
    qy = axis_angle([0.0, 1.0, 0.0], pitch)
    qx = axis_angle([1.0, 0.0, 0.0], roll)
    return quat_multiply(quat_multiply(qz, qy), qx)


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def quat_to_euler(q: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X angles ``(..., 3)`` as (yaw, pitch, roll).

    At gimbal lock (|pitch| = pi/2) roll is reported as 0 and yaw carries the
    combined rotation about the vertical axis.
    """
    q = normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    sinp = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r10 = 2.0 * (w * z + x * y)
    r21 = 2.0 * (w * x + y * z)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    yaw = np.arctan2(r10, r00)
    pitch = np.arctan2(sinp, np.hypot(r00, r10))
    roll = np.arctan2(r21, r22)
    locked = np.abs(sinp) > 1.0 - 1e-10
    if np.any(locked):
        yaw = np.where(locked, wrap_angle(2.0 * np.arctan2(z, w)), yaw)
        pitch = np.where(locked, np.sign(sinp) * np.pi / 2, pitch)
        roll = np.where(locked, 0.0, roll)
    return np.stack([yaw, pitch, roll], axis=-1)


@dataclass
class Skeleton:
    parent: np.ndarray  # (J,) int, parent[0] == -1
    offset: np.ndarray  # (J, 3) bone vectors in the parent frame

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(-1, 3)
        self.validate()

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def validate(self) -> None:
        if self.joint_count < 1:
            raise SkeletonError("skeleton needs at least one joint")
        if self.offset.shape != (self.joint_count, 3):
            raise SkeletonError(
                f"offset shape {self.offset.shape} does not match {self.joint_count} joints"
            )
        if self.parent[0] != -1:
            raise SkeletonError("joint 0 must be the root (parent -1)")
        for j in range(1, self.joint_count):
            if not 0 <= self.parent[j] < j:
                raise SkeletonError(f"joint {j} has parent {self.parent[j]}; need 0 <= parent < {j}")

    @classmethod
    def chain(cls, joints: int, offset=(0.0, 1.0, 0.0)) -> "Skeleton":
        return cls(np.arange(joints) - 1, np.tile(np.asarray(offset, dtype=np.float64), (joints, 1)))

    def to_text(self) -> str:
        lines = [str(self.joint_count)]
        for j in range(self.joint_count):
            ox, oy, oz = (repr(float(c)) for c in self.offset[j])
            lines.append(f"{j} {self.parent[j]} {ox} {oy} {oz}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Skeleton":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        try:
            count = int(lines[0])
        except (IndexError, ValueError) as exc:
            raise SkeletonError("line 1: expected joint count") from exc
        if len(lines) != count + 1:
            raise SkeletonError(f"expected {count} joint lines, found {len(lines) - 1}")
        parent, offset = [], []
        for lineno, line in enumerate(lines[1:], start=2):
            fields = line.split()
            if len(fields) != 5:
                raise SkeletonError(f"line {lineno}: expected 5 fields, got {len(fields)}")
            try:
                index, par = int(fields[0]), int(fields[1])
                off = [float(f) for f in fields[2:]]
            except ValueError as exc:
                raise SkeletonError(f"line {lineno}: {exc}") from exc
            if index != lineno - 2:
                raise SkeletonError(f"line {lineno}: joint index {index} out of order")
            parent.append(par)
            offset.append(off)
        return cls(np.array(parent), np.array(offset))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_text(Path(path).read_text())


@dataclass
class MotionSequence:
    frames: np.ndarray  # (T, J, 4)
    frame_rate: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[-1] != 4 or len(self.frames) < 1:
            raise ValueError(f"frames must have shape (T>=1, J, 4), got {self.frames.shape}")

    def __len__(self) -> int:
        return len(self.frames)


def forward_kinematics(skeleton: Skeleton, rotations: np.ndarray) -> np.ndarray:
    """Joint positions ``(..., J, 3)`` from local rotations ``(..., J, 4)``; root at the origin."""
    rotations = np.asarray(rotations, dtype=np.float64)
    J = skeleton.joint_count
    if rotations.shape[-2:] != (J, 4):
        raise SkeletonError(f"pose shape {rotations.shape[-2:]} does not match {J} joints")
    skeleton.validate()
    lead = rotations.shape[:-2]
    glob = np.empty(lead + (J, 4))
    pos = np.zeros(lead + (J, 3))
    glob[..., 0, :] = rotations[..., 0, :]
    for j in range(1, J):
        p = skeleton.parent[j]
        glob[..., j, :] = quat_multiply(glob[..., p, :], rotations[..., j, :])
        pos[..., j, :] = pos[..., p, :] + rotate_vector(glob[..., p, :], skeleton.offset[j])
    return pos


def align_root(pose: np.ndarray) -> np.ndarray:
    """Copy of ``pose`` (``(..., J, 4)``) with the root rotation replaced by identity."""
    out = np.array(pose, dtype=np.float64, copy=True)
    out[..., 0, :] = IDENTITY
    return out


def forward_kinematics_var(skeleton: Skeleton, rotations: "ad.Var", aligned: bool = True) -> "ad.Var":
    """Differentiable FK for ``rotations`` of shape ``(N, J, 4)``; returns ``(N, J, 3)``.

    Rotations are normalized first. With ``aligned`` the root rotation is
    dropped, matching :func:`align_root`.
    """
    J = skeleton.joint_count
    if rotations.shape[-2:] != (J, 4):
        raise SkeletonError(f"pose shape {rotations.shape[-2:]} does not match {J} joints")
    tape = rotations.tape
    n = rotations.shape[0]
    q = ad.normalize(rotations)
    local = [ad.reshape(ad.gather(q, [j], axis=1), (n, 4)) for j in range(J)]
    glob: list = [None] * J
    pos: list = [None] * J
    glob[0] = tape.constant(np.broadcast_to(IDENTITY, (n, 4)).copy()) if aligned else local[0]
    pos[0] = tape.constant(np.zeros((n, 3)))
    for j in range(1, J):
        p = skeleton.parent[j]
        glob[j] = ad.quat_mul(glob[p], local[j])
        pos[j] = ad.add(pos[p], ad.quat_rotate(glob[p], skeleton.offset[j]))
    return ad.reshape(ad.concat(pos, axis=-1), (n, J, 3))
