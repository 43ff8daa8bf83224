"""Rotation representations: Bunge Euler angles, unit quaternions, homochoric and
cubochoric vectors.

Conventions follow Rowenhorst et al. (2015) with P = -1: passive rotations,
quaternions stored (w, x, y, z) with w >= 0, rotation angles in [0, pi].
The cubochoric map is the Rosca et al. (2014) equal-volume projection of the
homochoric ball onto a cube of edge pi^(2/3).

All functions are vectorized over leading axes; the last axis holds the
components.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

P = -1.0

CUBE_EDGE = np.pi ** (2.0 / 3.0)
CUBE_HALF_EDGE = 0.5 * CUBE_EDGE
BALL_RADIUS = (0.75 * np.pi) ** (1.0 / 3.0)
CUBE_TOLERANCE = 1e-9

_M1 = (np.pi / 6.0) ** (1.0 / 6.0)
_SQRT2 = np.sqrt(2.0)
_TINY = 1e-15


@dataclass(frozen=True)
class EulerAngles:
    """Bunge ZXZ angles in radians."""

    phi1: float
    Phi: float
    phi2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi1, self.Phi, self.phi2])


@dataclass(frozen=True)
class Cubochoric:
    c1: float
    c2: float
    c3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.c3])


@dataclass(frozen=True)
class UnitQuaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])


def _as_components(v, n: int) -> np.ndarray:
    if isinstance(v, (EulerAngles, Cubochoric, UnitQuaternion)):
        v = v.as_array()
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != n:
        raise ValueError(f"expected trailing axis of length {n}, got shape {v.shape}")
    return v


def canonical_quaternion(q: np.ndarray) -> np.ndarray:
    """Normalize and flip sign so that w >= 0."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def canonical_euler(eu: np.ndarray) -> np.ndarray:
    """Wrap phi1, phi2 into [0, 2pi) and Phi into [0, pi]."""
    eu = np.array(eu, dtype=np.float64)
    if not np.all(np.isfinite(eu)):
        raise DomainError("Euler angles must be finite")
    return quaternion_to_euler(euler_to_quaternion(eu))


# ------------------------------------------------------------------ Euler <-> quaternion

def euler_to_quaternion(eu) -> np.ndarray:
    eu = _as_components(eu, 3)
    half = 0.5 * eu
    c = np.cos(half[..., 1])
    s = np.sin(half[..., 1])
    sigma = half[..., 0] + half[..., 2]
    delta = half[..., 0] - half[..., 2]
    q = np.stack(
        [c * np.cos(sigma), -P * s * np.cos(delta), -P * s * np.sin(delta), -P * c * np.sin(sigma)],
        axis=-1,
    )
    return canonical_quaternion(q)


def quaternion_to_euler(q) -> np.ndarray:
    q = canonical_quaternion(_as_components(q, 4))
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    q03 = q0 * q0 + q3 * q3
    q12 = q1 * q1 + q2 * q2
    chi = np.sqrt(q03 * q12)

    regular = np.stack(
        [
            np.arctan2(-P * q0 * q2 + q1 * q3, -P * q0 * q1 - q2 * q3),
            np.arctan2(2.0 * chi, q03 - q12),
            np.arctan2(P * q0 * q2 + q1 * q3, -P * q0 * q1 + q2 * q3),
        ],
        axis=-1,
    )
    zeros = np.zeros_like(q0)
    phi_zero = np.stack([np.arctan2(-P * 2.0 * q0 * q3, q0 * q0 - q3 * q3), zeros, zeros], axis=-1)
    phi_pi = np.stack([np.arctan2(2.0 * q1 * q2, q1 * q1 - q2 * q2), np.full_like(q0, np.pi), zeros], axis=-1)

    eu = np.where((q12 < 1e-30)[..., None], phi_zero, regular)
    eu = np.where((q03 < 1e-30)[..., None], phi_pi, eu)
    eu[..., 0] = np.mod(eu[..., 0], 2.0 * np.pi)
    eu[..., 2] = np.mod(eu[..., 2], 2.0 * np.pi)
    # mod can return exactly 2pi for tiny negative inputs
    eu[..., 0] = np.where(eu[..., 0] >= 2.0 * np.pi, 0.0, eu[..., 0])
    eu[..., 2] = np.where(eu[..., 2] >= 2.0 * np.pi, 0.0, eu[..., 2])
    return eu


# ------------------------------------------------------------ quaternion <-> homochoric

def quaternion_to_homochoric(q) -> np.ndarray:
    q = canonical_quaternion(_as_components(q, 4))
    vec = q[..., 1:]
    vnorm = np.linalg.norm(vec, axis=-1)
    omega = 2.0 * np.arctan2(vnorm, q[..., 0])
    f = (0.75 * (omega - np.sin(omega))) ** (1.0 / 3.0)
    safe = np.where(vnorm > 0.0, vnorm, 1.0)
    return np.where((vnorm > 0.0)[..., None], vec / safe[..., None] * f[..., None], 0.0)


def _homochoric_angle(radius: np.ndarray) -> np.ndarray:
    """Invert |h| = (3/4 (w - sin w))^(1/3) for w in [0, pi] by Newton iteration."""
    r3 = np.clip(radius, 0.0, BALL_RADIUS) ** 3
    # small-angle start: |h|^3 ~ w^3 / 8
    w = np.minimum(2.0 * np.cbrt(r3), np.pi)
    for _ in range(60):
        g = 0.75 * (w - np.sin(w)) - r3
        dg = 0.75 * (1.0 - np.cos(w))
        step = np.where(dg > 1e-300, g / np.where(dg > 1e-300, dg, 1.0), 0.0)
        w_new = np.clip(w - step, 0.0, np.pi)
        if np.all(np.abs(w_new - w) <= 1e-16 * np.maximum(1.0, w)):
            w = w_new
            break
        w = w_new
    return w


def homochoric_to_quaternion(h) -> np.ndarray:
    h = _as_components(h, 3)
    r = np.linalg.norm(h, axis=-1)
    omega = _homochoric_angle(r)
    safe = np.where(r > 0.0, r, 1.0)
    axis = h / safe[..., None]
    q = np.concatenate([np.cos(0.5 * omega)[..., None], axis * np.sin(0.5 * omega)[..., None]], axis=-1)
    q = np.where((r > 0.0)[..., None], q, np.array([1.0, 0.0, 0.0, 0.0]))
    return canonical_quaternion(q)


# ---------------------------------------------------------- homochoric <-> cubochoric

def _pyramid(v: np.ndarray) -> np.ndarray:
    """0 if |z| is the largest component, 1 if |x|, 2 if |y| (ties favor z, then x)."""
    a = np.abs(v)
    pyr = np.full(v.shape[:-1], 2, dtype=np.int64)
    pyr = np.where(a[..., 0] >= a[..., 1], 1, pyr)
    pyr = np.where((a[..., 2] >= a[..., 0]) & (a[..., 2] >= a[..., 1]), 0, pyr)
    return pyr


def _to_z_pyramid(v: np.ndarray, pyr: np.ndarray) -> np.ndarray:
    out = v.copy()
    for p in (1, 2):
        sel = pyr == p
        out[sel] = np.roll(v[sel], -p, axis=-1)
    return out


def _from_z_pyramid(v: np.ndarray, pyr: np.ndarray) -> np.ndarray:
    out = v.copy()
    for p in (1, 2):
        sel = pyr == p
        out[sel] = np.roll(v[sel], p, axis=-1)
    return out


def cubochoric_to_homochoric(c) -> np.ndarray:
    c = _as_components(c, 3)
    flat = c.reshape(-1, 3)
    if np.any(np.abs(flat) > CUBE_HALF_EDGE + CUBE_TOLERANCE):
        raise DomainError(f"cubochoric input outside the cube of half-edge {CUBE_HALF_EDGE:.12f}")
    flat = np.clip(flat, -CUBE_HALF_EDGE, CUBE_HALF_EDGE)
    pyr = _pyramid(flat)
    v = _to_z_pyramid(flat, pyr) * _M1
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    origin = np.abs(z) <= _TINY

    # M2: square -> disk, applied on the dominant of (x, y)
    swap = np.abs(x) > np.abs(y)
    a = np.where(swap, y, x)
    b = np.where(swap, x, y)
    on_axis = np.abs(b) <= _TINY
    b_safe = np.where(on_axis, 1.0, b)
    theta = np.pi * a / (12.0 * b_safe)
    k = np.sqrt(3.0 / np.pi) * 2.0 ** 0.75 * b_safe / np.sqrt(_SQRT2 - np.cos(theta))
    a2 = np.where(on_axis, 0.0, _SQRT2 * np.sin(theta) * k)
    b2 = np.where(on_axis, 0.0, (_SQRT2 * np.cos(theta) - 1.0) * k)
    x2 = np.where(swap, b2, a2)
    y2 = np.where(swap, a2, b2)

    # M3: disk -> sphere
    z_safe = np.where(origin, 1.0, z)
    kk = x2 * x2 + y2 * y2
    scale = np.sqrt(np.maximum(1.0 - np.pi * kk / (24.0 * z_safe * z_safe), 0.0))
    hx = x2 * scale
    hy = y2 * scale
    hz = np.sqrt(6.0 / np.pi) * z_safe - kk * np.sqrt(np.pi / 24.0) / z_safe
    h = np.stack([hx, hy, hz], axis=-1)
    h[origin] = 0.0
    return _from_z_pyramid(h, pyr).reshape(c.shape)


def homochoric_to_cubochoric(h) -> np.ndarray:
    h = _as_components(h, 3)
    flat = h.reshape(-1, 3)
    rs = np.linalg.norm(flat, axis=-1)
    if np.any(rs > BALL_RADIUS + 1e-12):
        raise DomainError(f"homochoric input outside the ball of radius {BALL_RADIUS:.12f}")
    pyr = _pyramid(flat)
    v = _to_z_pyramid(flat, pyr)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    origin = rs <= _TINY
    rs_safe = np.where(origin, 1.0, rs)

    # inverse M3
    f = np.sqrt(2.0 * rs_safe / (rs_safe + np.abs(z)))
    x = x * f
    y = y * f
    zc = np.sign(z) * rs_safe * np.sqrt(np.pi / 6.0)

    # inverse M2
    swap = np.abs(x) > np.abs(y)
    a = np.where(swap, y, x)
    b = np.where(swap, x, y)
    sq0 = a * a
    sq1 = b * b
    mag = sq0 + sq1
    on_axis = mag <= _TINY * _TINY
    mag_safe = np.where(on_axis, 1.0, mag)
    sq1_safe = np.where(on_axis, 1.0, sq1)
    kq = np.sqrt((mag_safe + sq1_safe) * sq1_safe)
    base = np.sqrt(np.pi / 3.0) * np.sqrt((mag_safe + sq1_safe) * mag_safe / ((mag_safe + sq1_safe) - kq)) / 2.0
    sign_a = np.where(a < 0.0, -1.0, 1.0)
    sign_b = np.where(b < 0.0, -1.0, 1.0)
    ratio = np.clip((sq0 + kq) / (mag_safe * _SQRT2), -1.0, 1.0)
    a2 = np.where(on_axis, 0.0, sign_a * base * 12.0 * np.arccos(ratio) / np.pi)
    b2 = np.where(on_axis, 0.0, sign_b * base)
    x2 = np.where(swap, b2, a2)
    y2 = np.where(swap, a2, b2)

    c = np.stack([x2, y2, zc], axis=-1) / _M1
    c[origin] = 0.0
    return _from_z_pyramid(c, pyr).reshape(h.shape)


# ----------------------------------------------------------------- public chain

def quaternion_to_cubochoric(q) -> np.ndarray:
    return homochoric_to_cubochoric(quaternion_to_homochoric(q))


def cubochoric_to_quaternion(c) -> np.ndarray:
    return homochoric_to_quaternion(cubochoric_to_homochoric(c))


def euler_to_cubochoric(eu) -> np.ndarray:
    """Euler -> quaternion -> axis-angle -> homochoric -> cubochoric."""
    return quaternion_to_cubochoric(euler_to_quaternion(eu))


def cubochoric_to_euler(c) -> np.ndarray:
    """Inverse of :func:`euler_to_cubochoric` up to rotation equivalence.

    Raises DomainError when a point lies outside the cube by more than 1e-9.
    """
    return quaternion_to_euler(cubochoric_to_quaternion(c))


def quaternion_multiply(a, b) -> np.ndarray:
    a = _as_components(a, 4)
    b = _as_components(b, 4)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + P * (ay * bz - az * by),
            aw * by + ay * bw + P * (az * bx - ax * bz),
            aw * bz + az * bw + P * (ax * by - ay * bx),
        ],
        axis=-1,
    )


def quaternion_conjugate(q) -> np.ndarray:
    q = _as_components(q, 4)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def axis_angle_to_quaternion(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=np.float64)
    q = np.concatenate([np.cos(0.5 * angle)[..., None], axis * np.sin(0.5 * angle)[..., None]], axis=-1)
    return canonical_quaternion(q)


def misorientation_angle(a, b) -> np.ndarray:
    """Rotation angle of a^-1 b in [0, pi], without crystal symmetry."""
    a = canonical_quaternion(_as_components(a, 4))
    b = canonical_quaternion(_as_components(b, 4))
    d = quaternion_multiply(quaternion_conjugate(a), b)
    return 2.0 * np.arctan2(np.linalg.norm(d[..., 1:], axis=-1), np.abs(d[..., 0]))


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples over SO(3) from normalized 4-D Gaussians."""
    return canonical_quaternion(rng.standard_normal((n, 4)))


def in_cube(c, tol: float = CUBE_TOLERANCE) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.all(np.abs(c) <= CUBE_HALF_EDGE + tol, axis=-1)
