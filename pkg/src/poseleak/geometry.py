"""Rigid and similarity pose algebra.

Poses are world-to-camera: ``x_cam = R @ X_world + t``. The camera center is
``C = -R.T @ t``. A :class:`SimTransform` maps points ``X' = s * R @ X + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Pose",
    "SimTransform",
    "NoiseSpec",
    "rotation_angle_deg",
    "exp_so3",
    "log_so3",
    "quat_from_matrix",
    "matrix_from_quat",
    "random_rotation",
    "yaw_rotation",
    "look_at",
    "compose",
    "apply_transform",
    "perturb",
    "chordal_mean_rotation",
]


def _skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(rotvec) -> np.ndarray:
    """Rodrigues' formula: axis-angle vector (radians) to rotation matrix."""
    w = np.asarray(rotvec, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    K = _skew(w / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`exp_so3`, via the quaternion (stable near 0 and pi)."""
    q = quat_from_matrix(R)
    w, v = q[0], q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        return 2.0 * v
    return (2.0 * np.arctan2(s, w) / s) * v


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic angle of a rotation, in degrees, within [0, 180].

    Equal to ``arccos((trace(R) - 1) / 2)``; evaluated as an atan2 of the
    sine and cosine parts so small angles keep full precision.
    """
    R = np.asarray(R, dtype=float)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.degrees(np.arctan2(s, c)))


def rotation_angles_deg(Rs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`rotation_angle_deg` over a stack ``(..., 3, 3)``."""
    c = np.clip((np.trace(Rs, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    v = np.stack(
        [
            Rs[..., 2, 1] - Rs[..., 1, 2],
            Rs[..., 0, 2] - Rs[..., 2, 0],
            Rs[..., 1, 0] - Rs[..., 0, 1],
        ],
        axis=-1,
    )
    s = 0.5 * np.linalg.norm(v, axis=-1)
    return np.degrees(np.arctan2(s, c))


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        S = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
        )
    elif R[1, 1] > R[2, 2]:
        S = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
        )
    else:
        S = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
        )
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def matrix_from_quat(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion; the input is normalized."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation (normalized Gaussian quaternion)."""
    return matrix_from_quat(rng.standard_normal(4))


def yaw_rotation(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def chordal_mean_rotation(Rs) -> np.ndarray:
    """Chordal L2 rotation mean: principal eigenvector of sum(q q^T).

    Sign-invariant in each input quaternion, so no hemisphere alignment of the
    inputs is needed; the output is canonicalized to w >= 0.
    """
    Q = np.array([quat_from_matrix(R) for R in Rs])
    M = Q.T @ Q
    _, vecs = np.linalg.eigh(M)
    q = vecs[:, -1]
    if q[0] < 0:
        q = -q
    return matrix_from_quat(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid pose ``[R|t]``; translation in meters."""

    R: np.ndarray
    t: np.ndarray
    # quaternion as read from a record, re-emitted verbatim so records round-trip
    _q: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R: np.ndarray, C) -> "Pose":
        R = np.asarray(R, dtype=float)
        return cls(R, -R @ np.asarray(C, dtype=float))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def to_record(self) -> dict:
        q = self._q if self._q is not None else quat_from_matrix(self.R)
        return {"q": [float(v) for v in q], "t": [float(v) for v in self.t]}

    @classmethod
    def from_record(cls, rec: dict) -> "Pose":
        q = [float(v) for v in rec["q"]]
        t = [float(v) for v in rec["t"]]
        if len(q) != 4 or len(t) != 3:
            raise ValueError("pose record needs q[4] and t[3]")
        if not all(np.isfinite(q + t)) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("pose record must hold a finite unit quaternion")
        return cls(matrix_from_quat(q), t, tuple(q))

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol))

    def __repr__(self) -> str:
        q = np.round(quat_from_matrix(self.R), 6)
        return f"Pose(q={q.tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class SimTransform:
    """Similarity frame map ``X' = scale * R @ X + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0
    _q: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def apply(self, X) -> np.ndarray:
        return self.scale * (np.asarray(X, dtype=float) @ self.R.T) + self.t

    def inverse(self) -> "SimTransform":
        Rinv = self.R.T
        return SimTransform(Rinv, -(Rinv @ self.t) / self.scale, 1.0 / self.scale)

    def then(self, other: "SimTransform") -> "SimTransform":
        """Transform that applies ``self`` first, then ``other``."""
        return SimTransform(
            other.R @ self.R,
            other.scale * (other.R @ self.t) + other.t,
            other.scale * self.scale,
        )

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.R
        M[:3, 3] = self.t
        return M

    def to_record(self) -> dict:
        q = self._q if self._q is not None else quat_from_matrix(self.R)
        return {"q": [float(v) for v in q], "t": [float(v) for v in self.t], "scale": self.scale}

    @classmethod
    def from_record(cls, rec: dict) -> "SimTransform":
        q = tuple(float(v) for v in rec["q"])
        return cls(matrix_from_quat(q), rec["t"], rec.get("scale", 1.0), q)

    def __repr__(self) -> str:
        q = np.round(quat_from_matrix(self.R), 6)
        return f"SimTransform(s={self.scale:.6g}, q={q.tolist()}, t={np.round(self.t, 6).tolist()})"


@dataclass(frozen=True)
class NoiseSpec:
    """Pose corruption model: half-normal rotation, Gaussian center offset, outliers."""

    sigma_rot_deg: float = 0.0
    sigma_trans_m: float = 0.0
    outlier_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma_rot_deg < 0 or self.sigma_trans_m < 0:
            raise ValueError("noise sigmas must be nonnegative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier_rate must lie in [0, 1]")

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(
            self.sigma_rot_deg * factor, self.sigma_trans_m * factor, self.outlier_rate, self.rng_seed
        )

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)


def compose(a: Pose, b: Pose) -> Pose:
    """Apply ``a`` then ``b``: ``(R_b R_a, R_b t_a + t_b)``."""
    return Pose(b.R @ a.R, b.R @ a.t + b.t)


def apply_transform(T: SimTransform, p: Pose) -> Pose:
    """Re-express pose ``p`` after the frame map ``T``.

    The orientation becomes ``R_p R_T^T`` and the camera center maps as
    ``C' = s R_T C + t_T``. Translation stays in the target frame's units.
    """
    R = p.R @ T.R.T
    C = T.scale * (T.R @ p.center) + T.t
    return Pose(R, -R @ C)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``center`` with optical axis (+z) toward ``target``, y pointing down."""
    C = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - C
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose.from_center(R, C)


def perturb(
    p: Pose,
    spec: NoiseSpec,
    rng: np.random.Generator,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> Pose:
    """Corrupt a pose.

    With probability ``outlier_rate`` the result is a uniformly random pose
    (center uniform in ``bounds``, Haar rotation). Otherwise the camera is
    rotated about its own center by a uniform-axis rotation with angle
    ``|N(0, sigma_rot_deg)|`` and its center shifted by ``N(0, sigma_trans_m I)``.
    The same number of draws is consumed on every call.
    """
    if bounds is None:
        bounds = (np.full(3, -5.0), np.full(3, 5.0))
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)

    u = rng.random()
    axis = rng.standard_normal(3)
    angle = abs(rng.normal(0.0, 1.0)) * spec.sigma_rot_deg
    offset = rng.normal(0.0, 1.0, size=3) * spec.sigma_trans_m
    out_center = lo + rng.random(3) * (hi - lo)
    out_q = rng.standard_normal(4)

    if u < spec.outlier_rate:
        return Pose.from_center(matrix_from_quat(out_q), out_center)
    if spec.sigma_rot_deg == 0.0 and spec.sigma_trans_m == 0.0:
        return p
    axis /= np.linalg.norm(axis)
    dR = exp_so3(axis * np.radians(angle))
    return Pose.from_center(dR @ p.R, p.center + offset)
