"""Point-cloud and rigid-motion primitives.

Clouds live in normalized object scale (bounding box centered at the
origin, diagonal length 1). Rotations are plain 3x3 numpy arrays; the
SE(3) helpers use the closed-form Rodrigues / V-matrix expressions so
interpolation is exact at both endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ROTATION_TOL = 1e-5


class DegenerateGeometry(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    labels: Optional[np.ndarray] = None
    flow: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be Nx3, got {self.positions.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.flow is not None:
            self.flow = np.asarray(self.flow, dtype=np.float64)

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class RigidMotion:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other):
        """Motion equivalent to applying `other` first, then self."""
        return RigidMotion(self.rotation @ other.rotation,
                           self.rotation @ other.translation + self.translation)

    def inverse(self):
        return RigidMotion(self.rotation.T, -self.rotation.T @ self.translation)

    def to_hom(self):
        h = np.eye(4)
        h[:3, :3] = self.rotation
        h[:3, 3] = self.translation
        return h

    @classmethod
    def from_hom(cls, h):
        h = np.asarray(h, dtype=np.float64)
        return cls(h[:3, :3].copy(), h[:3, 3].copy())

    def is_valid(self, tol=ROTATION_TOL):
        r = self.rotation
        return (np.abs(r.T @ r - np.eye(3)).max() < tol
                and abs(np.linalg.det(r) - 1.0) < tol)


def is_rotation(r, tol=ROTATION_TOL):
    r = np.asarray(r)
    return (np.abs(r.T @ r - np.eye(3)).max() < tol
            and abs(np.linalg.det(r) - 1.0) < tol)


# -- normalization -----------------------------------------------------------

def normalization_params(positions):
    """Bounding-box center and diagonal length of a cloud."""
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return (lo + hi) / 2.0, diag


def normalize_cloud(pc: PointCloud) -> PointCloud:
    """Center the bounding box at the origin and scale its diagonal to 1."""
    if len(pc) < 2:
        raise DegenerateGeometry("normalize_cloud needs at least 2 points")
    center, diag = normalization_params(pc.positions)
    if diag < 1e-12:
        raise DegenerateGeometry("all points coincident")
    pos = (pc.positions - center) / diag
    flow = None if pc.flow is None else pc.flow / diag
    labels = None if pc.labels is None else pc.labels.copy()
    return PointCloud(pos, labels, flow)


# -- sampling and neighborhoods ----------------------------------------------

def farthest_point_sample(positions, m, seed_index=0):
    """Greedy farthest-point subset of size m, seeded at `seed_index`.

    Each pick maximizes the distance to the already-chosen set; ties go
    to the lowest index so results are reproducible.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if m > n:
        raise ValueError(f"cannot sample {m} points from {n}")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    dist = np.linalg.norm(positions - positions[seed_index], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(positions - positions[nxt], axis=1))
    return chosen


def ball_query(positions, centers, radius, cap):
    """Indices of up to `cap` points within `radius` of each center.

    Members are ordered by distance (ties to lowest index) and padded by
    repeating the nearest member so every group has fixed width `cap`.
    """
    positions = np.asarray(positions, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if positions.shape[0] == 0:
        raise ValueError("empty cloud")
    if radius <= 0:
        raise ValueError("radius must be positive")
    d = np.linalg.norm(centers[:, None, :] - positions[None, :, :], axis=2)
    groups = np.empty((centers.shape[0], cap), dtype=np.int64)
    for i in range(centers.shape[0]):
        inside = np.nonzero(d[i] <= radius)[0]
        if inside.size == 0:
            inside = np.array([int(np.argmin(d[i]))])
        order = np.lexsort((inside, d[i, inside]))
        members = inside[order][:cap]
        if members.size < cap:
            members = np.concatenate([members, np.full(cap - members.size, members[0])])
        groups[i] = members
    return groups


def knn(positions, k):
    """k nearest neighbors of each point, excluding the point itself."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("empty cloud")
    if k < 1 or k > n - 1:
        raise ValueError(f"need 1 <= k <= {n - 1}, got {k}")
    d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    idx = np.arange(n)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((idx, d[i]))
        out[i] = order[:k]
    return out


def neighborhoods(pc: PointCloud, mode, radius=None, k=None, cap=None):
    if mode == "ball":
        if radius is None or cap is None:
            raise ValueError("ball mode needs radius and cap")
        return ball_query(pc.positions, pc.positions, radius, cap)
    if mode == "knn":
        if k is None:
            raise ValueError("knn mode needs k")
        return knn(pc.positions, k)
    raise ValueError(f"unknown neighborhood mode {mode!r}")


# -- rigid fitting -----------------------------------------------------------

def project_to_rotation(m):
    """Frobenius-nearest rotation to a 3x3 matrix.

    Returns (rotation, degenerate): the flag is set when the smallest
    singular value is below 1e-9, where the projection is ill-defined.
    """
    m = np.asarray(m, dtype=np.float64)
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return r, bool(s[-1] < 1e-9)


def kabsch_fit(src, dst, weights=None):
    """Weighted least-squares rigid motion aligning src onto dst.

    Minimizes sum_i w_i ||R src_i + t - dst_i||^2. Returns
    (RigidMotion, degenerate); degenerate inputs (fewer than 3 points or
    collinear support) yield the identity motion with the flag set.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape:
        raise ValueError(f"kabsch_fit: shapes disagree: {src.shape} vs {dst.shape}")
    n = src.shape[0]
    if weights is None:
        weights = np.ones(n)
    w = np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if n < 3 or wsum <= 0:
        return RigidMotion(), True
    w = w / wsum
    cs = w @ src
    cd = w @ dst
    a = src - cs
    b = dst - cd
    h = (a * w[:, None]).T @ b
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-9 * max(1.0, s[0]):
        return RigidMotion(), True
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cd - r @ cs
    return RigidMotion(r, t), False


# -- SO(3) / SE(3) -----------------------------------------------------------

def _skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def rot_exp(w):
    """Rodrigues formula: axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def rot_log(r):
    """Axis-angle vector of a rotation; rejects the 180-degree branch."""
    r = np.asarray(r, dtype=np.float64)
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    if theta > np.pi - 1e-6:
        raise DegenerateGeometry("rotation angle at pi: log branch ambiguous")
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-8:
        return 0.5 * v * (1.0 + theta * theta / 6.0)
    return theta / (2.0 * np.sin(theta)) * v


def _v_matrix(w):
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    a = (1.0 - np.cos(theta)) / (theta * theta)
    b = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + a * k + b * (k @ k)


def _v_inverse(w):
    theta = np.linalg.norm(w)
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    coef = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / (theta * theta)
    return np.eye(3) - 0.5 * k + coef * (k @ k)


def se3_exp(xi):
    """Twist (v, w) to a 4x4 homogeneous transform."""
    xi = np.asarray(xi, dtype=np.float64)
    v, w = xi[:3], xi[3:]
    h = np.eye(4)
    h[:3, :3] = rot_exp(w)
    h[:3, 3] = _v_matrix(w) @ v
    return h


def se3_log(h):
    """Twist coordinates (v, w) of a homogeneous transform."""
    h = np.asarray(h, dtype=np.float64)
    w = rot_log(h[:3, :3])
    v = _v_inverse(w) @ h[:3, 3]
    return np.concatenate([v, w])


def hom_inverse(h):
    r = h[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ h[:3, 3]
    return out


def se3_interp(hi, hj, t):
    """Geodesic interpolation exp(t log(Hj Hi^-1)) Hi for t in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter must lie in [0, 1], got {t}")
    hi = np.asarray(hi, dtype=np.float64)
    hj = np.asarray(hj, dtype=np.float64)
    if t == 0.0:
        return hi.copy()
    xi = se3_log(hj @ hom_inverse(hi))
    return se3_exp(t * xi) @ hi


def sample_so3_grid(n=48):
    """Deterministic well-spread rotations: the 24 cube symmetries plus
    copies offset by powers of a fixed generic rotation.

    The list starts at the identity; any prefix is a valid smaller grid.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    base = []
    from itertools import permutations
    for perm in permutations(range(3)):
        p = np.zeros((3, 3))
        for row, col in enumerate(perm):
            p[row, col] = 1.0
        for sx in (1.0, -1.0):
            for sy in (1.0, -1.0):
                for sz in (1.0, -1.0):
                    r = np.diag([sx, sy, sz]) @ p
                    if np.linalg.det(r) > 0:
                        base.append(r)
    base.sort(key=lambda r: (-np.trace(r),) + tuple(np.round(r.reshape(-1), 9)))
    axis = np.array([1.0, 0.62, 0.34])
    axis /= np.linalg.norm(axis)
    offset = rot_exp(0.53 * axis)
    out = []
    block = np.eye(3)
    while len(out) < n:
        out.extend(block @ r for r in base)
        block = offset @ block
    return [r.copy() for r in out[:n]]


# -- ASCII formats -----------------------------------------------------------

LABEL_PALETTE = np.array([
    [228, 26, 28], [55, 126, 184], [77, 175, 74], [152, 78, 163],
    [255, 127, 0], [255, 255, 51], [166, 86, 40], [247, 129, 191],
    [153, 153, 153], [66, 206, 227],
], dtype=np.int64)


def write_xyz(path, pc: PointCloud):
    """Write "x y z [label]" rows."""
    with open(path, "w") as fh:
        for i, p in enumerate(pc.positions):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if pc.labels is not None:
                row += f" {int(pc.labels[i])}"
            fh.write(row + "\n")


def read_xyz(path):
    positions = []
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
            try:
                positions.append([float(v) for v in parts[:3]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if len(parts) == 4:
                labels.append(int(parts[3]))
    if labels and len(labels) != len(positions):
        raise ValueError(f"{path}: labels present on only some rows")
    return PointCloud(np.array(positions),
                      np.array(labels, dtype=np.int64) if labels else None)


def write_ply(path, positions, labels=None):
    """ASCII PLY with per-point color (label palette, gray if unlabeled)."""
    positions = np.asarray(positions)
    n = positions.shape[0]
    if labels is None:
        colors = np.full((n, 3), 180, dtype=np.int64)
    else:
        colors = LABEL_PALETTE[np.asarray(labels) % len(LABEL_PALETTE)]
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(positions, colors):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")
