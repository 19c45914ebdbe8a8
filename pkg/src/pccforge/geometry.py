"""Deterministic geometric kernels.

Sampling, neighborhoods, normal estimation, and the rigid transforms used
to put local patches into a canonical frame. Everything here is a pure
function of its inputs, runs in float64, and breaks ties by lowest index
so results are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

EZ = np.array([0.0, 0.0, 1.0])

# Below this cross-product norm the normal counts as pole-aligned and the
# Rodrigues axis is replaced by a fixed convention.
POLE_EPS = 1e-8

# Two smallest covariance eigenvalues closer than this are treated as equal
# and the normal falls back to a fixed-basis choice.
EIG_TIE_EPS = 1e-12


class PointOrigin(IntEnum):
    PARTIAL = 0
    COARSE = 1


@dataclass
class PointCloud:
    """Points in a normalized unit-scale frame, with optional origin tags."""

    points: np.ndarray
    tags: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite coordinates")
        if self.tags is not None:
            self.tags = np.asarray(self.tags)
            if len(self.tags) != len(self.points):
                raise ValueError("tags length must match points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Patch:
    """k nearest neighbors of a center point, centroid-centered."""

    center_index: int
    neighbor_indices: np.ndarray
    local_coords: np.ndarray
    normal: np.ndarray


@dataclass
class RigidFrame:
    """Per-patch transform record: normal-alignment rotation, in-plane
    rotation, and the symmetry-plane angle."""

    r1: np.ndarray
    r2: np.ndarray
    psi: float


def as_points(cloud) -> np.ndarray:
    """Coerce a PointCloud or array-like to a float64 (N, 3) array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
    return pts


def _sqdist_to(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    d = points - q
    return np.sum(d * d, axis=1)


def farthest_point_sample(cloud, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection.

    Returns n distinct indices beginning at `start`; each subsequent pick
    maximizes the minimum distance to the points already selected. Ties go
    to the lowest index.
    """
    points = as_points(cloud)
    m = len(points)
    if not 1 <= n <= m:
        raise ValueError(f"sample size {n} out of range for {m} points")
    if not 0 <= start < m:
        raise ValueError(f"start index {start} out of range for {m} points")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    if n == 1:
        return selected
    mind = _sqdist_to(points, points[start])
    for i in range(1, n):
        idx = int(np.argmax(mind))
        selected[i] = idx
        np.minimum(mind, _sqdist_to(points, points[idx]), out=mind)
    return selected


def knn(cloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points to `query`, ascending by distance,
    ties by lowest index."""
    points = as_points(cloud)
    if not 1 <= k <= len(points):
        raise ValueError(f"k={k} out of range for {len(points)} points")
    d2 = _sqdist_to(points, np.asarray(query, dtype=np.float64))
    return np.argsort(d2, kind="stable")[:k]


def knn_indices_all(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Neighbor indices of every point within its own cloud, (N, k).

    Row i lists the k nearest points to points[i] (itself included),
    ascending by distance with ties by lowest index.
    """
    points = as_points(points)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} points")
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        diff = points[lo:hi, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        out[lo:hi] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def estimate_normal(local_coords: np.ndarray) -> np.ndarray:
    """Unit normal of a centered patch: covariance eigenvector of smallest
    eigenvalue, sign fixed so the largest-magnitude component is positive."""
    local = np.asarray(local_coords, dtype=np.float64)
    if local.ndim != 2 or local.shape[1] != 3 or len(local) < 3:
        raise ValueError("normal estimation needs at least 3 points of shape (k, 3)")
    return estimate_normals_batch(local[None, :, :])[0]


def estimate_normals_batch(local: np.ndarray) -> np.ndarray:
    """Vectorized normal estimation over a stack of centered patches (P, k, 3)."""
    local = np.asarray(local, dtype=np.float64)
    p, k, _ = local.shape
    if k < 3:
        raise ValueError("patch too small for normal estimation (need k >= 3)")
    centered = local - local.mean(axis=1, keepdims=True)
    spread = np.max(np.abs(centered), axis=(1, 2))
    if np.any(spread < 1e-12):
        raise ValueError("degenerate patch: all points coincide")
    cov = np.einsum("pki,pkj->pij", centered, centered) / (k - 1)
    vecs = _sym3_smallest_eigvec(cov)
    return _fix_normal_signs(vecs)


def _fix_normal_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude component positive; first axis wins ties."""
    mags = np.abs(vecs)
    lead = np.argmax(mags, axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), lead])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def _sym3_eigvals(a: np.ndarray):
    """Closed-form eigenvalues of symmetric 3x3 matrices, ascending.

    Trigonometric solution of the characteristic cubic; no iteration, so
    results are bitwise reproducible.
    """
    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    pnorm = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    safe = np.where(pnorm > 0, pnorm, 1.0)
    b = (a - q[:, None, None] * np.eye(3)) / safe[:, None, None]
    detb = (
        b[:, 0, 0] * (b[:, 1, 1] * b[:, 2, 2] - b[:, 1, 2] * b[:, 2, 1])
        - b[:, 0, 1] * (b[:, 1, 0] * b[:, 2, 2] - b[:, 1, 2] * b[:, 2, 0])
        + b[:, 0, 2] * (b[:, 1, 0] * b[:, 2, 1] - b[:, 1, 1] * b[:, 2, 0])
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * pnorm * np.cos(phi)
    lo = q + 2.0 * pnorm * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    isotropic = pnorm == 0
    hi = np.where(isotropic, q, hi)
    mid = np.where(isotropic, q, mid)
    lo = np.where(isotropic, q, lo)
    return lo, mid, hi


def _sym3_smallest_eigvec(a: np.ndarray) -> np.ndarray:
    """Unit eigenvector for the smallest eigenvalue of each symmetric 3x3
    matrix, with a fixed-basis fallback when the two smallest eigenvalues tie."""
    n = len(a)
    lo, mid, hi = _sym3_eigvals(a)
    eye = np.eye(3)

    # Columns of (A - mid I)(A - hi I) span the smallest eigenspace.
    m = (a - mid[:, None, None] * eye) @ (a - hi[:, None, None] * eye)
    norms = np.linalg.norm(m, axis=1)
    best = np.argmax(norms, axis=1)
    vecs = m[np.arange(n), :, best]
    scale = np.maximum(np.abs(hi), 1.0)
    good = (mid - lo) > EIG_TIE_EPS * scale
    lens = np.linalg.norm(vecs, axis=1)
    good &= lens > 1e-300
    vecs = np.where(good[:, None], vecs / np.where(lens > 0, lens, 1.0)[:, None], 0.0)

    if not np.all(good):
        bad = np.flatnonzero(~good)
        vecs[bad] = _tied_smallest_eigvec(a[bad], lo[bad], mid[bad], hi[bad])
    return vecs


def _tied_smallest_eigvec(a, lo, mid, hi) -> np.ndarray:
    """Deterministic pick inside a degenerate smallest eigenspace.

    When the two smallest eigenvalues coincide the eigenspace is the plane
    orthogonal to the largest eigenvector; project the basis axes onto that
    plane in x, y, z order and keep the first that survives. With all three
    eigenvalues equal the space is isotropic and e_x wins.
    """
    n = len(a)
    eye = np.eye(3)
    out = np.empty((n, 3))
    scale = np.maximum(np.abs(hi), 1.0)
    top_distinct = (hi - mid) > EIG_TIE_EPS * scale
    # Largest eigenvector via the complementary column product.
    m = (a - lo[:, None, None] * eye) @ (a - mid[:, None, None] * eye)
    norms = np.linalg.norm(m, axis=1)
    best = np.argmax(norms, axis=1)
    w = m[np.arange(n), :, best]
    wlen = np.linalg.norm(w, axis=1)
    for i in range(n):
        if not top_distinct[i] or wlen[i] <= 1e-300:
            out[i] = eye[0]
            continue
        wi = w[i] / wlen[i]
        for axis in eye:
            cand = axis - np.dot(axis, wi) * wi
            clen = np.linalg.norm(cand)
            if clen > 1e-8:
                out[i] = cand / clen
                break
    return out


def extract_patch(cloud, center: int, k: int) -> Patch:
    """Neighborhood of cloud[center]: k nearest indices, centroid-subtracted
    coordinates, and an estimated unit normal."""
    points = as_points(cloud)
    if k < 3:
        raise ValueError("patch too small for normal estimation (need k >= 3)")
    idx = knn(points, points[center], k)
    local = points[idx] - points[idx].mean(axis=0)
    return Patch(
        center_index=int(center),
        neighbor_indices=idx,
        local_coords=local,
        normal=estimate_normal(local),
    )


def _skew(k: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -k[2], k[1]],
            [k[2], 0.0, -k[0]],
            [-k[1], k[0], 0.0],
        ]
    )


def rotation_to_z(n: np.ndarray) -> np.ndarray:
    """Rotation matrix mapping the unit vector n onto (0, 0, 1).

    Axis-angle construction: axis is the normalized cross product of n with
    e_z, angle is arccos(n . e_z). At the poles the axis degenerates, so
    n ~ e_z returns the identity and n ~ -e_z a half-turn about e_x.
    """
    n = np.asarray(n, dtype=np.float64)
    cross = np.array([n[1], -n[0], 0.0])
    s = np.hypot(cross[0], cross[1])
    if s < POLE_EPS:
        if n[2] >= 0.0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])
    axis = cross / s
    theta = np.arccos(np.clip(n[2], -1.0, 1.0))
    c = np.cos(theta)
    return c * np.eye(3) + (1.0 - c) * np.outer(axis, axis) + np.sin(theta) * _skew(axis)


def rotations_to_z_batch(normals: np.ndarray) -> np.ndarray:
    """Vectorized rotation_to_z over (P, 3) unit normals -> (P, 3, 3)."""
    n = np.asarray(normals, dtype=np.float64)
    p = len(n)
    cross = np.stack([n[:, 1], -n[:, 0], np.zeros(p)], axis=1)
    s = np.hypot(cross[:, 0], cross[:, 1])
    regular = s >= POLE_EPS
    axis = cross / np.where(regular, s, 1.0)[:, None]
    theta = np.arccos(np.clip(n[:, 2], -1.0, 1.0))
    c = np.cos(theta)
    sn = np.sin(theta)
    kx, ky = axis[:, 0], axis[:, 1]
    zero = np.zeros(p)
    out = np.empty((p, 3, 3))
    # cos(t) I + (1 - cos(t)) k k^T + sin(t) [k]_x with k_z = 0
    out[:, 0, 0] = c + (1 - c) * kx * kx
    out[:, 0, 1] = (1 - c) * kx * ky
    out[:, 0, 2] = sn * ky
    out[:, 1, 0] = (1 - c) * ky * kx
    out[:, 1, 1] = c + (1 - c) * ky * ky
    out[:, 1, 2] = -sn * kx
    out[:, 2, 0] = -sn * ky
    out[:, 2, 1] = sn * kx
    out[:, 2, 2] = c + zero
    if not np.all(regular):
        pole = ~regular
        north = pole & (n[:, 2] >= 0)
        south = pole & (n[:, 2] < 0)
        out[north] = np.eye(3)
        out[south] = np.diag([1.0, -1.0, -1.0])
    return out


def rotation_about_z(phi: float) -> np.ndarray:
    """Rotation by phi radians about e_z."""
    if not np.isfinite(phi):
        raise ValueError("rotation angle must be finite")
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_z_from_cs(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched rotation about e_z from unit (cos, sin) pairs -> (P, 3, 3)."""
    p = len(c)
    out = np.zeros((p, 3, 3))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s
    out[:, 1, 0] = s
    out[:, 1, 1] = c
    out[:, 2, 2] = 1.0
    return out


def reflect_about_plane(points: np.ndarray, psi: float) -> np.ndarray:
    """Reflect points across the plane through the origin whose normal is
    (cos psi, sin psi, 0)."""
    pts = np.asarray(points, dtype=np.float64)
    npl = np.array([np.cos(psi), np.sin(psi), 0.0])
    proj = pts @ npl
    return pts - 2.0 * proj[..., None] * npl


def reflection_from_cs(c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Batched Householder reflection matrices for in-plane normals
    (c, s, 0) -> (P, 3, 3). Symmetric and involutive."""
    p = len(c)
    out = np.zeros((p, 3, 3))
    out[:, 0, 0] = 1.0 - 2.0 * c * c
    out[:, 0, 1] = -2.0 * c * s
    out[:, 1, 0] = -2.0 * c * s
    out[:, 1, 1] = 1.0 - 2.0 * s * s
    out[:, 2, 2] = 1.0
    return out


def invert_frame(offset: np.ndarray, frame: RigidFrame) -> np.ndarray:
    """Map an offset from the canonical patch frame back to world axes.

    The forward canonicalization rotates by r1 then r2, so the inverse is
    r1^T r2^T applied in that order.
    """
    off = np.asarray(offset, dtype=np.float64)
    return frame.r1.T @ (frame.r2.T @ off)


def pairwise_sqdist(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Exact squared Euclidean distances between row sets, (len(a), len(b)).

    Computed from explicit coordinate differences (not the expanded
    quadratic form) so tiny distances keep full precision.
    """
    a = as_points(a)
    b = as_points(b)
    out = np.empty((len(a), len(b)))
    for lo in range(0, len(a), chunk):
        hi = min(lo + chunk, len(a))
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.einsum("ijk,ijk->ij", diff, diff)
    return out
