"""Stereo geometry, triangulation, depth smoothing and tube-mesh export.

Rig model: both X-ray sources sit at height ``hx`` above the flat detector,
at ``x = -a`` (view A, the warped image) and ``x = +a`` (view B, the target
image). Depth ``z`` of a sample is its distance below the source plane, so a
sample lying on the detector has ``z = hx``. For a point at lateral position
``(x, y)`` and depth ``z`` a source at ``sx`` projects it to the detector at
``sx + (x - sx) * hx / z`` (same form in y with the source at ``y = 0``); the
two projections are ``d = 2a * (hx / z - 1)`` apart, which inverts to
``z = 2a * hx / (d + 2a)``.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write_text
from .errors import GeometryError, MatchError, ParameterError
from .tree import VesselNode, VesselTree

log = logging.getLogger(__name__)


@dataclass
class StereoGeometry:
    hx: float = 1000.0
    a: float = 20.0
    M: np.ndarray = field(default_factory=lambda: np.array([[2.0, 0.0, 256.0], [0.0, 2.0, 256.0], [0.0, 0.0, 1.0]]))
    magnification_correction: bool = False
    """Scale the lateral midpoint by ``z / hx`` (sample plane instead of detector plane)."""
    x_only_disparity: bool = False
    """Use only the x component of the correspondence offset as disparity."""
    legacy_depth_offset: bool = False
    """Subtract 1 from every depth, reproducing a constant offset seen in one printed form of the formula."""

    def __post_init__(self):
        self.M = np.array(self.M, dtype=float).reshape(3, 3)

    def validate(self) -> list[str]:
        errs = []
        if not (math.isfinite(self.hx) and self.hx > 0):
            errs.append(f"geometry.hx must be > 0, got {self.hx}")
        if not (math.isfinite(self.a) and self.a > 0):
            errs.append(f"geometry.a must be > 0, got {self.a}")
        if not np.isfinite(self.M).all() or abs(np.linalg.det(self.M)) < 1e-12:
            errs.append("geometry.M must be a finite invertible 3x3 matrix")
        return errs

    def check(self) -> None:
        errs = self.validate()
        if errs:
            raise GeometryError("; ".join(errs))

    @property
    def M_inv(self) -> np.ndarray:
        if abs(np.linalg.det(self.M)) < 1e-12:
            raise GeometryError("intrinsic matrix M is singular")
        return np.linalg.inv(self.M)

    @property
    def pixel_scale(self) -> float:
        """Pixels per world unit along the detector (geometric mean of the two axes)."""
        return math.sqrt(abs(np.linalg.det(self.M[:2, :2])))


def to_world(M, p_px) -> np.ndarray:
    """Pixel point(s) to world detector-plane coordinates via ``M^-1``."""
    M = np.asarray(M, dtype=float)
    if M.shape != (3, 3) or abs(np.linalg.det(M)) < 1e-12:
        raise GeometryError("intrinsic matrix M must be an invertible 3x3 matrix")
    p = np.asarray(p_px, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    h = np.column_stack([p, np.ones(len(p))]) @ np.linalg.inv(M).T
    w = h[:, :2] / h[:, 2:3]
    return w[0] if single else w


def to_pixels(M, p_w) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    p = np.asarray(p_w, dtype=float)
    single = p.ndim == 1
    p = p.reshape(-1, 2)
    h = np.column_stack([p, np.ones(len(p))]) @ M.T
    out = h[:, :2] / h[:, 2:3]
    return out[0] if single else out


def depth_from_disparity(g: StereoGeometry, d):
    """``z = 2a * hx / (d + 2a)`` for disparity ``d >= 0`` in world units."""
    d_arr = np.asarray(d, dtype=float)
    if (d_arr < 0).any() or not np.isfinite(d_arr).all():
        raise GeometryError("disparity must be finite and >= 0")
    z = 2 * g.a * g.hx / (d_arr + 2 * g.a)
    if g.legacy_depth_offset:
        z = z - 1.0
    return float(z) if z.ndim == 0 else z


def disparity(g: StereoGeometry, pa_w, pb_w) -> np.ndarray:
    diff = np.asarray(pa_w, dtype=float) - np.asarray(pb_w, dtype=float)
    if g.x_only_disparity:
        return np.abs(diff[..., 0])
    return np.linalg.norm(diff, axis=-1)


def triangulate(g: StereoGeometry, pa_w, pb_w) -> np.ndarray:
    """3-D point(s) ``(x, y, z)`` from matched detector-plane points of both views."""
    pa = np.asarray(pa_w, dtype=float)
    pb = np.asarray(pb_w, dtype=float)
    z = np.asarray(depth_from_disparity(g, disparity(g, pa, pb)))
    mid = 0.5 * (pa + pb)
    if g.magnification_correction:
        mid = mid * (z / g.hx)[..., None]
    return np.concatenate([mid, z[..., None]], axis=-1)


# --------------------------------------------------------------------------
# 3-D tree assembly
# --------------------------------------------------------------------------


def _fill_disparity(tree: VesselTree, known: dict[int, np.ndarray]) -> np.ndarray:
    """Per-node B-minus-A offset (world units), interpolated where unmatched.

    Within a branch, unmatched nodes take the arc-length interpolation of the
    nearest matched nodes before and after them; if only one side is
    matched, its value is held. Branches without any matched node copy the
    value of the graph-nearest matched node.
    """
    n = len(tree)
    out = np.full((n, 2), np.nan)
    for i, v in known.items():
        out[i] = v
    pos = tree.positions[:, :2]
    for path in tree.branches():
        have = [k for k, i in enumerate(path) if i in known]
        if not have:
            continue
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos[path], axis=0), axis=1))])
        sk = s[have]
        vals = np.array([known[path[k]] for k in have])
        for k, i in enumerate(path):
            if i in known or not np.isnan(out[i, 0]):
                continue
            out[i] = [np.interp(s[k], sk, vals[:, 0]), np.interp(s[k], sk, vals[:, 1])]
    missing = np.isnan(out[:, 0])
    if missing.any():
        # multi-source BFS from every filled node
        queue = deque(np.nonzero(~missing)[0].tolist())
        while queue:
            i = queue.popleft()
            for j in tree.neighbors(i):
                if np.isnan(out[j, 0]):
                    out[j] = out[i]
                    queue.append(j)
    return out


def build_tree_3d(g: StereoGeometry, tree_a: VesselTree, pairs) -> VesselTree:
    """Reconstruct every node of the (pruned) A tree in 3-D.

    ``pairs`` must reference A nodes by id (``node_a``). Matched nodes are
    triangulated directly; other nodes borrow an interpolated disparity.
    Radii are converted from pixels to world units at each node's depth when
    magnification correction is on, otherwise at detector scale.
    """
    g.check()
    known = {}
    for p in pairs:
        if p.node_a is None:
            continue
        i = tree_a.index_of(p.node_a)
        known[i] = to_world(g.M, p.point_b) - to_world(g.M, p.point_a)
    if not known:
        raise MatchError("no correspondences reference nodes of the A tree")
    offsets = _fill_disparity(tree_a, known)
    pa = to_world(g.M, tree_a.positions[:, :2])
    xyz = triangulate(g, pa, pa + offsets)
    radii = tree_a.radii / g.pixel_scale
    if g.magnification_correction:
        radii = radii * xyz[:, 2] / g.hx
    return _rebuild(tree_a, xyz, radii)


def _rebuild(tree: VesselTree, xyz: np.ndarray, radii) -> VesselTree:
    nodes = [VesselNode(n.id, n.kind, tuple(float(v) for v in xyz[i]), float(radii[i]), n.parent_id)
             for i, n in enumerate(tree.nodes)]
    return VesselTree(nodes, 3)


def smooth_depth(tree: VesselTree, step: float = 10.0) -> VesselTree:
    """Box-filter z along each branch over an arc-length window of width ``step``.

    For each node the window holds the branch nodes whose 3-D arc-length
    distance is at most ``step / 2``; windows are truncated at branch ends.
    Key nodes shared by several branches get the mean of their per-branch
    values. x, y, radii and topology stay unchanged.
    """
    if not step > 0:
        raise ParameterError(f"smoothing step must be > 0, got {step}")
    if tree.dim != 3:
        raise ParameterError("smooth_depth needs a 3-D tree")
    pos = tree.positions
    z = pos[:, 2]
    acc = np.zeros(len(tree))
    cnt = np.zeros(len(tree))
    for path in tree.branches():
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos[path], axis=0), axis=1))])
        zp = z[path]
        csum = np.concatenate([[0.0], np.cumsum(zp)])
        lo = np.searchsorted(s, s - step / 2 - 1e-12, side="left")
        hi = np.searchsorted(s, s + step / 2 + 1e-12, side="right")
        means = (csum[hi] - csum[lo]) / (hi - lo)
        np.add.at(acc, path, means)
        np.add.at(cnt, path, 1)
    out = pos.copy()
    has = cnt > 0
    out[has, 2] = acc[has] / cnt[has]
    return tree.with_positions(out)


# --------------------------------------------------------------------------
# Mesh export
# --------------------------------------------------------------------------


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    """0-based vertex indices, counter-clockwise seen from outside."""

    def to_obj(self, header=()) -> str:
        lines = [f"# {h}" for h in header]
        lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in self.vertices.tolist()]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces.tolist()]
        return "\n".join(lines) + "\n"

    def write_obj(self, path, header=()) -> None:
        atomic_write_text(path, self.to_obj(header))


def mesh_counts(segments: int, ring_segments: int) -> tuple[int, int]:
    """Vertex and triangle counts for ``segments`` capped cylinders."""
    return segments * (2 * ring_segments + 2), segments * 4 * ring_segments


def _frame(axis: np.ndarray):
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    return u, v


def cylinder(p0, p1, radius: float, ring_segments: int):
    """Capped prism from ``p0`` to ``p1``: two rings, then the two cap centres."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    n = ring_segments
    axis = (p1 - p0) / np.linalg.norm(p1 - p0)
    u, v = _frame(axis)
    t = 2 * np.pi * np.arange(n) / n
    ring = radius * (np.cos(t)[:, None] * u + np.sin(t)[:, None] * v)
    verts = np.vstack([p0 + ring, p1 + ring, p0, p1])
    faces = []
    c0, c1 = 2 * n, 2 * n + 1
    for k in range(n):
        k1 = (k + 1) % n
        faces.append((k, k1, n + k1))
        faces.append((k, n + k1, n + k))
        faces.append((c0, k1, k))
        faces.append((c1, n + k, n + k1))
    return verts, np.array(faces, dtype=np.int64)


def mesh_export(tree: VesselTree, ring_segments: int = 12) -> Mesh:
    """One capped cylinder per parent-child segment, using the child's radius.

    Segments with zero radius or zero length are skipped with a warning.
    """
    if ring_segments < 3:
        raise ParameterError(f"ring_segments must be >= 3, got {ring_segments}")
    pos = tree.positions
    if pos.shape[1] == 2:
        pos = np.column_stack([pos, np.zeros(len(pos))])
    verts, faces = [], []
    offset = 0
    zero_r = zero_len = 0
    for i, p in enumerate(tree.parent_index):
        if p < 0:
            continue
        r = tree.nodes[i].radius
        if r <= 0:
            zero_r += 1
            continue
        if np.linalg.norm(pos[i] - pos[p]) == 0:
            zero_len += 1
            continue
        v, f = cylinder(pos[p], pos[i], r, ring_segments)
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    if zero_r:
        log.warning("mesh_export: skipped %d zero-radius segment(s)", zero_r)
    if zero_len:
        log.warning("mesh_export: skipped %d zero-length segment(s)", zero_len)
    if not verts:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return Mesh(np.vstack(verts), np.vstack(faces))
