"""Seeded synthetic vessel trees, stereo projection and rasterization.

Trees are grown in world units. Each branch is a straight run, optionally
bent once by a sharp corner, sampled every ``node_spacing`` along its arc
length. Depth varies linearly along every branch between values drawn from
the tree spec's z range, so the two projections differ by a smooth non-rigid
warp.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .errors import GeometryError, ParameterError
from .match import BIFURCATION_PAIR, DENSE_PAIR, Correspondence, CorrespondenceSet
from .reconstruct import StereoGeometry, to_pixels
from .tree import BIFURCATION, VesselTree

log = logging.getLogger(__name__)

MODES = ("binary", "comb")


@dataclass
class TreeSpec:
    name: str = "custom"
    seed: int = 0
    mode: str = "binary"
    """``binary``: every branch below ``depth`` forks in two. ``comb``: a trunk of
    ``depth`` runs with one unbranched side vessel at every trunk joint."""
    depth: int = 3
    branch_length: tuple = (40.0, 55.0)
    branch_angle: tuple = (25.0, 40.0)
    """Deviation of each child from its parent's heading, degrees."""
    radius: tuple = (1.2, 1.8)
    z_range: tuple = (600.0, 700.0)
    corner_count: int = 0
    corner_angle: tuple = (45.0, 70.0)
    node_spacing: float = 1.0
    root: tuple = (0.0, -58.0)
    heading: float = 90.0
    extent: float = 60.0
    """Every node must satisfy ``|x|, |y| <= extent``."""
    clearance: float = 8.0
    """Minimum lateral distance between points that are far apart along the tree."""
    max_attempts: int = 500

    def validate(self) -> list[str]:
        errs = []

        def rng_ok(name, lo_min=None):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                errs.append(f"spec {self.name}: {name} range must be (lo <= hi), got {(lo, hi)}")
            if lo_min is not None and lo < lo_min:
                errs.append(f"spec {self.name}: {name} must be >= {lo_min}")

        if self.mode not in MODES:
            errs.append(f"spec {self.name}: mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 1:
            errs.append(f"spec {self.name}: depth must be >= 1")
        rng_ok("branch_length", 1e-9)
        rng_ok("branch_angle", 0.0)
        rng_ok("radius", 0.0)
        rng_ok("corner_angle", 0.0)
        zlo, zhi = self.z_range
        if not 0 < zlo <= zhi:
            errs.append(f"spec {self.name}: z_range must satisfy 0 < z_min <= z_max, got {self.z_range}")
        if self.corner_count < 0:
            errs.append(f"spec {self.name}: corner_count must be >= 0")
        if self.node_spacing <= 0:
            errs.append(f"spec {self.name}: node_spacing must be > 0")
        return errs


SHIPPED_SPECS = {
    "fork": TreeSpec(name="fork", seed=11, depth=3, branch_length=(34.0, 40.0), branch_angle=(22.0, 32.0)),
    "comb": TreeSpec(name="comb", seed=23, mode="comb", depth=4, branch_length=(26.0, 30.0),
                     branch_angle=(55.0, 70.0)),
    "zigzag-corner": TreeSpec(name="zigzag-corner", seed=37, depth=2, branch_length=(50.0, 58.0),
                              branch_angle=(28.0, 38.0), corner_count=3),
    "wide-angle": TreeSpec(name="wide-angle", seed=41, depth=3, branch_length=(30.0, 36.0),
                           branch_angle=(55.0, 75.0)),
}


# --------------------------------------------------------------------------
# Tree generation
# --------------------------------------------------------------------------


@dataclass
class _Branch:
    start: np.ndarray
    heading: float
    length: float
    radius: float
    z0: float
    z1: float
    parent: int
    corner: tuple | None = None
    """(fraction along the branch, turn in degrees)."""
    end_heading: float = 0.0
    points: np.ndarray = field(default=None, repr=False)


def _branch_points(b: _Branch, spacing: float) -> np.ndarray:
    """Nodes after the start point, with the corner vertex and the end kept exactly."""
    h0 = math.radians(b.heading)
    if b.corner is None:
        verts = [b.start, b.start + b.length * np.array([math.cos(h0), math.sin(h0)])]
        b.end_heading = b.heading
    else:
        frac, turn = b.corner
        mid = b.start + frac * b.length * np.array([math.cos(h0), math.sin(h0)])
        h1 = math.radians(b.heading + turn)
        verts = [b.start, mid, mid + (1 - frac) * b.length * np.array([math.cos(h1), math.sin(h1)])]
        b.end_heading = b.heading + turn
    pts = []
    for p, q in zip(verts, verts[1:]):
        seg = np.linalg.norm(q - p)
        n = max(1, int(math.ceil(seg / spacing - 1e-9)))
        t = np.arange(1, n + 1) / n
        pts.append(p + t[:, None] * (q - p))
    xy = np.vstack(pts)
    s = np.linalg.norm(np.diff(np.vstack([b.start, xy]), axis=0), axis=1).cumsum()
    z = b.z0 + (b.z1 - b.z0) * s / s[-1]
    return np.column_stack([xy, z])


def _grow(spec: TreeSpec, rng: np.random.Generator) -> list[_Branch]:
    def sample(r):
        return float(rng.uniform(*r))

    branches: list[_Branch] = []

    def add(start, heading, z0, parent, radius_cap):
        b = _Branch(np.asarray(start, float), heading, sample(spec.branch_length),
                    min(sample(spec.radius), radius_cap), z0, sample(spec.z_range), parent)
        branches.append(b)
        return len(branches) - 1

    # topology first (breadth-first), geometry after corners are placed
    plan = [(-1, 0.0, 1)]  # (parent, turn relative to parent end heading, level)
    if spec.mode == "binary":
        k = 0
        while k < len(plan):
            parent, _, level = plan[k]
            if level < spec.depth:
                plan.append((k, sample(spec.branch_angle), level + 1))
                plan.append((k, -sample(spec.branch_angle), level + 1))
            k += 1
    else:
        side = 1.0 if rng.random() < 0.5 else -1.0
        trunk = 0
        for level in range(2, spec.depth + 1):
            plan.append((trunk, float(rng.uniform(-8.0, 8.0)), level))
            nxt = len(plan) - 1
            plan.append((trunk, side * sample(spec.branch_angle), level))
            side = -side
            trunk = nxt

    corners = {}
    if spec.corner_count:
        picks = rng.choice(len(plan), size=min(spec.corner_count, len(plan)), replace=False)
        for p in sorted(int(v) for v in picks):
            sign = 1.0 if rng.random() < 0.5 else -1.0
            corners[p] = (float(rng.uniform(0.35, 0.65)), sign * sample(spec.corner_angle))

    for k, (parent, turn, _) in enumerate(plan):
        if parent < 0:
            add(spec.root, spec.heading, sample(spec.z_range), -1, math.inf)
        else:
            pb = branches[parent]
            add(pb.points[-1, :2], pb.end_heading + turn, float(pb.points[-1, 2]), parent, pb.radius)
        b = branches[k]
        b.corner = corners.get(k)
        b.points = _branch_points(b, spec.node_spacing)
    return branches


def _assemble(spec: TreeSpec, branches: list[_Branch]) -> VesselTree:
    root = branches[0]
    positions = [np.array([*root.start, root.z0])]
    parents = [-1]
    radii = [root.radius]
    end_index = []
    for b in branches:
        prev = 0 if b.parent < 0 else end_index[b.parent]
        for p in b.points:
            positions.append(p)
            parents.append(prev)
            radii.append(b.radius)
            prev = len(positions) - 1
        end_index.append(prev)
    return VesselTree.from_arrays(np.array(positions), parents, radii)


def _acceptable(spec: TreeSpec, tree: VesselTree) -> bool:
    xy = tree.positions[:, :2]
    if np.abs(xy).max() > spec.extent:
        return False
    n = len(tree)
    par = tree.parent_index
    rows = [i for i in range(n) if par[i] >= 0]
    w = [float(np.linalg.norm(xy[i] - xy[par[i]])) for i in rows]
    graph = csr_matrix((w, (rows, [par[i] for i in rows])), shape=(n, n))
    geo = shortest_path(graph, directed=False)
    lateral = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    close = (lateral < spec.clearance) & (geo > 3 * spec.clearance)
    return not close.any()


def gen_tree(spec: TreeSpec) -> VesselTree:
    """Deterministic 3-D vessel tree for ``spec``.

    Layouts that leave the ``extent`` box or bring distant parts of the tree
    within ``clearance`` of each other are redrawn from the same random
    stream, so the result depends only on the tree spec.

    A binary spec of depth ``d`` has ``2**d - 1`` branches and
    ``2**(d-1) - 1`` bifurcations; a comb of depth ``d`` has ``2d - 1``
    branches and ``d - 1`` bifurcations.
    """
    errs = spec.validate()
    if errs:
        raise ParameterError("; ".join(errs))
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.max_attempts):
        tree = _assemble(spec, _grow(spec, rng))
        if _acceptable(spec, tree):
            return tree
    raise ParameterError(f"spec {spec.name}: no layout within extent/clearance after {spec.max_attempts} attempts")


# --------------------------------------------------------------------------
# Projection
# --------------------------------------------------------------------------


def project_points(g: StereoGeometry, source_x: float, xyz) -> np.ndarray:
    """Pixel coordinates of 3-D points seen from the source at ``(source_x, 0, hx)``."""
    p = np.asarray(xyz, dtype=float).reshape(-1, 3)
    z = p[:, 2]
    if (z <= 0).any() or (z > g.hx).any():
        raise GeometryError(f"depth outside (0, hx={g.hx}] for projection")
    scale = g.hx / z
    det = np.column_stack([source_x + (p[:, 0] - source_x) * scale, p[:, 1] * scale])
    return to_pixels(g.M, det)


def project(g: StereoGeometry, source_x: float, tree3d: VesselTree) -> VesselTree:
    """2-D pixel tree with the same topology; radii scaled by magnification."""
    pos = tree3d.positions
    px = project_points(g, source_x, pos)
    radii = tree3d.radii * g.hx / pos[:, 2] * g.pixel_scale
    return tree3d.with_positions(px).with_radii(radii)


@dataclass
class ProjectedTree:
    tree3d: VesselTree
    tree_a: VesselTree
    """View from the source at ``-a`` (warped image)."""
    tree_b: VesselTree
    """View from the source at ``+a`` (target image)."""
    gt: CorrespondenceSet
    true_z: np.ndarray


def project_pair(g: StereoGeometry, tree3d: VesselTree) -> ProjectedTree:
    ta = project(g, -g.a, tree3d)
    tb = project(g, g.a, tree3d)
    gt = CorrespondenceSet()
    for na, nb in zip(ta.nodes, tb.nodes):
        prov = BIFURCATION_PAIR if na.kind == BIFURCATION else DENSE_PAIR
        gt.add(Correspondence(na.position, nb.position, prov, na.id, nb.id))
    return ProjectedTree(tree3d, ta, tb, gt, tree3d.positions[:, 2].copy())


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


@dataclass
class RenderStyle:
    vessel: float = 180.0
    background: float = 100.0
    bone: float = 240.0
    noise_sigma: float = 3.0
    """Gray levels (out of 255)."""
    bone_center: tuple = (0.86, 0.86)
    """Disk centre as fractions of (width, height)."""
    bone_radius: float = 0.06
    """Disk radius as a fraction of the canvas width."""

    def validate(self) -> list[str]:
        errs = []
        for name in ("vessel", "background", "bone"):
            if not 0 <= getattr(self, name) <= 255:
                errs.append(f"render.{name} must be in [0, 255]")
        if self.noise_sigma < 0:
            errs.append("render.noise_sigma must be >= 0")
        if self.bone_radius < 0:
            errs.append("render.bone_radius must be >= 0")
        return errs


def stroke_coverage(tree2d: VesselTree, shape) -> np.ndarray:
    """Anti-aliased capsule coverage in [0, 1] for every parent-child segment.

    A pixel centre at distance ``t`` from the segment axis gets coverage
    ``clip(r + 0.5 - t, 0, 1)`` with ``r`` the mean of the two node radii.
    """
    h, w = shape
    cov = np.zeros(shape)
    pos = tree2d.positions
    radii = tree2d.radii
    clipped = False
    for i, p in enumerate(tree2d.parent_index):
        if p < 0:
            continue
        a, b = pos[p], pos[i]
        r = 0.5 * (radii[p] + radii[i])
        pad = r + 1.0
        x0, x1 = int(math.floor(min(a[0], b[0]) - pad)), int(math.ceil(max(a[0], b[0]) + pad))
        y0, y1 = int(math.floor(min(a[1], b[1]) - pad)), int(math.ceil(max(a[1], b[1]) + pad))
        if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
            clipped = True
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(float)
        ab = b - a
        L2 = float(ab @ ab)
        t = np.zeros_like(xx) if L2 == 0 else np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / L2, 0, 1)
        dist = np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))
        c = np.clip(r + 0.5 - dist, 0.0, 1.0)
        np.maximum(cov[y0:y1 + 1, x0:x1 + 1], c, out=cov[y0:y1 + 1, x0:x1 + 1])
    if clipped:
        log.warning("rasterize: geometry extends past the canvas and was clipped")
    return cov


def rasterize(tree2d: VesselTree | None, canvas=(512, 512), clutter: str = "none",
              style: RenderStyle | None = None, seed: int = 0) -> np.ndarray:
    """Render a projected tree to an 8-bit image.

    ``canvas`` is ``(height, width)``. Vessel contrast and the optional
    sharp-edged bone disk add to the flat background, then Gaussian noise is
    added and the result rounded and clipped to [0, 255].
    """
    style = style or RenderStyle()
    errs = style.validate()
    if clutter not in ("none", "bone_disk"):
        errs.append(f"clutter must be 'none' or 'bone_disk', got {clutter!r}")
    if errs:
        raise ParameterError("; ".join(errs))
    h, w = canvas
    img = np.full((h, w), float(style.background))
    if tree2d is not None and len(tree2d) > 1:
        img += (style.vessel - style.background) * stroke_coverage(tree2d, (h, w))
    if clutter == "bone_disk":
        yy, xx = np.mgrid[0:h, 0:w]
        cx, cy = style.bone_center[0] * w, style.bone_center[1] * h
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 <= (style.bone_radius * w) ** 2
        img += (style.bone - style.background) * disk
    if style.noise_sigma > 0:
        img += np.random.default_rng(seed).normal(0.0, style.noise_sigma, size=(h, w))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class SynthCase:
    spec: TreeSpec
    projected: ProjectedTree
    image_a: np.ndarray
    image_b: np.ndarray


def make_case(spec: TreeSpec, g: StereoGeometry, canvas=(512, 512), clutter: str = "none",
              style: RenderStyle | None = None, noise_seed: int = 0) -> SynthCase:
    """Generate, project and render one stereo pair; noise seeds differ per view."""
    tree3d = gen_tree(spec)
    pt = project_pair(g, tree3d)
    img_a = rasterize(pt.tree_a, canvas, clutter, style, seed=noise_seed)
    img_b = rasterize(pt.tree_b, canvas, clutter, style, seed=noise_seed + 1)
    return SynthCase(spec, pt, img_a, img_b)
