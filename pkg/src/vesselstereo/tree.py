"""Vessel trees: skeleton thinning, graph tracing, radius estimation and SWC I/O.

A :class:`VesselTree` stores nodes in SWC order (every parent precedes its
children). Positions are ``(x, y)`` pixels for traced 2-D trees and
``(x, y, z)`` world units for reconstructed 3-D trees. Node kinds follow the
graph degree: 1 terminal, 2 edge, 3 or more bifurcation (the root counts only
its children, so a root with one child is a terminal).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import networkx as nx
import numpy as np
from scipy import ndimage as ndi

from .errors import SwcParseError, TreeError

log = logging.getLogger(__name__)

TERMINAL, EDGE, BIFURCATION = "terminal", "edge", "bifurcation"
SWC_TYPE = 7


def kind_for_degree(degree: int) -> str:
    if degree <= 1:
        return TERMINAL
    if degree == 2:
        return EDGE
    return BIFURCATION


@dataclass(frozen=True)
class VesselNode:
    id: int
    kind: str
    position: tuple
    radius: float
    parent_id: int


class VesselTree:
    """Rooted tree of :class:`VesselNode` in topological (SWC) order."""

    def __init__(self, nodes, dim: int):
        if dim not in (2, 3):
            raise TreeError(f"dimensionality must be 2 or 3, got {dim}")
        self.nodes = list(nodes)
        self.dim = dim
        # set by from_graph / trace
        self.source_keys = None
        self.cycle_breaks = 0
        self._index = {}
        roots = 0
        for i, n in enumerate(self.nodes):
            if n.id < 1:
                raise TreeError(f"node id must be >= 1, got {n.id}")
            if n.id in self._index:
                raise TreeError(f"duplicate node id {n.id}")
            if len(n.position) != dim:
                raise TreeError(f"node {n.id} has a {len(n.position)}-D position in a {dim}-D tree")
            if not n.radius >= 0:
                raise TreeError(f"node {n.id} has negative radius {n.radius}")
            if n.parent_id == -1:
                roots += 1
            elif n.parent_id not in self._index:
                raise TreeError(f"node {n.id} references parent {n.parent_id} that does not precede it")
            self._index[n.id] = i
        if self.nodes and roots != 1:
            raise TreeError(f"tree must have exactly one root, found {roots}")
        parent = [self._index[n.parent_id] if n.parent_id != -1 else -1 for n in self.nodes]
        self._parent = parent
        children = [[] for _ in self.nodes]
        for i, p in enumerate(parent):
            if p >= 0:
                children[p].append(i)
        self._children = children
        for i, n in enumerate(self.nodes):
            expect = kind_for_degree(len(children[i]) + (parent[i] >= 0))
            if n.kind != expect:
                raise TreeError(f"node {n.id} labelled {n.kind!r} but its degree implies {expect!r}")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_arrays(cls, positions, parents, radii=None, ids=None) -> "VesselTree":
        """Build from per-node arrays; ``parents`` holds 0-based indices (-1 for the root)."""
        pos = np.asarray(positions, dtype=float)
        if pos.ndim != 2:
            raise TreeError("positions must be an (n, dim) array")
        n = len(pos)
        parents = [int(p) for p in parents]
        radii = np.zeros(n) if radii is None else np.asarray(radii, dtype=float)
        ids = list(range(1, n + 1)) if ids is None else [int(i) for i in ids]
        degree = [0] * n
        for i, p in enumerate(parents):
            if p >= 0:
                if p >= i:
                    raise TreeError(f"parent index {p} of node {i} does not precede it")
                degree[p] += 1
                degree[i] += 1
        nodes = [
            VesselNode(ids[i], kind_for_degree(degree[i]), tuple(float(v) for v in pos[i]),
                       float(radii[i]), ids[parents[i]] if parents[i] >= 0 else -1)
            for i in range(n)
        ]
        return cls(nodes, pos.shape[1])

    @classmethod
    def from_graph(cls, adjacency, positions, root, radii=None) -> "VesselTree":
        """Root an acyclic undirected graph and number it in depth-first preorder.

        ``adjacency`` maps node key to neighbour keys, ``positions`` node key to
        coordinates. Children are visited in ascending reversed-coordinate
        order, i.e. by ``(y, x)`` for 2-D trees.
        """
        order, parent_of = [], {root: None}
        stack = [root]
        while stack:
            u = stack.pop()
            order.append(u)
            kids = [v for v in adjacency[u] if v != parent_of[u]]
            for v in kids:
                if v in parent_of:
                    raise TreeError("graph contains a cycle")
                parent_of[v] = u
            kids.sort(key=lambda k: tuple(reversed(tuple(positions[k]))), reverse=True)
            stack.extend(kids)
        idx = {k: i for i, k in enumerate(order)}
        parents = [idx[parent_of[k]] if parent_of[k] is not None else -1 for k in order]
        pos = [positions[k] for k in order]
        rad = None if radii is None else [radii[k] for k in order]
        tree = cls.from_arrays(pos, parents, rad)
        tree.source_keys = order
        return tree

    # -- accessors --------------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        return isinstance(other, VesselTree) and self.dim == other.dim and self.nodes == other.nodes

    def __repr__(self) -> str:
        c = self.kind_counts()
        return (f"VesselTree({len(self)} nodes, {self.dim}D, {c[BIFURCATION]} bifurcations, "
                f"{c[TERMINAL]} terminals)")

    def index_of(self, node_id: int) -> int:
        return self._index[node_id]

    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def positions(self) -> np.ndarray:
        return np.array([n.position for n in self.nodes], dtype=float).reshape(len(self.nodes), self.dim)

    @property
    def radii(self) -> np.ndarray:
        return np.array([n.radius for n in self.nodes], dtype=float)

    @property
    def parent_index(self) -> list[int]:
        return self._parent

    @property
    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def children(self, i: int) -> list[int]:
        return self._children[i]

    def neighbors(self, i: int) -> list[int]:
        p = self._parent[i]
        return ([p] if p >= 0 else []) + self._children[i]

    def adjacency(self) -> dict[int, list[int]]:
        parent = self.parent_index
        adj = {i: list(self._children[i]) for i in range(len(self))}
        for i, p in enumerate(parent):
            if p >= 0:
                adj[i].append(p)
        return adj

    def kind_counts(self) -> dict[str, int]:
        counts = {TERMINAL: 0, EDGE: 0, BIFURCATION: 0}
        for n in self.nodes:
            counts[n.kind] += 1
        return counts

    def bifurcations(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind == BIFURCATION]

    def is_key(self, i: int) -> bool:
        return self.nodes[i].kind != EDGE or self.nodes[i].parent_id == -1

    def branches(self) -> list[list[int]]:
        """Index paths between consecutive key nodes (root, bifurcations, terminals).

        Each path starts at a key node, runs through edge nodes and ends at the
        next key node, both ends included. Paths are listed in node order.
        """
        out = []
        for i in range(len(self)):
            if not self.is_key(i):
                continue
            for c in self._children[i]:
                path = [i, c]
                while not self.is_key(path[-1]):
                    path.append(self._children[path[-1]][0])
                out.append(path)
        return out

    def with_positions(self, positions) -> "VesselTree":
        pos = np.asarray(positions, dtype=float)
        nodes = [replace(n, position=tuple(float(v) for v in pos[i])) for i, n in enumerate(self.nodes)]
        return VesselTree(nodes, pos.shape[1])

    def with_radii(self, radii) -> "VesselTree":
        nodes = [replace(n, radius=float(r)) for n, r in zip(self.nodes, radii)]
        return VesselTree(nodes, self.dim)


# --------------------------------------------------------------------------
# Thinning
# --------------------------------------------------------------------------


def _ring_bits(code: int) -> list[bool]:
    # x1..x8 = E, NE, N, NW, W, SW, S, SE
    return [bool(code >> i & 1) for i in range(8)]


def _crossing_number(x) -> int:
    return sum(1 for i in (0, 2, 4, 6) if not x[i] and (x[i + 1] or x[(i + 2) % 8]))


def _build_thinning_luts():
    lut1 = np.zeros(256, dtype=bool)
    lut2 = np.zeros(256, dtype=bool)
    simple = np.zeros(256, dtype=bool)
    for code in range(256):
        x = _ring_bits(code)
        g1 = _crossing_number(x) == 1
        n1 = sum(x[k] or x[k + 1] for k in (0, 2, 4, 6))
        n2 = sum(x[k + 1] or x[(k + 2) % 8] for k in (0, 2, 4, 6))
        g2 = 2 <= min(n1, n2) <= 3
        g3 = not ((x[1] or x[2] or not x[7]) and x[0])
        g3b = not ((x[5] or x[6] or not x[3]) and x[4])
        lut1[code] = g1 and g2 and g3
        lut2[code] = g1 and g2 and g3b
        simple[code] = g1
    return lut1, lut2, simple


_LUT1, _LUT2, _SIMPLE = _build_thinning_luts()
_RING = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))


def _ring_codes(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1)
    h, w = img.shape
    code = np.zeros(img.shape, dtype=np.intp)
    for bit, (dr, dc) in enumerate(_RING):
        code |= p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w].astype(np.intp) << bit
    return code


def _remove_square_blocks(img: np.ndarray) -> bool:
    """Delete simple pixels from fully set 2x2 blocks; returns True if anything changed."""
    changed = False
    blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
    for r, c in zip(*np.nonzero(blocks)):
        for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
            if not (img[r, c] and img[r + 1, c] and img[r, c + 1] and img[r + 1, c + 1]):
                break
            pr, pc = r + dr, c + dc
            code = 0
            for bit, (a, b) in enumerate(_RING):
                rr, cc = pr + a, pc + b
                if 0 <= rr < img.shape[0] and 0 <= cc < img.shape[1] and img[rr, cc]:
                    code |= 1 << bit
            if _SIMPLE[code]:
                img[pr, pc] = False
                changed = True
                break
    return changed


def thin(mask) -> np.ndarray:
    """Thin a binary mask to a one-pixel-wide 8-connected skeleton.

    Two-subiteration parallel boundary peeling (Guo-Hall conditions as
    surveyed by Lam, Lee and Suen), iterated to convergence. A final
    sequential pass removes simple pixels from any remaining fully set 2x2
    block, then peeling resumes until nothing changes.
    """
    img = np.array(mask, dtype=bool)
    if img.ndim != 2:
        raise TreeError("thin expects a 2-D mask")
    while True:
        while True:
            removed = 0
            for lut in (_LUT1, _LUT2):
                kill = img & lut[_ring_codes(img)]
                removed += int(kill.sum())
                img[kill] = False
            if removed == 0:
                break
        if not _remove_square_blocks(img):
            return img


# --------------------------------------------------------------------------
# Tracing
# --------------------------------------------------------------------------


def skeleton_graph(skeleton) -> nx.Graph:
    """Pixel graph of a skeleton with m-adjacency.

    Pixels are linked to their 8-neighbours, except that a diagonal link is
    dropped when the two pixels already share a set 4-neighbour. This keeps
    8-connectivity while removing the spurious triangles at junctions.
    Nodes are ``(row, col)`` tuples.
    """
    sk = np.asarray(skeleton, dtype=bool)
    g = nx.Graph()
    rows, cols = np.nonzero(sk)
    g.add_nodes_from(zip(rows.tolist(), cols.tolist()))
    h, w = sk.shape
    p = np.pad(sk, 1)

    def at(dr, dc):
        return p[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    for dr, dc in ((0, 1), (1, 0)):
        e = sk & at(dr, dc)
        r, c = np.nonzero(e)
        g.add_edges_from(((a, b), (a + dr, b + dc)) for a, b in zip(r.tolist(), c.tolist()))
    # SE: shared 4-neighbours E and S; SW: shared W and S
    for dc, side in ((1, at(0, 1)), (-1, at(0, -1))):
        e = sk & at(1, dc) & ~side & ~at(1, 0)
        r, c = np.nonzero(e)
        g.add_edges_from(((a, b), (a + 1, b + dc)) for a, b in zip(r.tolist(), c.tolist()))
    return g


def trace(skeleton) -> VesselTree:
    """Parse a one-pixel skeleton into a rooted 2-D vessel tree.

    Only the largest 8-connected component is traced. The root is the
    terminal pixel with the smallest ``(y, x)``. Each cycle is broken by
    deleting its edge whose midpoint lies furthest from the root. The number
    of deleted edges is stored on the tree as ``cycle_breaks``.
    """
    sk = np.asarray(skeleton, dtype=bool)
    if not sk.any():
        raise TreeError("cannot trace an empty skeleton")
    labels, n = ndi.label(sk, structure=np.ones((3, 3), dtype=bool))
    if n > 1:
        log.warning("trace: skeleton has %d components; tracing the largest", n)
        areas = np.bincount(labels.ravel())[1:]
        sk = labels == (int(np.argmax(areas)) + 1)
    g = skeleton_graph(sk)
    terminals = [v for v, d in g.degree() if d == 1]
    root = min(terminals) if terminals else min(g.nodes)
    breaks = 0
    while True:
        try:
            cycle = nx.find_cycle(g, root)
        except nx.NetworkXNoCycle:
            break

        def far(e):
            (r1, c1), (r2, c2) = e
            my, mx = (r1 + r2) / 2 - root[0], (c1 + c2) / 2 - root[1]
            return (my * my + mx * mx, tuple(sorted(e)))

        u, v = max(((a, b) for a, b in cycle), key=far)
        g.remove_edge(u, v)
        breaks += 1
    if breaks:
        log.warning("trace: broke %d cycle edge(s)", breaks)
    positions = {v: (float(v[1]), float(v[0])) for v in g.nodes}
    adjacency = {v: list(g.neighbors(v)) for v in g.nodes}
    tree = VesselTree.from_graph(adjacency, positions, root)
    tree.cycle_breaks = breaks
    return tree


# --------------------------------------------------------------------------
# Radii
# --------------------------------------------------------------------------


def _walk(tree: VesselTree, i: int, first_step: int, steps: int) -> int:
    """Follow a chain from ``i`` through ``first_step`` for up to ``steps`` nodes."""
    prev, cur = i, first_step
    for _ in range(steps - 1):
        nxt = [n for n in tree.neighbors(cur) if n != prev]
        if len(nxt) != 1:
            break
        prev, cur = cur, nxt[0]
    return cur


def node_tangents(tree: VesselTree, span: int = 2) -> np.ndarray:
    """Unit tangents by central differences over up to ``span`` nodes each way.

    Terminals fall back to one-sided differences; bifurcations use the parent
    and first child directions.
    """
    pos = tree.positions[:, :2]
    parent = tree.parent_index
    out = np.zeros_like(pos)
    for i in range(len(tree)):
        back = _walk(tree, i, parent[i], span) if parent[i] >= 0 else i
        kids = tree.children(i)
        ahead = _walk(tree, i, kids[0], span) if kids else i
        t = pos[ahead] - pos[back]
        norm = math.hypot(t[0], t[1])
        out[i] = t / norm if norm > 0 else (1.0, 0.0)
    return out


def estimate_radii(tree: VesselTree, mask, step: float = 0.25, half_pixel: float = 0.5) -> VesselTree:
    """Vessel radius per node by marching along the local normal.

    From each node the bilinearly sampled mask is probed every ``step`` pixels
    along both normal directions until a sample drops to 0.5 or below. That
    distance minus half a pixel is the distance to the outermost vessel pixel
    centre; the radius is the mean of both sides, never less than
    ``half_pixel`` (a single-pixel vessel still has half a pixel of extent).
    Nodes outside the mask get radius 0.
    """
    m = np.asarray(mask, dtype=float)
    pos = tree.positions[:, :2]
    normals = node_tangents(tree)[:, ::-1] * np.array([-1.0, 1.0])
    inside = ndi.map_coordinates(m, [pos[:, 1], pos[:, 0]], order=1, mode="constant", cval=0.0) > 0.5
    if not inside.all():
        log.warning("estimate_radii: %d node(s) outside the mask get radius 0", int((~inside).sum()))
    max_t = float(max(m.shape)) + 1.0
    ts = np.arange(step, max_t + step, step)
    dist = np.zeros((len(tree), 2))
    for side, sign in enumerate((1.0, -1.0)):
        pending = np.nonzero(inside)[0]
        found = np.full(len(tree), np.nan)
        chunk = 128
        for start in range(0, len(ts), chunk):
            if pending.size == 0:
                break
            t = ts[start:start + chunk]
            xs = pos[pending, 0, None] + sign * normals[pending, 0, None] * t
            ys = pos[pending, 1, None] + sign * normals[pending, 1, None] * t
            vals = ndi.map_coordinates(m, [ys.ravel(), xs.ravel()], order=1, mode="constant",
                                       cval=0.0).reshape(xs.shape)
            out = vals <= 0.5
            hit = out.any(axis=1)
            found[pending[hit]] = t[np.argmax(out[hit], axis=1)]
            pending = pending[~hit]
        dist[:, side] = np.nan_to_num(found, nan=max_t) - 0.5
    radii = np.where(inside, np.maximum(dist.mean(axis=1), half_pixel), 0.0)
    return tree.with_radii(radii)


# --------------------------------------------------------------------------
# SWC
# --------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def swc_write(tree: VesselTree, header=()) -> str:
    """Serialize as SWC text: ``id type x y z radius parent`` per line.

    2-D trees are written with ``z = 0`` and a ``# dimensionality: 2`` header.
    """
    lines = ["# vesselstereo SWC", f"# dimensionality: {tree.dim}"]
    lines += [f"# {h}" for h in header]
    for n in tree.nodes:
        x, y = n.position[0], n.position[1]
        z = n.position[2] if tree.dim == 3 else 0.0
        lines.append(f"{n.id} {SWC_TYPE} {_fmt(x)} {_fmt(y)} {_fmt(z)} {_fmt(n.radius)} {n.parent_id}")
    return "\n".join(lines) + "\n"


def swc_read(text: str) -> VesselTree:
    """Parse SWC text. Node kinds are derived from the topology."""
    dim = 3
    records = []
    seen = {}
    roots = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip().lower()
            if body.startswith("dimensionality:"):
                try:
                    dim = int(body.split(":", 1)[1])
                except ValueError:
                    raise SwcParseError(line_no, f"bad dimensionality header {raw!r}") from None
                if dim not in (2, 3):
                    raise SwcParseError(line_no, f"dimensionality must be 2 or 3, got {dim}")
            continue
        parts = line.split()
        if len(parts) != 7:
            raise SwcParseError(line_no, f"expected 7 fields, got {len(parts)}")
        try:
            nid, _type, parent = int(parts[0]), int(parts[1]), int(parts[6])
            x, y, z, r = (float(v) for v in parts[2:6])
        except ValueError:
            raise SwcParseError(line_no, f"non-numeric field in {raw!r}") from None
        if nid < 1:
            raise SwcParseError(line_no, f"node id must be >= 1, got {nid}")
        if nid in seen:
            raise SwcParseError(line_no, f"duplicate node id {nid}")
        if parent == -1:
            roots += 1
            if roots > 1:
                raise SwcParseError(line_no, "second root node (parent -1)")
        elif parent not in seen:
            raise SwcParseError(line_no, f"parent {parent} is not defined before node {nid}")
        if not r >= 0:
            raise SwcParseError(line_no, f"negative radius {r}")
        seen[nid] = len(records)
        records.append((nid, (x, y, z)[:dim], r, parent))
    if not records:
        raise SwcParseError(0, "no nodes")
    parents = [seen[p] if p != -1 else -1 for _, _, _, p in records]
    return VesselTree.from_arrays([rec[1] for rec in records], parents,
                                  [rec[2] for rec in records], ids=[rec[0] for rec in records])


def read_swc(path) -> VesselTree:
    with open(path, encoding="utf-8") as fh:
        return swc_read(fh.read())
