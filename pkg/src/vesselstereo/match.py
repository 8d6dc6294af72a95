"""Coarse-to-fine stereo correspondence between two traced vessel trees.

Initial matching predicts every bifurcation of the warped tree (A) in the
target tree (B) through an affine map and pairs it with the nearest free B
bifurcation. Dense matching then walks the branches between matched
bifurcations and assigns their points with the Hungarian method, scoring
pairs against a Gaussian-process regression of A locations from B locations.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import ConditioningError, MatchError, ParameterError, RankError
from .hungarian import hungarian
from .tree import TERMINAL, VesselTree

log = logging.getLogger(__name__)

BIFURCATION_PAIR = "bifurcation"
DENSE_PAIR = "dense"


# --------------------------------------------------------------------------
# Affine maps
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Affine2D:
    """Homogeneous 3x3 affine map ``[[R, T], [0, 0, 1]]``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ParameterError(f"affine matrix must be 3x3, got {m.shape}")
        if not (m[2, 0] == 0 and m[2, 1] == 0 and m[2, 2] == 1):
            raise ParameterError(f"affine bottom row must be (0, 0, 1), got {m[2].tolist()}")
        if abs(np.linalg.det(m[:2, :2])) < 1e-12:
            raise ParameterError("affine linear part is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Affine2D":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float = 0.0) -> "Affine2D":
        m = np.eye(3)
        m[:2, 2] = (tx, ty)
        return cls(m)

    @classmethod
    def from_parts(cls, R, T) -> "Affine2D":
        m = np.eye(3)
        m[:2, :2] = R
        m[:2, 2] = np.ravel(T)
        return cls(m)

    @classmethod
    def from_sequence(cls, values) -> "Affine2D":
        v = [float(x) for x in values]
        if len(v) != 9:
            raise ParameterError(f"affine needs 9 row-major numbers, got {len(v)}")
        return cls(np.array(v).reshape(3, 3))

    @property
    def R(self) -> np.ndarray:
        return self.matrix[:2, :2]

    @property
    def T(self) -> np.ndarray:
        return self.matrix[:2, 2]

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.T

    def inverse(self) -> "Affine2D":
        return Affine2D(np.linalg.inv(self.matrix))

    def to_list(self) -> list[float]:
        return self.matrix.ravel().tolist()


def apply_affine(A: Affine2D, p) -> np.ndarray:
    return A.apply(p)


def estimate_affine(src, dst) -> tuple[Affine2D, float]:
    """Least-squares affine with ``A @ src ~ dst``; returns the map and residual RMS (px)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ParameterError("src and dst must be matching (n, 2) arrays")
    if len(src) < 3:
        raise RankError(f"need at least 3 point pairs, got {len(src)}")
    design = np.column_stack([src, np.ones(len(src))])
    if np.linalg.matrix_rank(design) < 3:
        raise RankError("source points are collinear")
    coef, *_ = np.linalg.lstsq(design, dst, rcond=None)
    m = np.eye(3)
    m[:2, :] = coef.T
    resid = design @ coef - dst
    rms = float(np.sqrt((resid**2).sum(axis=1).mean()))
    return Affine2D(m), rms


def estimate_translation(img_a, img_b, max_shift_x: int = 64, max_shift_y: int = 0,
                         min_overlap: float = 0.5) -> Affine2D:
    """Translation-only map from A to B by exhaustive normalized cross-correlation.

    A feature at ``p`` in A is assumed to appear at ``p + t`` in B. All
    integer shifts within the ranges are scored; ties keep the first shift
    visited (x outer, y inner, both ascending).
    """
    a = np.asarray(img_a, dtype=float)
    b = np.asarray(img_b, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"stereo images differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape
    best, best_t = -np.inf, (0, 0)
    for tx in range(-max_shift_x, max_shift_x + 1):
        for ty in range(-max_shift_y, max_shift_y + 1):
            ya, yb = slice(max(0, -ty), min(h, h - ty)), slice(max(0, ty), min(h, h + ty))
            xa, xb = slice(max(0, -tx), min(w, w - tx)), slice(max(0, tx), min(w, w + tx))
            pa, pb = a[ya, xa], b[yb, xb]
            if pa.size < min_overlap * a.size:
                continue
            pa = pa - pa.mean()
            pb = pb - pb.mean()
            den = math.sqrt(float((pa * pa).sum() * (pb * pb).sum()))
            score = float((pa * pb).sum()) / den if den > 0 else -np.inf
            if score > best:
                best, best_t = score, (tx, ty)
    return Affine2D.translation(*best_t)


# --------------------------------------------------------------------------
# Correspondences
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Correspondence:
    point_a: tuple
    point_b: tuple
    provenance: str
    node_a: int | None = None
    node_b: int | None = None


class CorrespondenceSet:
    """Ordered, injective list of A/B point pairs."""

    def __init__(self, pairs=(), meta=None):
        self.pairs: list[Correspondence] = []
        self._seen_a: set = set()
        self._seen_b: set = set()
        self.meta = dict(meta or {})
        for p in pairs:
            self.add(p)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __eq__(self, other) -> bool:
        return isinstance(other, CorrespondenceSet) and self.pairs == other.pairs

    def has_a(self, point) -> bool:
        return tuple(point) in self._seen_a

    def has_b(self, point) -> bool:
        return tuple(point) in self._seen_b

    def add(self, pair: Correspondence) -> None:
        a, b = tuple(pair.point_a), tuple(pair.point_b)
        if a in self._seen_a or b in self._seen_b:
            raise MatchError(f"correspondence {a} <-> {b} breaks injectivity")
        self._seen_a.add(a)
        self._seen_b.add(b)
        self.pairs.append(pair)

    @property
    def points_a(self) -> np.ndarray:
        return np.array([p.point_a for p in self.pairs], dtype=float).reshape(-1, 2)

    @property
    def points_b(self) -> np.ndarray:
        return np.array([p.point_b for p in self.pairs], dtype=float).reshape(-1, 2)

    def count(self, provenance: str) -> int:
        return sum(p.provenance == provenance for p in self.pairs)

    def to_text(self, header=()) -> str:
        lines = ["# xA yA xB yB provenance"] + [f"# {h}" for h in header]
        for p in self.pairs:
            lines.append(f"{p.point_a[0]!r} {p.point_a[1]!r} {p.point_b[0]!r} {p.point_b[1]!r} {p.provenance}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CorrespondenceSet":
        out = cls()
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ParameterError(f"correspondence line {line_no}: expected 5 fields, got {len(parts)}")
            try:
                xa, ya, xb, yb = (float(v) for v in parts[:4])
            except ValueError:
                raise ParameterError(f"correspondence line {line_no}: non-numeric coordinate") from None
            if parts[4] not in (BIFURCATION_PAIR, DENSE_PAIR):
                raise ParameterError(f"correspondence line {line_no}: unknown provenance {parts[4]!r}")
            out.add(Correspondence((xa, ya), (xb, yb), parts[4]))
        return out


def attach_nodes(pairs: CorrespondenceSet, tree_a: VesselTree, tree_b: VesselTree | None = None) -> CorrespondenceSet:
    """Re-link pairs read from text to node ids by exact 2-D position.

    Every A point must coincide with a node of ``tree_a``; B points without
    a matching node of ``tree_b`` keep ``node_b = None``.
    """
    ids_a = {tuple(n.position[:2]): n.id for n in tree_a.nodes}
    ids_b = {tuple(n.position[:2]): n.id for n in tree_b.nodes} if tree_b is not None else {}
    out = CorrespondenceSet(meta=pairs.meta)
    for p in pairs:
        key = tuple(float(v) for v in p.point_a)
        if key not in ids_a:
            raise MatchError(f"correspondence point {key} is not a node of the A tree")
        out.add(Correspondence(p.point_a, p.point_b, p.provenance, ids_a[key],
                               ids_b.get(tuple(float(v) for v in p.point_b))))
    return out


# --------------------------------------------------------------------------
# Bifurcation matching and pruning
# --------------------------------------------------------------------------


def _chain_to_key(tree: VesselTree, start: int, first: int) -> list[int]:
    path = [start, first]
    while tree.nodes[path[-1]].kind == "edge" and tree.parent_index[path[-1]] != -1:
        nxt = [n for n in tree.neighbors(path[-1]) if n != path[-2]]
        path.append(nxt[0])
    return path


def _root_key(tree: VesselTree, i: int):
    return tuple(reversed(tree.nodes[i].position))


def prune_unmatched(tree: VesselTree, matched) -> tuple[VesselTree, dict[int, int]]:
    """Remove the branches joining each unmatched bifurcation to a terminal.

    Returns the rebuilt tree (re-rooted at its smallest-``(y, x)`` terminal)
    and the map from old node index to new node index.
    """
    matched = set(matched)
    drop = set()
    for u in tree.bifurcations():
        if u in matched:
            continue
        for nb in tree.neighbors(u):
            path = _chain_to_key(tree, u, nb)
            end = path[-1]
            if tree.nodes[end].kind == TERMINAL:
                drop.update(path[1:])
    keep = [i for i in range(len(tree)) if i not in drop]
    if not drop:
        return tree, {i: i for i in range(len(tree))}
    adj = {i: [n for n in tree.neighbors(i) if n not in drop] for i in keep}
    pos = {i: tree.nodes[i].position for i in keep}
    rad = {i: tree.nodes[i].radius for i in keep}
    terminals = [i for i in keep if len(adj[i]) <= 1]
    root = min(terminals or keep, key=lambda i: _root_key(tree, i))
    new = VesselTree.from_graph(adj, pos, root, rad)
    return new, {old: k for k, old in enumerate(new.source_keys)}


def match_bifurcations(tree_a: VesselTree, tree_b: VesselTree, affine: Affine2D, r: float = 20.0):
    """Match bifurcations of A to B through ``affine`` within radius ``r`` (px).

    Candidate pairs within ``r`` are accepted greedily by ascending distance
    (then A index, then B index), so each bifurcation is used at most once.
    Both trees are then pruned of terminal branches hanging off unmatched
    bifurcations.

    Returns:
        ``(pairs, pruned_a, pruned_b)``; node references in ``pairs`` are
        ids in the pruned trees.
    """
    if r <= 0:
        raise ParameterError(f"search radius must be > 0, got {r}")
    ba, bb = tree_a.bifurcations(), tree_b.bifurcations()
    if not ba or not bb:
        raise MatchError("a tree has no bifurcations to match")
    pa = tree_a.positions[ba, :2]
    pb = tree_b.positions[bb, :2]
    d = cdist(affine.apply(pa), pb)
    cand = sorted((d[i, j], i, j) for i, j in zip(*np.nonzero(d <= r)))
    used_a, used_b, matches = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matches.append((ba[i], bb[j]))
    if not matches:
        raise MatchError(f"no bifurcation of A has a B bifurcation within r={r} px")
    matches.sort()
    pruned_a, map_a = prune_unmatched(tree_a, [m[0] for m in matches])
    pruned_b, map_b = prune_unmatched(tree_b, [m[1] for m in matches])
    pairs = CorrespondenceSet(meta={"unmatched_a": len(ba) - len(matches), "unmatched_b": len(bb) - len(matches)})
    for ia, ib in matches:
        na, nb = pruned_a.nodes[map_a[ia]], pruned_b.nodes[map_b[ib]]
        pairs.add(Correspondence(na.position[:2], nb.position[:2], BIFURCATION_PAIR, na.id, nb.id))
    return pairs, pruned_a, pruned_b


# --------------------------------------------------------------------------
# Gaussian-process regression
# --------------------------------------------------------------------------


@dataclass
class GPHyperparams:
    """Kernel ``theta0 + theta1 * xi.xj + theta2 * exp(-theta3/2 |xi - xj|^2)`` plus noise variance."""

    theta0: float = 1e4
    theta1: float = 1.0
    theta2: float = 100.0
    theta3: float = 4e-4
    beta_inv: float = 1.0

    def validate(self) -> list[str]:
        errs = []
        for name in ("theta0", "theta1", "theta2", "theta3", "beta_inv"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)):
                errs.append(f"gp.{name} must be a finite number, got {v!r}")
            elif v < 0:
                errs.append(f"gp.{name} must be >= 0, got {v}")
        return errs


def kernel(xi, xj, h: GPHyperparams) -> float:
    xi = np.asarray(xi, dtype=float)
    xj = np.asarray(xj, dtype=float)
    d2 = float(((xi - xj) ** 2).sum())
    return float(h.theta0 + h.theta1 * float(xi @ xj) + h.theta2 * math.exp(-0.5 * h.theta3 * d2))


def kernel_matrix(X, Y, h: GPHyperparams) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(-1, 2)
    Y = np.asarray(Y, dtype=float).reshape(-1, 2)
    d2 = cdist(X, Y, "sqeuclidean")
    return h.theta0 + h.theta1 * (X @ Y.T) + h.theta2 * np.exp(-0.5 * h.theta3 * d2)


@dataclass
class GPModel:
    hyper: GPHyperparams
    train_b: np.ndarray
    train_a: np.ndarray
    chol: np.ndarray
    """Lower Cholesky factor of ``C = K(train_b, train_b) + beta_inv * I``."""
    alpha: np.ndarray = field(repr=False)
    """``C^-1 @ train_a``, precomputed so a mean costs O(N) per query."""

    @property
    def C(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def predict(self, x_b, clamp: bool = True):
        return gp_predict(self, x_b, clamp=clamp)


def _duplicates(points: np.ndarray) -> list[tuple]:
    seen, dup = {}, []
    for p in (tuple(float(v) for v in row) for row in points):
        if p in seen and p not in dup:
            dup.append(p)
        seen[p] = True
    return dup


def gp_fit(train_b, train_a, h: GPHyperparams) -> GPModel:
    """Factor ``C_ij = k(b_i, b_j) + beta_inv * delta_ij`` for regression of A from B."""
    errs = h.validate()
    if errs:
        raise ParameterError("; ".join(errs))
    tb = np.asarray(train_b, dtype=float).reshape(-1, 2)
    ta = np.asarray(train_a, dtype=float).reshape(-1, 2)
    if len(tb) == 0 or len(tb) != len(ta):
        raise ParameterError("GP needs N >= 1 matching training pairs")
    if h.beta_inv == 0:
        dup = _duplicates(tb)
        if dup:
            raise ConditioningError(f"kernel matrix singular: duplicate training point(s) {dup[:3]} with beta_inv=0")
    C = kernel_matrix(tb, tb, h) + h.beta_inv * np.eye(len(tb))
    try:
        L = cholesky(C, lower=True)
    except np.linalg.LinAlgError as exc:
        dup = _duplicates(tb)
        hint = f"; duplicate training point(s) {dup[:3]}" if dup else ""
        raise ConditioningError(f"kernel matrix is not positive definite{hint}") from exc
    alpha = solve_triangular(L.T, solve_triangular(L, ta, lower=True), lower=False)
    return GPModel(h, tb, ta, L, alpha)


def gp_predict(model: GPModel, x_b, clamp: bool = True):
    """Predictive mean (A location) and variance at target-image point(s) ``x_b``.

    Accepts one ``(2,)`` point or an ``(m, 2)`` array. Negative variances
    from round-off are clamped to 0 unless ``clamp`` is False.
    """
    x = np.asarray(x_b, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, 2)
    h = model.hyper
    k = kernel_matrix(model.train_b, x, h)
    mean = k.T @ model.alpha
    v = solve_triangular(model.chol, k, lower=True)
    kxx = h.theta0 + h.theta1 * (x * x).sum(axis=1) + h.theta2
    var = kxx + h.beta_inv - (v * v).sum(axis=0)
    if clamp:
        tol = 1e-9 * np.maximum(1.0, kxx)
        if (var < -tol).any():
            log.warning("gp_predict: clamping %d negative variance(s)", int((var < -tol).sum()))
        var = np.maximum(var, 0.0)
    if single:
        return mean[0], float(var[0])
    return mean, var


# --------------------------------------------------------------------------
# Dense matching
# --------------------------------------------------------------------------


def _depths(tree: VesselTree) -> list[int]:
    depth = [0] * len(tree)
    for i, p in enumerate(tree.parent_index):
        if p >= 0:
            depth[i] = depth[p] + 1
    return depth


def _path_between(tree: VesselTree, depth, i: int, j: int) -> list[int]:
    parent = tree.parent_index
    left, right = [i], [j]
    while depth[left[-1]] > depth[right[-1]]:
        left.append(parent[left[-1]])
    while depth[right[-1]] > depth[left[-1]]:
        right.append(parent[right[-1]])
    while left[-1] != right[-1]:
        left.append(parent[left[-1]])
        right.append(parent[right[-1]])
    return left + right[-2::-1]


def _segments_from(tree: VesselTree, start: int, stops: set) -> list[list[int]]:
    """All paths from ``start`` that end at another stop node or at a terminal."""
    out = []
    stack = [[start, nb] for nb in reversed(tree.neighbors(start))]
    while stack:
        path = stack.pop()
        cur = path[-1]
        if cur in stops or tree.nodes[cur].kind == TERMINAL:
            out.append(path)
            continue
        for nb in reversed(tree.neighbors(cur)):
            if nb != path[-2]:
                stack.append(path + [nb])
    return out


def _arclength(points: np.ndarray) -> np.ndarray:
    if len(points) < 2:
        return np.zeros(len(points))
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def _subsample(n: int, cap: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.unique(np.round(np.linspace(0, n - 1, cap)).astype(int))


class _DenseMatcher:
    def __init__(self, tree_a, tree_b, seed, h, gate, max_points, affine):
        self.ta, self.tb = tree_a, tree_b
        self.pa, self.pb = tree_a.positions[:, :2], tree_b.positions[:, :2]
        self.h, self.gate, self.cap = h, gate, max_points
        self.fallback = affine.inverse() if affine is not None else None
        self.out = CorrespondenceSet()
        self.used_a, self.used_b = set(), set()
        self.train_a, self.train_b = [], []
        self.crossings = 0
        self.fallbacks = 0
        self.anchors = 0
        for p in seed:
            ia, ib = tree_a.index_of(p.node_a), tree_b.index_of(p.node_b)
            self._add(ia, ib, BIFURCATION_PAIR, train=True)

    def _add(self, ia, ib, provenance, train):
        na, nb = self.ta.nodes[ia], self.tb.nodes[ib]
        self.out.add(Correspondence(na.position[:2], nb.position[:2], provenance, na.id, nb.id))
        self.used_a.add(ia)
        self.used_b.add(ib)
        if train:
            self.train_a.append(self.pa[ia])
            self.train_b.append(self.pb[ib])

    def predictor(self):
        try:
            model = gp_fit(np.array(self.train_b), np.array(self.train_a), self.h)
            return lambda xb: gp_predict(model, xb)
        except ConditioningError as exc:
            log.warning("dense_match: GP fit failed (%s); using affine prediction", exc)
            self.fallbacks += 1
            if self.fallback is not None:
                fb = self.fallback
            else:
                shift = np.mean(np.array(self.train_a) - np.array(self.train_b), axis=0)
                fb = Affine2D.translation(*shift)
            prior = self.h.theta2 + self.h.beta_inv
            return lambda xb: (fb.apply(xb), np.full(len(xb), prior))

    def anchor(self, ia, ib) -> bool:
        """Accept ``ia <-> ib`` directly if both are free and the pair passes the gate."""
        if ia in self.used_a or ib in self.used_b:
            return False
        mean, var = self.predictor()(self.pb[[ib]])
        if np.linalg.norm(self.pa[ia] - mean[0]) > self.gate * math.sqrt(var[0] + self.h.beta_inv):
            return False
        self._add(ia, ib, DENSE_PAIR, train=True)
        self.anchors += 1
        return True

    def match_paths(self, path_a, path_b, predict=None):
        ia = [k for k in path_a if k not in self.used_a]
        ib = [k for k in path_b if k not in self.used_b]
        if not ia or not ib:
            return 0
        sa, sb = _subsample(len(ia), self.cap), _subsample(len(ib), self.cap)
        ca = [ia[k] for k in sa]
        cb = [ib[k] for k in sb]
        predict = predict or self.predictor()
        mean, var = predict(self.pb[cb])
        cost = cdist(self.pa[ca], mean)
        limit = self.gate * np.sqrt(var + self.h.beta_inv)
        accepted = [(r, c) for r, c in hungarian(cost) if cost[r, c] <= limit[c]]
        if len(sb) < len(ib):
            cb = self._refine(ca, cb, ib, sb, accepted, predict)
        for r, c in accepted:
            self._add(ca[r], cb[c], DENSE_PAIR, train=True)
        cols = [c for _, c in accepted]
        self.crossings += sum(1 for x in range(len(cols)) for y in range(x + 1, len(cols)) if cols[x] > cols[y])
        self._interpolate(path_a, path_b, ia, sa, [(sa[r], cb[c]) for r, c in accepted])
        return len(accepted)

    def _refine(self, ca, cb, ib, sb, accepted, predict):
        """Move each accepted B sample to the best full-resolution point of its own span.

        B sample ``k`` owns the unused path points closer to it (in path order)
        than to its neighbouring samples, so refined choices stay distinct.
        """
        cb = list(cb)
        bounds = np.concatenate([[0], (sb[:-1] + sb[1:] + 1) // 2, [len(ib)]])
        for r, c in accepted:
            span = ib[bounds[c]:bounds[c + 1]]
            if len(span) < 2:
                continue
            mean, var = predict(self.pb[span])
            cost = np.linalg.norm(mean - self.pa[ca[r]], axis=1)
            cb[c] = span[int(np.argmin(cost))]
        return cb

    def _interpolate(self, path_a, path_b, ia, sa, accepted):
        """Fill A points skipped by subsampling between consecutive accepted samples."""
        if len(accepted) < 2 or len(sa) == len(ia):
            return
        pos_in_a = {k: n for n, k in enumerate(path_a)}
        pos_in_b = {k: n for n, k in enumerate(path_b)}
        sa_a = _arclength(self.pa[path_a])
        sa_b = _arclength(self.pb[path_b])
        rank = {s: n for n, s in enumerate(sa)}
        accepted = sorted(accepted)
        for (s0, b0), (s1, b1) in zip(accepted, accepted[1:]):
            if rank[s1] != rank[s0] + 1:
                continue
            a0, a1 = ia[s0], ia[s1]
            t0, t1 = sa_a[pos_in_a[a0]], sa_a[pos_in_a[a1]]
            u0, u1 = sa_b[pos_in_b[b0]], sa_b[pos_in_b[b1]]
            for k in ia[s0 + 1:s1]:
                if k in self.used_a or t1 == t0:
                    continue
                frac = (sa_a[pos_in_a[k]] - t0) / (t1 - t0)
                target = u0 + frac * (u1 - u0)
                jb = path_b[int(np.argmin(np.abs(sa_b - target)))]
                if jb in self.used_b:
                    continue
                self._add(k, jb, DENSE_PAIR, train=False)


def _pair_terminal_paths(m: _DenseMatcher, paths_a, paths_b, samples: int = 16):
    """Pair terminal paths leaving one matched bifurcation by mean predicted offset."""
    if not paths_a or not paths_b:
        return []
    predict = m.predictor()
    cost = np.zeros((len(paths_a), len(paths_b)))
    for i, pa in enumerate(paths_a):
        la = _arclength(m.pa[pa])
        for j, pb in enumerate(paths_b):
            lb = _arclength(m.pb[pb])
            span = min(la[-1], lb[-1])
            s = np.linspace(0, span, samples)
            xa = np.column_stack([np.interp(s, la, m.pa[pa, 0]), np.interp(s, la, m.pa[pa, 1])])
            xb = np.column_stack([np.interp(s, lb, m.pb[pb, 0]), np.interp(s, lb, m.pb[pb, 1])])
            mean, _ = predict(xb)
            cost[i, j] = np.linalg.norm(xa - mean, axis=1).mean()
    return [(paths_a[r], paths_b[c]) for r, c in hungarian(cost)]


def dense_match(tree_a: VesselTree, tree_b: VesselTree, seed: CorrespondenceSet,
                h: GPHyperparams | None = None, gate: float = 3.0, max_points: int = 64,
                affine: Affine2D | None = None, anchor_terminals: bool = True) -> CorrespondenceSet:
    """Densify bifurcation matches along the branches of two pruned trees.

    For every pair of corresponding paths (between two matched bifurcations,
    or from a matched bifurcation out to terminals) the GP is refit on all
    pairs accepted so far. Points are subsampled to at most ``max_points``
    per path, assigned with the Hungarian method on the cost
    ``|a - m(b)|`` and kept where the cost is within
    ``gate * sqrt(var(b) + beta_inv)``. A points skipped by subsampling are
    interpolated along arc length between neighbouring accepted samples.
    Paths between matched bifurcations are processed first, in A node
    order, then the terminal paths of each matched bifurcation.

    ``seed`` node references must be ids in ``tree_a`` / ``tree_b``. The
    result holds the seed followed by the dense pairs; ``meta`` reports
    ``crossings`` (order inversions along paths) and GP ``fallbacks``.
    """
    h = h or GPHyperparams()
    if len(seed) == 0:
        raise MatchError("dense matching needs a non-empty seed")
    m = _DenseMatcher(tree_a, tree_b, seed, h, gate, max_points, affine)
    to_b = {tree_a.index_of(p.node_a): tree_b.index_of(p.node_b) for p in seed}
    stops_a, stops_b = set(to_b), set(to_b.values())
    depth_b = _depths(tree_b)

    internal, terminal = [], []
    for p in sorted(to_b):
        term_a = []
        for path in _segments_from(tree_a, p, stops_a):
            end = path[-1]
            if end in stops_a:
                if p < end:
                    internal.append((path, _path_between(tree_b, depth_b, to_b[p], to_b[end])))
            else:
                term_a.append(path)
        term_b = [q for q in _segments_from(tree_b, to_b[p], stops_b) if q[-1] not in stops_b]
        terminal.append((term_a, term_b))

    skipped = 0
    for path_a, path_b in internal:
        if any(k in stops_b for k in path_b[1:-1]):
            skipped += 1
            continue
        m.match_paths(path_a[1:-1], path_b[1:-1])
    for term_a, term_b in terminal:
        for path_a, path_b in _pair_terminal_paths(m, term_a, term_b):
            if anchor_terminals:
                m.anchor(path_a[-1], path_b[-1])
            m.match_paths(path_a[1:], path_b[1:])
    if skipped:
        log.warning("dense_match: skipped %d path(s) whose B counterpart crosses another matched bifurcation",
                    skipped)
    m.out.meta.update(crossings=m.crossings, fallbacks=m.fallbacks, terminal_anchors=m.anchors, skipped_paths=skipped,
                      bifurcation_pairs=len(seed), dense_pairs=len(m.out) - len(seed))
    return m.out
