"""Rectangular partitions, backward reachable sets and enabled actions."""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from ._validation import check_box, check_states, check_vector

CONTAIN_TOL = 1e-9
ALIGN_TOL = 1e-9


class AlignmentError(ValueError):
    """A labelling box does not coincide with whole partition cells."""


@dataclass(frozen=True, eq=False)
class Partition:
    """Uniform axis-aligned grid over the box ``bounds``.

    Regions are numbered ``0 .. p-1`` in C order over the per-axis cell
    indices; index ``p`` is the absorbing region (everything outside
    ``bounds``). ``labels`` maps each proposition to a boolean mask of
    length ``p + 1``; the absorbing region carries no label.
    """

    bounds: np.ndarray
    counts: tuple
    edges: tuple
    labels: dict

    @property
    def n(self):
        return self.bounds.shape[0]

    @property
    def n_regions(self):
        return int(np.prod(self.counts))

    @property
    def absorbing(self):
        return self.n_regions

    @property
    def widths(self):
        return (self.bounds[:, 1] - self.bounds[:, 0]) / np.asarray(self.counts)

    def cell_index(self, i):
        return np.array(np.unravel_index(i, self.counts))

    def region_box(self, i):
        idx = self.cell_index(i)
        lo = np.array([self.edges[k][idx[k]] for k in range(self.n)])
        hi = np.array([self.edges[k][idx[k] + 1] for k in range(self.n)])
        return lo, hi

    @property
    def centers(self):
        mids = [0.5 * (e[:-1] + e[1:]) for e in self.edges]
        grid = np.meshgrid(*mids, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def region_vertices(self, i):
        lo, hi = self.region_box(i)
        return np.array(list(itertools.product(*zip(lo, hi))))

    def labels_of(self, i):
        return {p for p, mask in self.labels.items() if mask[i]}


def _snap(value, edges, axis):
    k = int(np.argmin(np.abs(edges - value)))
    scale = max(1.0, abs(value))
    if abs(edges[k] - value) > ALIGN_TOL * scale:
        raise AlignmentError(
            f"label box bound {value} on axis {axis} does not lie on a cell boundary"
        )
    return k


def build_partition(bounds, counts, label_rules=None):
    """Build a grid partition and label its cells.

    Parameters
    ----------
    bounds : array-like of shape (n, 2)
        The box being partitioned.
    counts : sequence of int
        Number of cells per axis.
    label_rules : dict, optional
        Maps a proposition name to a list of boxes; a cell carries the
        proposition iff it lies inside one of its boxes. Box bounds inside
        ``bounds`` must fall on cell boundaries, otherwise
        :class:`AlignmentError` is raised. Bounds outside the partition are
        clipped.
    """
    bounds = check_box(bounds, name="bounds")
    counts = tuple(int(c) for c in counts)
    if len(counts) != bounds.shape[0] or any(c < 1 for c in counts):
        raise ValueError("counts must give a positive cell count per axis")
    if np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError("partition bounds must have positive width on every axis")
    edges = tuple(np.linspace(lo, hi, c + 1) for (lo, hi), c in zip(bounds, counts))
    p = int(np.prod(counts))
    cell_idx = np.stack(np.unravel_index(np.arange(p), counts), axis=1)
    labels = {}
    for prop, boxes in (label_rules or {}).items():
        mask = np.zeros(p + 1, dtype=bool)
        for box in boxes:
            box = check_box(box, bounds.shape[0], name=f"label box of {prop!r}")
            inside = np.ones(p, dtype=bool)
            for k in range(bounds.shape[0]):
                lo, hi = box[k]
                if hi <= bounds[k, 0] or lo >= bounds[k, 1]:
                    inside[:] = False
                    break
                klo = 0 if lo <= bounds[k, 0] else _snap(lo, edges[k], k)
                khi = counts[k] if hi >= bounds[k, 1] else _snap(hi, edges[k], k)
                inside &= (cell_idx[:, k] >= klo) & (cell_idx[:, k] < khi)
            mask[:p] |= inside
        labels[str(prop)] = mask
    return Partition(bounds, counts, edges, labels)


def label_state(partition, x):
    """Map continuous state(s) to region indices.

    Cells are half-open ``[lo, hi)`` except on the upper faces of the
    partition box, which are closed. States outside the box map to the
    absorbing index. Accepts one state or a ``(k, n)`` batch.
    """
    single = np.ndim(x) == 1
    X = check_states(x, partition.n)
    idx = np.zeros(X.shape, dtype=np.int64)
    outside = np.zeros(X.shape[0], dtype=bool)
    for k, e in enumerate(partition.edges):
        col = X[:, k]
        outside |= (col < e[0]) | (col > e[-1]) | np.isnan(col)
        idx[:, k] = np.clip(np.searchsorted(e, col, side="right") - 1, 0, len(e) - 2)
    region = np.ravel_multi_index(idx.T, partition.counts)
    region[outside] = partition.absorbing
    return int(region[0]) if single else region


@dataclass(frozen=True, eq=False)
class Polytope:
    """H-representation ``{x : normals @ x <= offsets}``."""

    normals: np.ndarray
    offsets: np.ndarray

    def contains(self, x, tol=CONTAIN_TOL):
        X = np.atleast_2d(np.asarray(x, dtype=float))
        ok = np.all(X @ self.normals.T <= self.offsets + tol, axis=1)
        return bool(ok[0]) if np.ndim(x) == 1 else ok

    def is_empty(self):
        n = self.normals.shape[1]
        if self.normals.shape[0] == 0:
            return False
        res = linprog(np.zeros(n), A_ub=self.normals, b_ub=self.offsets,
                      bounds=[(None, None)] * n, method="highs")
        return res.status == 2

    def translate(self, t):
        return Polytope(self.normals, self.offsets + self.normals @ t)

    @classmethod
    def empty(cls, n):
        return cls(np.zeros((1, n)), np.array([-1.0]))

    @classmethod
    def from_box(cls, box):
        box = np.asarray(box, dtype=float)
        n = box.shape[0]
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([box[:, 1], -box[:, 0]]))


def _normalize(G, g):
    norms = np.linalg.norm(G, axis=1)
    norms[norms == 0] = 1.0
    return G / norms[:, None], g / norms


def _brs_template(mode, input_box):
    """H-rep of ``{-A^-1 B u : u in U}``; BRS(d) is this set shifted by ``A^-1 (d - q)``."""
    A_inv = np.linalg.inv(mode.A)
    n, m = mode.n, mode.m
    lo, hi = input_box[:, 0], input_box[:, 1]
    if m == n and abs(np.linalg.det(mode.B)) > 1e-12:
        # y = -A^-1 B u  <=>  u = -B^-1 A y, so the facets of U map through -B^-1 A.
        M = np.linalg.solve(mode.B, mode.A)
        G = np.vstack([-M, M])
        g = np.concatenate([hi, -lo])
        return _normalize(G, g)
    verts = np.array(list(itertools.product(*input_box)))
    pts = -(verts @ (A_inv @ mode.B).T)
    center = pts.mean(axis=0)
    try:
        hull = ConvexHull(pts - center)
        G, g = hull.equations[:, :-1], -hull.equations[:, -1]
        G, g = _normalize(G, g + G @ center)
        return _dedupe(G, g)
    except (QhullError, ValueError):
        # Flat image: keep its affine hull plus a bounding box (no interior).
        _, s, vt = np.linalg.svd(pts - center)
        rank = int(np.sum(s > 1e-9 * max(s.max(), 1.0)))
        perp = vt[rank:]
        G = np.vstack([perp, -perp, np.eye(n), -np.eye(n)])
        g = np.concatenate([perp @ center, -(perp @ center), pts.max(axis=0), -pts.min(axis=0)])
        return G, g


def _dedupe(G, g, tol=1e-9):
    keep = []
    for i in range(G.shape[0]):
        if not any(np.allclose(G[i], G[j], atol=tol) and abs(g[i] - g[j]) < tol for j in keep):
            keep.append(i)
    return G[keep], g[keep]


def backward_reach(mode, input_box, d):
    """States that reach ``d`` exactly in one noiseless step of ``mode``.

    Returns the polytope ``{A^-1 (d - q - B u) : u in U}``.
    """
    d = check_vector(d, mode.n, "d")
    G, g = _brs_template(mode, np.asarray(input_box, dtype=float))
    A_inv = np.linalg.inv(mode.A)
    return Polytope(G, g).translate(A_inv @ (d - mode.q))


def contains_region(poly, partition, i, tol=CONTAIN_TOL):
    """True iff every vertex of cell ``i`` satisfies every half-space of ``poly``."""
    if not 0 <= i < partition.n_regions:
        raise IndexError(f"region {i} is not an in-bounds cell")
    return bool(np.all(poly.contains(partition.region_vertices(i), tol)))


def enabled_actions(spec, partition, targets, mode, chunk=512):
    """Boolean matrix ``E[i, j]``: action ``j`` is enabled in region ``i``.

    Action ``j`` is enabled iff cell ``i`` lies inside the backward
    reachable set of ``targets[j]`` under ``mode``. The absorbing region is
    not included (it has no actions). Containment of a box in
    ``{G x <= g_j}`` is checked row-wise as
    ``G c_i + |G| h <= g_j``, the maximum of each half-space over the cell
    vertices.
    """
    md = spec.modes[mode]
    targets = check_states(targets, partition.n, "targets")
    G, g = _brs_template(md, spec.input_box)
    A_inv = np.linalg.inv(md.A)
    rhs = g[None, :] + (targets - md.q) @ (G @ A_inv).T  # (q, k)
    centers = partition.centers
    half = 0.5 * partition.widths
    lhs = centers @ G.T + np.abs(G) @ half  # (p, k)
    out = np.empty((centers.shape[0], targets.shape[0]), dtype=bool)
    for s in range(0, centers.shape[0], chunk):
        block = lhs[s:s + chunk, None, :] <= rhs[None, :, :] + CONTAIN_TOL
        out[s:s + chunk] = np.all(block, axis=2)
    return out


def robust_enabled_actions(spec, partition, targets, per_mode=None):
    """Actions enabled in a region under every mode (intersection over modes)."""
    if per_mode is None:
        per_mode = [enabled_actions(spec, partition, targets, r) for r in range(spec.n_modes)]
    out = per_mode[0].copy()
    for E in per_mode[1:]:
        out &= E
    return out


def enabled_to_dict(E):
    """Region -> sorted list of enabled action indices (for JSON export)."""
    return {int(i): [int(j) for j in np.flatnonzero(row)] for i, row in enumerate(E) if row.any()}
