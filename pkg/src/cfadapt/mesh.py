"""Quadtree forest over a structured base grid, with hanging-node constraints.

Cells are addressed by ``(level, i, j)``: the cell index in the uniform grid of
that level. Geometry is kept in integer units of half the finest cell size, so
every node of a degree-1 or degree-2 Lagrange element has exact integer
coordinates and coincident nodes are matched without tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Flag",
    "Forest",
    "Cell",
    "LevelCapError",
    "UnbalancedForestError",
    "ConstraintSet",
    "NodeLayout",
    "create_base_mesh",
    "refine_uniform",
    "execute_adaptation",
    "build_hanging_constraints",
    "is_balanced",
    "find_islands",
]

Key = tuple  # (level, i, j)

LEFT, RIGHT, BOTTOM, TOP = range(4)


class Flag(IntEnum):
    COARSEN = -1
    KEEP = 0
    REFINE = 1


class LevelCapError(ValueError):
    pass


class UnbalancedForestError(ValueError):
    pass


class Cell(NamedTuple):
    key: Key
    level: int
    parent: Key | None
    children: tuple | None
    active: bool
    corners: np.ndarray  # (4, 2) physical, counter-clockwise from lower-left


def _children(key):
    l, i, j = key
    return tuple((l + 1, 2 * i + di, 2 * j + dj) for dj in (0, 1) for di in (0, 1))


def _parent(key):
    l, i, j = key
    return (l - 1, i // 2, j // 2) if l > 0 else None


def _locate(cells, X, Y, max_level):
    """Cell of ``cells`` (any set of keys) that contains integer point (X, Y)."""
    if X < 0 or Y < 0:
        return None
    top = max_level + 1
    for l in range(max_level + 1):
        key = (l, X >> (top - l), Y >> (top - l))
        if key in cells:
            return key
    return None


class Forest:
    """Immutable quadtree forest. Adaptation returns a new instance."""

    def __init__(self, nx, ny, width, height, max_level, base, tree, active):
        self.nx, self.ny = int(nx), int(ny)
        self.domain_width, self.domain_height = float(width), float(height)
        self.max_level = int(max_level)
        self._base = tuple(base)
        self._tree = frozenset(tree)
        self._active_set = frozenset(active)

    # -- structure -------------------------------------------------------
    @property
    def base_nx(self):
        return self.nx

    @property
    def base_ny(self):
        return self.ny

    def unit(self, level):
        """Edge length of a level-``level`` cell in integer units."""
        return 1 << (self.max_level + 1 - level)

    @cached_property
    def scale(self):
        n = 1 << (self.max_level + 1)
        return np.array([self.domain_width / (self.nx * n), self.domain_height / (self.ny * n)])

    @cached_property
    def active(self) -> tuple:
        """Active cells in depth-first tree order (base cells row-major)."""
        out = []
        stack = []
        for b in self._base:
            stack.append(b)
            while stack:
                k = stack.pop()
                if k in self._active_set:
                    out.append(k)
                elif k in self._tree:
                    stack.extend(reversed(_children(k)))
        return tuple(out)

    @cached_property
    def index(self) -> dict:
        return {k: n for n, k in enumerate(self.active)}

    @property
    def n_active(self):
        return len(self.active)

    def __len__(self):
        return len(self.active)

    def is_active(self, key):
        return key in self._active_set

    def exists(self, key):
        return key in self._tree

    def cell(self, key) -> Cell:
        if key not in self._tree:
            raise KeyError(key)
        kids = _children(key)
        has_kids = kids[0] in self._tree
        l, i, j = key
        S = self.unit(l)
        c = np.array([[i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1]]) * S * self.scale
        return Cell(key, l, _parent(key), kids if has_kids else None, key in self._active_set, c)

    @cached_property
    def levels(self):
        return np.array([k[0] for k in self.active], dtype=int)

    @cached_property
    def _ij(self):
        return np.array([(k[1], k[2]) for k in self.active], dtype=np.int64).reshape(-1, 2)

    @cached_property
    def int_origin(self):
        """Lower-left corner of every active cell in integer units."""
        S = np.left_shift(1, self.max_level + 1 - self.levels)
        return self._ij * S[:, None]

    @cached_property
    def int_size(self):
        return np.left_shift(1, self.max_level + 1 - self.levels).astype(np.int64)

    @cached_property
    def cell_size(self):
        """(n, 2) physical edge lengths (hx, hy)."""
        return self.int_size[:, None] * self.scale[None, :]

    @cached_property
    def origin(self):
        return self.int_origin * self.scale[None, :]

    @cached_property
    def centroids(self):
        return self.origin + 0.5 * self.cell_size

    @cached_property
    def areas(self):
        return self.cell_size[:, 0] * self.cell_size[:, 1]

    @property
    def area(self):
        return float(self.areas.sum())

    def path_key(self, key) -> str:
        l, i, j = key
        quads = []
        for _ in range(l):
            quads.append(str((i & 1) + 2 * (j & 1)))
            i >>= 1
            j >>= 1
        return f"{j * self.nx + i}:" + "".join(reversed(quads))

    def dump(self) -> str:
        """One line per tree cell: path key, level, active flag (tree order)."""
        lines = []
        for b in self._base:
            stack = [b]
            while stack:
                k = stack.pop()
                if k not in self._tree:
                    continue
                active = k in self._active_set
                lines.append(f"{self.path_key(k)} {k[0]} {int(active)}")
                if not active:
                    stack.extend(reversed(_children(k)))
        return "\n".join(lines) + "\n"

    # -- geometry queries -----------------------------------------------
    def locate(self, X, Y):
        return _locate(self._active_set, int(X), int(Y), self.max_level)

    def locate_point(self, x, y):
        """Active cell containing the physical point (half-open cells)."""
        X = int(np.floor(x / self.scale[0] + 1e-9))
        Y = int(np.floor(y / self.scale[1] + 1e-9))
        return self.locate(X, Y)

    @cached_property
    def face_neighbors(self) -> tuple:
        """Per active cell, per face (left, right, bottom, top): neighbour keys."""
        return tuple(_face_neighbors(self._active_set, k, self.max_level) for k in self.active)

    @cached_property
    def boundary_faces(self) -> list:
        """(cell index, face) pairs on the domain boundary."""
        return [
            (n, f)
            for n, nbrs in enumerate(self.face_neighbors)
            for f in range(4)
            if not nbrs[f]
        ]

    def __eq__(self, other):
        if not isinstance(other, Forest):
            return NotImplemented
        return (
            self._active_set == other._active_set
            and self._tree == other._tree
            and (self.nx, self.ny, self.max_level) == (other.nx, other.ny, other.max_level)
        )

    def __hash__(self):
        return hash((self._active_set, self.nx, self.ny))

    def __repr__(self):
        return f"Forest({self.nx}x{self.ny}, active={self.n_active}, max_level={self.max_level})"


def _face_samples(key, face, max_level, all_subfaces=True):
    l, i, j = key
    S = 1 << (max_level + 1 - l)
    if all_subfaces and S >= 4:
        offs = (S // 4, 3 * S // 4)
    else:
        offs = (S // 2,)
    if face == LEFT:
        return [(i * S - 1, j * S + o) for o in offs]
    if face == RIGHT:
        return [((i + 1) * S, j * S + o) for o in offs]
    if face == BOTTOM:
        return [(i * S + o, j * S - 1) for o in offs]
    return [(i * S + o, (j + 1) * S) for o in offs]


def _face_neighbors(cells, key, max_level):
    out = []
    for f in range(4):
        found = []
        for X, Y in _face_samples(key, f, max_level):
            n = _locate(cells, X, Y, max_level)
            if n is not None and n not in found:
                found.append(n)
        out.append(tuple(found))
    return tuple(out)


def create_base_mesh(nx, ny, width, height, max_level=4, mask=None) -> Forest:
    """Structured ``nx x ny`` grid of level-0 cells.

    ``mask`` (shape ``(ny, nx)``, optional) removes base cells to build
    non-rectangular domains from axis-aligned blocks.
    """
    if int(nx) < 1 or int(ny) < 1:
        raise ValueError(f"cell counts must be >= 1, got nx={nx}, ny={ny}")
    if not (width > 0 and height > 0):
        raise ValueError(f"domain dimensions must be positive, got {width}x{height}")
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    if mask is None:
        mask = np.ones((ny, nx), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (ny, nx):
        raise ValueError(f"mask shape {mask.shape} does not match ({ny}, {nx})")
    base = [(0, i, j) for j in range(ny) for i in range(nx) if mask[j, i]]
    if not base:
        raise ValueError("mask removes every base cell")
    return Forest(nx, ny, width, height, max_level, base, base, base)


def _refine_all(forest: Forest, keys) -> Forest:
    tree = set(forest._tree)
    active = set(forest._active_set)
    for k in keys:
        kids = _children(k)
        tree.update(kids)
        active.discard(k)
        active.update(kids)
    return Forest(forest.nx, forest.ny, forest.domain_width, forest.domain_height,
                  forest.max_level, forest._base, tree, active)


def refine_uniform(forest: Forest, times: int) -> Forest:
    if times < 0:
        raise ValueError("times must be >= 0")
    if times and int(forest.levels.max()) + times > forest.max_level:
        raise LevelCapError(
            f"uniform refinement to level {int(forest.levels.max()) + times} "
            f"exceeds max_level={forest.max_level}"
        )
    for _ in range(times):
        forest = _refine_all(forest, forest.active)
    return forest


def _resulting_cells(active, refine, coarsen):
    cells = set(active)
    for k in refine:
        cells.discard(k)
        cells.update(_children(k))
    for p in coarsen:
        cells.difference_update(_children(p))
        cells.add(p)
    return cells


def execute_adaptation(forest: Forest, flags) -> Forest:
    """Apply refine/coarsen flags with refine-over-coarsen priority.

    A sibling quartet is coarsened only if all four are active and flagged
    coarsen. Afterwards 2:1 balance is restored by cancelling coarsening or
    promoting cells to refinement, and unrefined islands are refined.
    """
    flags = np.asarray(flags)
    if flags.shape != (forest.n_active,):
        raise ValueError(f"expected {forest.n_active} flags, got shape {flags.shape}")
    M = forest.max_level
    active = forest._active_set
    by_key = dict(zip(forest.active, flags.tolist()))

    refine = {k for k, f in by_key.items() if f == Flag.REFINE and k[0] < M}
    coarsen = set()
    for k, f in by_key.items():
        if f != Flag.COARSEN or k[0] == 0:
            continue
        p = _parent(k)
        if p in coarsen:
            continue
        if all(by_key.get(c) == Flag.COARSEN for c in _children(p)):
            coarsen.add(p)

    def resolve(coarse_key):
        """Make ``coarse_key`` (a cell of the tentative mesh) finer."""
        if coarse_key in coarsen:
            coarsen.discard(coarse_key)
        elif coarse_key in active and coarse_key not in refine and coarse_key[0] < M:
            refine.add(coarse_key)
        else:  # pragma: no cover - input forest was not balanced
            raise UnbalancedForestError(f"cannot balance around cell {coarse_key}")

    while True:
        cells = _resulting_cells(active, refine, coarsen)
        violators = set()
        for c in cells:
            for f in range(4):
                (X, Y), = _face_samples(c, f, M, all_subfaces=False)
                n = _locate(cells, X, Y, M)
                if n is not None and n[0] <= c[0] - 2:
                    violators.add(n)
        if not violators:
            violators = set(_islands(cells, M))
        if not violators:
            break
        for n in sorted(violators):
            resolve(n)

    tree = set(forest._tree)
    for k in refine:
        tree.update(_children(k))
    for p in coarsen:
        tree.difference_update(_children(p))
    cells = _resulting_cells(active, refine, coarsen)
    return Forest(forest.nx, forest.ny, forest.domain_width, forest.domain_height,
                  M, forest._base, tree, cells)


def _islands(cells, max_level):
    out = []
    for c in cells:
        if c[0] >= max_level:
            continue
        faces = [face for face in _face_neighbors(cells, c, max_level) if face]
        # a cell touching the rest of the mesh through a single face is not enclosed
        if len(faces) >= 2 and all(n[0] > c[0] for face in faces for n in face):
            out.append(c)
    return out


def find_islands(forest: Forest):
    return sorted(_islands(forest._active_set, forest.max_level))


def is_balanced(forest: Forest) -> bool:
    for k, nbrs in zip(forest.active, forest.face_neighbors):
        for face in nbrs:
            for n in face:
                if abs(n[0] - k[0]) > 1:
                    return False
    return True


# ---------------------------------------------------------------------------
# nodes and constraints


class NodeLayout:
    """Lagrange node numbering (degree 1 or 2) on the active cells of a forest.

    Local node ``a + (degree+1)*b`` sits at offset ``(a, b) * size/degree`` from
    the cell's lower-left corner.
    """

    def __init__(self, forest: Forest, degree: int = 2):
        if degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        self.forest = forest
        self.degree = degree
        d = degree
        n1 = d + 1
        a, b = np.meshgrid(np.arange(n1), np.arange(n1), indexing="xy")
        local = np.stack([a.ravel(), b.ravel()], axis=1)  # (npe, 2)
        step = forest.int_size // d
        keys = forest.int_origin[:, None, :] + local[None, :, :] * step[:, None, None]
        self.npe = n1 * n1
        self._stride = np.int64(1) << 40
        enc = keys[..., 0] * self._stride + keys[..., 1]
        uniq, inv = np.unique(enc.ravel(), return_inverse=True)
        self._enc = uniq
        self.cell_nodes = inv.reshape(forest.n_active, self.npe)
        self.node_keys = np.stack([uniq // self._stride, uniq % self._stride], axis=1)
        self.coords = self.node_keys * forest.scale[None, :]

    @property
    def n_nodes(self):
        return len(self._enc)

    @property
    def corner_local(self):
        d = self.degree
        return [0, d, d * (d + 1), (d + 1) ** 2 - 1]

    def face_local(self, face):
        n1 = self.degree + 1
        if face == LEFT:
            return [n1 * b for b in range(n1)]
        if face == RIGHT:
            return [n1 * b + n1 - 1 for b in range(n1)]
        if face == BOTTOM:
            return list(range(n1))
        return [n1 * (n1 - 1) + a for a in range(n1)]

    def lookup(self, keys):
        """Node ids for integer keys (shape (..., 2)); -1 where absent."""
        keys = np.asarray(keys, dtype=np.int64)
        enc = keys[..., 0] * self._stride + keys[..., 1]
        pos = np.searchsorted(self._enc, enc)
        pos = np.clip(pos, 0, len(self._enc) - 1)
        return np.where(self._enc[pos] == enc, pos, -1)

    @cached_property
    def boundary_nodes(self):
        out = set()
        for n, f in self.forest.boundary_faces:
            out.update(self.cell_nodes[n, self.face_local(f)].tolist())
        return np.array(sorted(out), dtype=int)

    @cached_property
    def vertex_mask(self):
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.cell_nodes[:, self.corner_local].ravel()] = True
        return mask


class ConstraintSet:
    """Affine constraints ``u[slave] = sum(w * u[master]) + value``."""

    def __init__(self):
        self._c: dict[int, tuple[tuple, tuple, float]] = {}

    def add(self, slave, masters=(), weights=(), value=0.0):
        slave = int(slave)
        entry = (tuple(int(m) for m in masters), tuple(float(w) for w in weights), float(value))
        if slave in self._c:
            if self._c[slave] == entry:
                return
            raise ValueError(f"dof {slave} is already constrained differently")
        if len(entry[0]) != len(entry[1]):
            raise ValueError("masters and weights differ in length")
        self._c[slave] = entry

    def merge(self, other: "ConstraintSet"):
        for s, (m, w, v) in other._c.items():
            self.add(s, m, w, v)
        return self

    def __len__(self):
        return len(self._c)

    def __contains__(self, dof):
        return int(dof) in self._c

    def __iter__(self) -> Iterator:
        for s in sorted(self._c):
            m, w, v = self._c[s]
            yield s, list(zip(m, w)), v

    @property
    def slaves(self):
        return np.array(sorted(self._c), dtype=int)

    def close(self, max_depth=16):
        """Substitute constrained masters until no master is itself a slave."""
        for _ in range(max_depth):
            changed = False
            new = {}
            for s, (ms, ws, v) in self._c.items():
                if not any(m in self._c for m in ms):
                    new[s] = (ms, ws, v)
                    continue
                changed = True
                acc: dict[int, float] = {}
                for m, w in zip(ms, ws):
                    if m in self._c:
                        mm, mw, mv = self._c[m]
                        v += w * mv
                        for m2, w2 in zip(mm, mw):
                            acc[m2] = acc.get(m2, 0.0) + w * w2
                    else:
                        acc[m] = acc.get(m, 0.0) + w
                if s in acc:
                    raise ValueError(f"cyclic constraint on dof {s}")
                keys = sorted(acc)
                new[s] = (tuple(keys), tuple(acc[k] for k in keys), v)
            self._c = new
            if not changed:
                return self
        raise ValueError("constraint chains did not resolve")

    def condensation(self, n_dofs):
        """Return ``(T, g, free)`` with ``u = T @ u_free + g``."""
        self.close()
        is_slave = np.zeros(n_dofs, dtype=bool)
        is_slave[self.slaves] = True
        free = np.flatnonzero(~is_slave)
        col = -np.ones(n_dofs, dtype=int)
        col[free] = np.arange(len(free))
        rows = [free]
        cols = [np.arange(len(free))]
        vals = [np.ones(len(free))]
        g = np.zeros(n_dofs)
        for s, (ms, ws, v) in self._c.items():
            g[s] = v
            if ms:
                rows.append(np.full(len(ms), s))
                cols.append(col[list(ms)])
                vals.append(np.array(ws))
        T = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_dofs, len(free)),
        )
        return T, g, free

    def distribute(self, u):
        """Overwrite slave entries of ``u`` in place from their masters."""
        self.close()
        for s, (ms, ws, v) in self._c.items():
            u[s] = v + sum(w * u[m] for m, w in zip(ms, ws))
        return u


def _lagrange_1d(degree, t):
    nodes = np.linspace(0.0, 1.0, degree + 1)
    w = np.ones(degree + 1)
    for m in range(degree + 1):
        for k in range(degree + 1):
            if k != m:
                w[m] *= (t - nodes[k]) / (nodes[m] - nodes[k])
    return w


def build_hanging_constraints(forest: Forest, layout: NodeLayout, n_components: int = 1) -> ConstraintSet:
    """Hanging-node constraints for a nodal field with ``n_components`` per node.

    The dof of component ``c`` at node ``n`` is ``n * n_components + c``. A
    node on a coarse neighbour's face that is not one of its nodes is tied to
    that face's trace (Lagrange interpolation of the face nodes).
    """
    d = layout.degree
    node_cs = ConstraintSet()
    keys_of = layout.node_keys
    for idx, (k, nbrs) in enumerate(zip(forest.active, forest.face_neighbors)):
        for f in range(4):
            face = nbrs[f]
            if not face:
                continue
            lev = min(n[0] for n in face)
            if k[0] - lev > 1 or max(n[0] for n in face) - k[0] > 1:
                raise UnbalancedForestError(f"cell {k} violates 2:1 balance")
            if len(face) != 1 or face[0][0] != k[0] - 1:
                continue
            coarse = face[0]
            Sc = forest.unit(coarse[0])
            axis = 1 if f in (LEFT, RIGHT) else 0
            start = (coarse[1], coarse[2])[axis] * Sc
            fine_nodes = layout.cell_nodes[idx, layout.face_local(f)]
            fine_keys = keys_of[fine_nodes]
            line = fine_keys[0, 1 - axis]
            master_keys = np.zeros((d + 1, 2), dtype=np.int64)
            master_keys[:, axis] = start + np.arange(d + 1) * (Sc // d)
            master_keys[:, 1 - axis] = line
            masters = layout.lookup(master_keys)
            if np.any(masters < 0):  # pragma: no cover
                raise RuntimeError("coarse face node missing from layout")
            for node, key in zip(fine_nodes, fine_keys):
                t = (key[axis] - start) / Sc
                if abs(t * d - round(t * d)) < 1e-12:
                    continue
                node_cs.add(node, masters, _lagrange_1d(d, t))
    if n_components == 1:
        return node_cs.close()
    cs = ConstraintSet()
    for s, mw, v in node_cs:
        for c in range(n_components):
            cs.add(s * n_components + c, [m * n_components + c for m, _ in mw], [w for _, w in mw], v)
    return cs.close()
