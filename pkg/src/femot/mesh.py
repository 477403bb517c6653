"""Spatial meshes and time grids.

A :class:`SpatialMesh` is a conforming triangulation of a 2-D polygon made of
either triangles or parallelograms, stored with counterclockwise cells and a
facet table carrying a globally fixed orientation.  The facet normal of an
interior facet points from the lower-indexed incident cell to the higher one;
boundary normals point outward.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Base class for mesh construction and parsing failures."""


class MeshParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class MeshTopologyError(MeshError):
    def __init__(self, message: str, entity: int | None = None):
        self.entity = entity
        where = f"cell {entity}: " if entity is not None else ""
        super().__init__(where + message)


_NVERT = {"tri": 3, "quad": 4}


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class SpatialMesh:
    """Immutable 2-D mesh with facet connectivity.

    Parameters
    ----------
    vertices : (nv, 2) array_like
        Vertex coordinates.
    cells : (nc, 3) or (nc, 4) array_like of int
        Counterclockwise vertex indices per cell.
    kind : {"tri", "quad"}
        Cell type, homogeneous over the mesh.

    Attributes
    ----------
    facets : (nf, 2) int array
        Vertex pairs.  Rotating ``v1 - v0`` clockwise gives the global normal.
    facet_cells : (nf, 2) int array
        Incident cells, ``-1`` in the second slot for boundary facets.
    facet_signs : (nf, 2) int array
        +1 where the global normal is outward for that cell, -1 otherwise
        (0 for the missing neighbour of a boundary facet).
    cell_facets, cell_signs : (nc, k) int arrays
        Local edge ``k`` joins local vertices ``k`` and ``k+1``.
    """

    def __init__(self, vertices, cells, kind: str = "tri", *, tol: float = 1e-10):
        if kind not in _NVERT:
            raise MeshError(f"unknown cell kind {kind!r}")
        vertices = np.array(vertices, dtype=float).reshape(-1, 2)
        cells = np.array(cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[1] != _NVERT[kind]:
            raise MeshError(f"{kind} cells need {_NVERT[kind]} vertices each")
        self.kind = kind
        self.vertices = _readonly(vertices)
        self.cells = _readonly(cells)
        self._check_indices()
        self._compute_geometry(tol)
        self._compute_facets()

    # ------------------------------------------------------------------ setup
    def _check_indices(self):
        nv = len(self.vertices)
        for c, cell in enumerate(self.cells):
            if cell.min() < 0 or cell.max() >= nv:
                raise MeshTopologyError("vertex index out of range", c)
            if len(set(cell.tolist())) != len(cell):
                raise MeshTopologyError("repeated vertex", c)

    def _compute_geometry(self, tol):
        p = self.vertices[self.cells]
        e1 = p[:, 1] - p[:, 0]
        if self.kind == "tri":
            e2 = p[:, 2] - p[:, 0]
        else:
            e2 = p[:, 3] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # reference -> physical affine map x = origin + jac @ xhat
        jac = np.stack([e1, e2], axis=2)
        area = det / 2.0 if self.kind == "tri" else det.copy()
        for c in np.flatnonzero(area <= 0):
            raise MeshTopologyError(f"non-positive area {area[c]:.3e} (clockwise or degenerate)", int(c))
        if self.kind == "quad":
            scale = np.abs(p).max() + 1.0
            skew = np.abs(p[:, 0] + p[:, 2] - p[:, 1] - p[:, 3]).max(axis=1)
            for c in np.flatnonzero(skew > tol * scale):
                raise MeshTopologyError("quadrilateral is not a parallelogram", int(c))
        diff = p[:, :, None, :] - p[:, None, :, :]
        self.diameters = _readonly(np.sqrt((diff**2).sum(-1)).max(axis=(1, 2)))
        self.areas = _readonly(area)
        self.jacobians = _readonly(jac)
        self.dets = _readonly(det)
        self.origins = _readonly(p[:, 0].copy())
        self.centroids = _readonly(p.mean(axis=1))

    def _compute_facets(self):
        nc, k = self.cells.shape
        start = self.cells
        end = np.roll(self.cells, -1, axis=1)
        directed = np.stack([start, end], axis=2).reshape(-1, 2)
        keys = np.sort(directed, axis=1)
        _, first, inverse, counts = np.unique(
            keys, axis=0, return_index=True, return_inverse=True, return_counts=True
        )
        inverse = inverse.reshape(-1)
        if counts.max() > 2:
            bad = int(np.flatnonzero(counts[inverse] > 2)[0] // k)
            raise MeshTopologyError("edge shared by more than two cells", bad)
        # number facets by first appearance so ordering depends on indices only
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        facet_of = rank[inverse]
        nf = len(order)
        facets = directed[first[order]]
        is_first = np.zeros(len(directed), dtype=bool)
        is_first[first] = True
        signs = np.where(is_first, 1, -1)
        # a second occurrence must traverse the edge in the opposite direction
        second = np.flatnonzero(~is_first)
        same_dir = np.all(directed[second] == facets[facet_of[second]], axis=1)
        if same_dir.any():
            raise MeshTopologyError("inconsistent cell orientation or overlap", int(second[same_dir][0] // k))
        cell_ids = np.repeat(np.arange(nc), k)
        facet_cells = -np.ones((nf, 2), dtype=np.int64)
        facet_signs = np.zeros((nf, 2), dtype=np.int64)
        facet_cells[facet_of[is_first], 0] = cell_ids[is_first]
        facet_signs[facet_of[is_first], 0] = 1
        facet_cells[facet_of[second], 1] = cell_ids[second]
        facet_signs[facet_of[second], 1] = -1
        self.facets = _readonly(facets)
        self.facet_cells = _readonly(facet_cells)
        self.facet_signs = _readonly(facet_signs)
        self.cell_facets = _readonly(facet_of.reshape(nc, k))
        self.cell_signs = _readonly(signs.reshape(nc, k))
        self.boundary_facets = _readonly(facet_cells[:, 1] < 0)
        t = self.vertices[facets[:, 1]] - self.vertices[facets[:, 0]]
        self.facet_lengths = _readonly(np.hypot(t[:, 0], t[:, 1]))
        self.facet_normals = _readonly(np.stack([t[:, 1], -t[:, 0]], axis=1) / self.facet_lengths[:, None])

    # ------------------------------------------------------------- queries
    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def n_cell_vertices(self) -> int:
        return self.cells.shape[1]

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @property
    def bounding_box(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def map_to_physical(self, xhat) -> np.ndarray:
        """Map reference points ``(nq, 2)`` to physical points ``(nc, nq, 2)``."""
        xhat = np.atleast_2d(np.asarray(xhat, dtype=float))
        return self.origins[:, None, :] + np.einsum("cij,qj->cqi", self.jacobians, xhat)

    def find_cell(self, point) -> int:
        """Index of a cell containing ``point`` (first match), or -1."""
        x = np.asarray(point, dtype=float) - self.origins
        inv = np.linalg.inv(self.jacobians)
        xhat = np.einsum("cij,cj->ci", inv, x)
        eps = 1e-12
        inside = (xhat >= -eps).all(axis=1)
        if self.kind == "tri":
            inside &= xhat.sum(axis=1) <= 1 + eps
        else:
            inside &= (xhat <= 1 + eps).all(axis=1)
        hits = np.flatnonzero(inside)
        return int(hits[0]) if len(hits) else -1

    def same_connectivity(self, other: "SpatialMesh") -> bool:
        return (
            self.kind == other.kind
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.facets, other.facets)
            and np.array_equal(self.facet_cells, other.facet_cells)
        )

    def __repr__(self):
        return f"SpatialMesh(kind={self.kind!r}, n_cells={self.n_cells}, n_facets={self.n_facets})"


@dataclass(frozen=True)
class TimeGrid:
    """Nodes ``0 = t_0 < ... < t_n = 1`` of the time axis."""

    nodes: np.ndarray

    def __post_init__(self):
        t = np.array(self.nodes, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("need at least two time nodes")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise ValueError("time grid must start at 0 and end at 1")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time nodes must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "nodes", t)

    @classmethod
    def uniform(cls, n_intervals: int) -> "TimeGrid":
        if n_intervals < 1:
            raise ValueError("need at least one time interval")
        t = np.arange(n_intervals + 1) / n_intervals
        t[-1] = 1.0
        return cls(t)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_intervals(self) -> int:
        return len(self.nodes) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def uniform_step(self) -> float | None:
        dt = self.steps
        if np.allclose(dt, dt[0], rtol=1e-12, atol=0):
            return float(dt[0])
        return None


# ---------------------------------------------------------------- builders
def build_structured_triangular(nx: int, ny: int, diagonal_pattern: str = "uniform") -> SpatialMesh:
    """Unit square split into ``nx * ny`` squares, each cut into two triangles.

    ``uniform`` cuts every square along the same diagonal; ``alternating``
    flips the diagonal in a checkerboard pattern.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    if diagonal_pattern not in ("uniform", "alternating"):
        raise ValueError(f"unknown diagonal pattern {diagonal_pattern!r}")
    xs, ys = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1))
    vertices = np.column_stack([xs.ravel(), ys.ravel()])
    cells = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 2, a + nx + 1
            if diagonal_pattern == "alternating" and (i + j) % 2:
                cells += [(a, b, d), (b, c, d)]
            else:
                cells += [(a, b, c), (a, c, d)]
    return SpatialMesh(vertices, cells, "tri")


def build_structured_quadrilateral(nx: int, ny: int) -> SpatialMesh:
    """Unit square as ``nx * ny`` axis-aligned rectangles."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    xs, ys = np.meshgrid(np.linspace(0, 1, nx + 1), np.linspace(0, 1, ny + 1))
    vertices = np.column_stack([xs.ravel(), ys.ravel()])
    cells = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            cells.append((a, a + 1, a + nx + 2, a + nx + 1))
    return SpatialMesh(vertices, cells, "quad")


# ---------------------------------------------------------------------- io
def save_mesh(mesh: SpatialMesh, path) -> None:
    lines = ["dim 2", f"vertices {mesh.n_vertices}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines.append(f"cells {mesh.n_cells} {mesh.kind}")
    lines += [" ".join(str(v) for v in cell) for cell in mesh.cells.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> SpatialMesh:
    """Read the plain-text mesh format written by :func:`save_mesh`.

    Blank lines and ``#`` comments are ignored.  Boundary facets are derived
    from connectivity.
    """
    raw = Path(path).read_text().splitlines()
    lines = [(i + 1, ln.split("#", 1)[0].split()) for i, ln in enumerate(raw)]
    lines = [(n, tok) for n, tok in lines if tok]
    it = iter(lines)

    def header(word):
        try:
            n, tok = next(it)
        except StopIteration:
            raise MeshParseError(f"unexpected end of file, expected '{word}'") from None
        if tok[0] != word:
            raise MeshParseError(f"expected '{word}', got '{tok[0]}'", n)
        return n, tok

    n, tok = header("dim")
    if tok[1:] != ["2"]:
        raise MeshParseError("only 'dim 2' is supported", n)
    n, tok = header("vertices")
    nv = _parse_count(tok, n)
    vertices = []
    for _ in range(nv):
        n, tok = _next_line(it, "vertex")
        if len(tok) != 2:
            raise MeshParseError("vertex line needs two coordinates", n)
        try:
            vertices.append([float(t) for t in tok])
        except ValueError:
            raise MeshParseError("bad coordinate", n) from None
    n, tok = header("cells")
    if len(tok) != 3 or tok[2] not in _NVERT:
        raise MeshParseError("expected 'cells <m> <tri|quad>'", n)
    nc = _parse_count(tok[:2], n)
    kind = tok[2]
    cells = []
    for _ in range(nc):
        n, tok = _next_line(it, "cell")
        if len(tok) != _NVERT[kind]:
            raise MeshParseError(f"{kind} cell needs {_NVERT[kind]} indices", n)
        try:
            cells.append([int(t) for t in tok])
        except ValueError:
            raise MeshParseError("bad vertex index", n) from None
    extra = next(it, None)
    if extra is not None:
        raise MeshParseError("trailing content", extra[0])
    if nc == 0:
        raise MeshParseError("mesh has no cells")
    return SpatialMesh(vertices, cells, kind)


def _parse_count(tok, n):
    try:
        count = int(tok[1])
    except (IndexError, ValueError):
        raise MeshParseError("expected a count", n) from None
    if count < 0:
        raise MeshParseError("negative count", n)
    return count


def _next_line(it, what):
    try:
        return next(it)
    except StopIteration:
        raise MeshParseError(f"unexpected end of file while reading {what} lines") from None


def mesh_quality(mesh: SpatialMesh) -> float:
    """Smallest ``C`` with ``h**2 <= C * |T|`` for every cell (``h`` global max diameter)."""
    return float(mesh.h**2 / mesh.areas.min())
