"""Boundary densities and their projection onto piecewise constants.

Sources are either analytic expressions from a small catalog, a PGM raster
stretched over the mesh bounding box, or a per-cell table.  Projection takes
the cell average and rescales to unit mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fespace import subdivided_rule
from .mesh import SpatialMesh


class DensityError(ValueError):
    pass


def _vec(v, n=2):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.shape != (n,):
        raise DensityError(f"expected {n} components, got {a.tolist()}")
    return a


def _gaussian(x, x0=(0.5, 0.5), s=0.1):
    x0 = _vec(x0)
    r2 = ((x - x0) ** 2).sum(-1)
    return np.exp(-r2 / (2.0 * float(s) ** 2))


def _cosine_pair(x, x0=(0.5, 0.5), end=0):
    r = np.sqrt(((x - _vec(x0)) ** 2).sum(-1))
    sign = 1.0 if int(end) == 0 else -1.0
    return 1.5 + sign * np.cos(2.0 * np.pi * r)


def _uniform(x):
    return np.ones(x.shape[:-1])


def _indicator(x, rect=(0.0, 0.0, 1.0, 1.0)):
    x0, y0, x1, y1 = _vec(rect, 4)
    inside = (x[..., 0] >= x0) & (x[..., 0] <= x1) & (x[..., 1] >= y0) & (x[..., 1] <= y1)
    return inside.astype(float)


CATALOG = {
    "gaussian": _gaussian,
    "cosine_pair": _cosine_pair,
    "uniform": _uniform,
    "indicator": _indicator,
}


@dataclass(frozen=True)
class DensitySource:
    """A named density with parameters.

    ``kind`` is a catalog name, ``"pgm"`` (``params["path"]``) or
    ``"table"`` (``params["values"]`` or ``params["path"]``, one value per cell).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CATALOG and self.kind not in ("pgm", "table"):
            raise DensityError(f"unknown density {self.kind!r}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind not in CATALOG:
            raise DensityError(f"{self.kind} densities cannot be evaluated pointwise")
        return CATALOG[self.kind](np.asarray(x, dtype=float), **self.params)


# ------------------------------------------------------------ polygon clipping
def clip_area(poly: np.ndarray, rect) -> float:
    """Area of a convex counterclockwise polygon intersected with ``(x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = rect
    pts = [tuple(p) for p in poly]
    for axis, bound, keep_below in ((0, x0, False), (0, x1, True), (1, y0, False), (1, y1, True)):
        if not pts:
            return 0.0
        out = []
        for i, p in enumerate(pts):
            q = pts[(i + 1) % len(pts)]
            p_in = p[axis] <= bound if keep_below else p[axis] >= bound
            q_in = q[axis] <= bound if keep_below else q[axis] >= bound
            if p_in:
                out.append(p)
            if p_in != q_in:
                t = (bound - p[axis]) / (q[axis] - p[axis])
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
        pts = out
    if len(pts) < 3:
        return 0.0
    a = np.array(pts)
    return 0.5 * float(np.dot(a[:, 0], np.roll(a[:, 1], -1)) - np.dot(a[:, 1], np.roll(a[:, 0], -1)))


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit grayscale PGM (P2 or P5); row 0 is the top of the image."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and chr(data[pos]).isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not chr(data[pos]).isspace():
            pos += 1
        if start == pos:
            raise DensityError("truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in ("P2", "P5") or not 0 < maxval < 256:
        raise DensityError("only 8-bit P2/P5 PGM images are supported")
    if magic == "P5":
        raw = np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    else:
        raw = np.array(data[pos:].split()[: w * h], dtype=np.int64)
    if raw.size != w * h:
        raise DensityError("PGM pixel data is truncated")
    return raw.reshape(h, w).astype(float) / maxval


def _raster_averages(mesh: SpatialMesh, image: np.ndarray) -> np.ndarray:
    bx0, by0, bx1, by1 = mesh.bounding_box
    ny, nx = image.shape
    dx, dy = (bx1 - bx0) / nx, (by1 - by0) / ny
    out = np.zeros(mesh.n_cells)
    for c, cell in enumerate(mesh.cells):
        poly = mesh.vertices[cell]
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        i0 = max(int(np.floor((lo[0] - bx0) / dx)), 0)
        i1 = min(int(np.ceil((hi[0] - bx0) / dx)), nx)
        j0 = max(int(np.floor((lo[1] - by0) / dy)), 0)
        j1 = min(int(np.ceil((hi[1] - by0) / dy)), ny)
        acc = 0.0
        for j in range(j0, j1):
            for i in range(i0, i1):
                rect = (bx0 + i * dx, by0 + j * dy, bx0 + (i + 1) * dx, by0 + (j + 1) * dy)
                a = clip_area(poly, rect)
                if a > 0:
                    # image rows run top to bottom
                    acc += a * image[ny - 1 - j, i]
        out[c] = acc / mesh.areas[c]
    return out


def cell_averages(mesh: SpatialMesh, source: DensitySource, *, subdivisions: int = 4) -> np.ndarray:
    """Unnormalised cell averages ``(1/|T|) * integral of rho over T``."""
    if source.kind == "table":
        if "values" in source.params:
            vals = np.asarray(source.params["values"], dtype=float)
        else:
            vals = np.loadtxt(source.params["path"], dtype=float, ndmin=1)
        if vals.shape != (mesh.n_cells,):
            raise DensityError(f"table has {vals.size} values for {mesh.n_cells} cells")
        return vals.copy()
    if source.kind == "pgm":
        return _raster_averages(mesh, read_pgm(source.params["path"]))
    if source.kind == "indicator":
        rect = _vec(source.params.get("rect", (0, 0, 1, 1)), 4)
        return np.array([clip_area(mesh.vertices[c], rect) for c in mesh.cells]) / mesh.areas
    pts, wts = subdivided_rule(mesh.kind, subdivisions)
    x = mesh.map_to_physical(pts)
    vals = source(x)
    ref_area = 0.5 if mesh.kind == "tri" else 1.0
    return (vals * wts).sum(axis=1) / ref_area


def project_density(mesh: SpatialMesh, source: DensitySource, *, subdivisions: int = 4) -> np.ndarray:
    """Piecewise-constant projection of ``source`` rescaled to unit total mass."""
    avg = cell_averages(mesh, source, subdivisions=subdivisions)
    if not np.all(np.isfinite(avg)):
        raise DensityError("density evaluation produced non-finite values")
    if np.any(avg < 0):
        raise DensityError("density must be non-negative")
    mass = float(avg @ mesh.areas)
    if not mass > 0:
        raise DensityError("density has non-positive total mass")
    return avg / mass
