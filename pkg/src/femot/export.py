"""Writers for density snapshots, convergence logs and run summaries.

All writers produce deterministic byte streams: floats are printed with 17
significant digits and dictionaries with sorted keys.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mesh import SpatialMesh

VTK_TRIANGLE = 5
VTK_QUAD = 9


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def export_vtk(mesh: SpatialMesh, rho: np.ndarray, path, *, momentum: np.ndarray | None = None, title: str = "density"):
    """Legacy ASCII VTK unstructured grid with cell field ``density``.

    ``momentum`` (``(n_cells, 2)`` cell averages) is added as a vector field.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (mesh.n_cells,):
        raise ValueError(f"expected {mesh.n_cells} cell values, got shape {rho.shape}")
    nv = mesh.n_cell_vertices
    ctype = VTK_TRIANGLE if mesh.kind == "tri" else VTK_QUAD
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " "), "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [f"{_fmt(x)} {_fmt(y)} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (nv + 1)}")
    lines += [f"{nv} " + " ".join(str(int(i)) for i in c) for c in mesh.cells]
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines += [str(ctype)] * mesh.n_cells
    lines.append(f"CELL_DATA {mesh.n_cells}")
    lines += ["SCALARS density double 1", "LOOKUP_TABLE default"]
    lines += [_fmt(v) for v in rho]
    if momentum is not None:
        momentum = np.asarray(momentum, dtype=float)
        lines.append("VECTORS momentum double")
        lines += [f"{_fmt(u)} {_fmt(v)} 0" for u, v in momentum]
    Path(path).write_text("\n".join(lines) + "\n")


def read_vtk_header(path) -> dict:
    """Parse the section headers of a legacy VTK file written by :func:`export_vtk`."""
    out = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    out["version"] = lines[0]
    out["format"] = lines[2]
    out["dataset"] = lines[3].split()[1]
    for line in lines[4:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "POINTS":
            out["points"] = int(tok[1])
        elif tok[0] == "CELLS":
            out["cells"] = int(tok[1])
            out["cell_list_size"] = int(tok[2])
        elif tok[0] == "CELL_TYPES":
            out["cell_types"] = int(tok[1])
        elif tok[0] == "CELL_DATA":
            out["cell_data"] = int(tok[1])
        elif tok[0] == "SCALARS":
            out.setdefault("scalars", []).append(tok[1])
        elif tok[0] == "VECTORS":
            out.setdefault("vectors", []).append(tok[1])
    return out


CSV_COLUMNS = ("iter", "dsigma", "duality", "action", "min_rho")


def write_convergence_csv(report, path) -> None:
    n = report.iterations
    action = report.action if report.action else [float("nan")] * n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for k in range(n):
            w.writerow([k + 1] + [_fmt(v) for v in (report.dsigma[k], report.duality[k], action[k], report.min_rho[k])])


def read_convergence_csv(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}


def write_json(data: dict, path) -> None:
    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, float)):
            v = float(v)
            return v if np.isfinite(v) else repr(v)
        if isinstance(v, np.integer):
            return int(v)
        return v

    Path(path).write_text(json.dumps(clean(data), indent=2, sort_keys=True) + "\n")


def write_table_csv(rows: list[dict], path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], (float, np.floating)) else r[c] for c in cols])
