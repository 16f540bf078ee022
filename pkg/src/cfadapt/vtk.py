"""ASCII VTK XML unstructured-grid (.vtu) output of forest fields."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .mesh import Forest, NodeLayout

__all__ = ["write_vtu", "read_vtu", "VTK_QUAD"]

VTK_QUAD = 9
_QUAD_ORDER = [0, 1, 3, 2]  # lexicographic corners -> counter-clockwise


def _array(parent, name, values, components):
    values = np.asarray(values, dtype=float)
    da = ET.SubElement(parent, "DataArray", type="Float64", Name=name,
                       NumberOfComponents=str(components), format="ascii")
    da.text = " ".join(repr(float(v)) for v in values.ravel())


def write_vtu(path, forest: Forest, cell_data=None, point_data=None):
    """Write active cells as quads on their corner vertices.

    ``point_data`` arrays are indexed by the degree-1 node numbering of
    ``NodeLayout(forest, 1)``; vectors of shape ``(n, 2)`` are padded to 3D.
    """
    layout = NodeLayout(forest, degree=1)
    pts = np.zeros((layout.n_nodes, 3))
    pts[:, :2] = layout.coords
    conn = layout.cell_nodes[:, _QUAD_ORDER]
    root = ET.Element("VTKFile", type="UnstructuredGrid", version="0.1", byte_order="LittleEndian")
    grid = ET.SubElement(root, "UnstructuredGrid")
    piece = ET.SubElement(grid, "Piece", NumberOfPoints=str(len(pts)), NumberOfCells=str(len(conn)))
    points = ET.SubElement(piece, "Points")
    _array(points, "Points", pts, 3)
    cells = ET.SubElement(piece, "Cells")
    for name, vals in (("connectivity", conn.ravel()),
                       ("offsets", 4 * np.arange(1, len(conn) + 1)),
                       ("types", np.full(len(conn), VTK_QUAD))):
        da = ET.SubElement(cells, "DataArray", type="Int64", Name=name, format="ascii")
        da.text = " ".join(str(int(v)) for v in vals)
    if cell_data:
        cd = ET.SubElement(piece, "CellData")
        for name, vals in cell_data.items():
            vals = np.asarray(vals, float).reshape(len(conn), -1)
            _array(cd, name, vals, vals.shape[1])
    if point_data:
        pd = ET.SubElement(piece, "PointData")
        for name, vals in point_data.items():
            vals = np.asarray(vals, float).reshape(len(pts), -1)
            if vals.shape[1] == 2:
                vals = np.hstack([vals, np.zeros((len(vals), 1))])
            _array(pd, name, vals, vals.shape[1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(root).write(path, xml_declaration=True, encoding="utf-8")
    return path


def read_vtu(path):
    """Read a file written by :func:`write_vtu` into plain arrays."""
    root = ET.parse(path).getroot()
    piece = root.find("UnstructuredGrid/Piece")
    if piece is None:
        raise ValueError(f"{path}: not an unstructured grid file")

    def parse(da):
        dtype = int if da.get("type", "").startswith("Int") else float
        vals = np.array((da.text or "").split(), dtype=dtype)
        nc = int(da.get("NumberOfComponents", "1"))
        return vals.reshape(-1, nc) if nc > 1 else vals

    out = {"points": parse(piece.find("Points/DataArray")), "cell_data": {}, "point_data": {}}
    for da in piece.find("Cells"):
        out[da.get("Name")] = parse(da)
    for sec, key in (("CellData", "cell_data"), ("PointData", "point_data")):
        node = piece.find(sec)
        if node is not None:
            for da in node:
                out[key][da.get("Name")] = parse(da)
    return out
