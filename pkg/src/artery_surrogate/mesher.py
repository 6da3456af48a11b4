"""Structured quadrilateral meshes over the square [-R, R]^2.

Each grid cell becomes a bilinear four-node element labelled by the tissue at
its centroid.  Lumen and exterior cells are dropped; the edges they share
with the remaining solid define the pressure boundary and the fixed boundary.

Binary layout written by :func:`save_mesh` (all little-endian, packed, in
this order after the JSON header file):

* nodes: ``num_nodes`` x 2 float64 (x, y in mm)
* elements: ``num_elements`` records of 4 x uint32 node ids + 1 uint8 label
* element grid cells: ``num_elements`` x 2 uint32 (i, j)
* lumen edges: ``num_lumen_edges`` x 2 uint32 (solid on the left)
* fixed nodes: ``num_fixed_nodes`` x uint32
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import GeometrySpec, TissueLabel, classify_point

__all__ = ["Mesh", "MeshError", "build_grid_mesh", "extract_lumen_boundary",
           "extract_outer_boundary", "trace_loops", "save_mesh", "load_mesh"]

ELEMENT_RECORD = np.dtype([("nodes", "<u4", (4,)), ("label", "u1")])

# CCW local node offsets and, per side, (local a, local b, neighbour di, dj).
_CORNERS = ((0, 0), (1, 0), (1, 1), (0, 1))
_SIDES = ((0, 1, 0, -1), (1, 2, 1, 0), (2, 3, 0, 1), (3, 0, -1, 0))


class MeshError(ValueError):
    """The labelled solid cannot be meshed (e.g. it is disconnected)."""


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray
    elements: np.ndarray
    labels: np.ndarray
    cells: np.ndarray
    lumen_boundary_edges: np.ndarray
    outer_fixed_nodes: np.ndarray
    grid_resolution: int
    half_width: float

    @property
    def cell_size(self) -> float:
        return 2.0 * self.half_width / self.grid_resolution

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_elements(self) -> int:
        return len(self.elements)

    def label_grid(self) -> np.ndarray:
        """(n, n) array of labels indexed [i, j]; removed cells are EXTERIOR."""
        n = self.grid_resolution
        grid = np.full((n, n), TissueLabel.EXTERIOR, dtype=np.uint8)
        grid[self.cells[:, 0], self.cells[:, 1]] = self.labels
        return grid


def grid_coordinates(n: int, half_width: float) -> np.ndarray:
    # (2i - n) * R / n is exactly antisymmetric, so mirrored meshes coincide.
    return (2 * np.arange(n + 1) - n) * half_width / n


def _cell_labels(spec: GeometrySpec, n: int) -> np.ndarray:
    R = spec.R
    centers = (2 * np.arange(n) + 1 - n) * R / n
    cx, cy = np.meshgrid(centers, centers, indexing="ij")
    return classify_point(spec, cx, cy)


def build_grid_mesh(spec: GeometrySpec, n: int = 256) -> Mesh:
    """Uniform n x n quad mesh of the artery wall.

    Raises
    ------
    MeshError
        If ``n < 16`` or the solid cells do not form one 4-connected region.
    """
    if n < 16:
        raise MeshError("grid resolution must be at least 16")
    cell_labels = _cell_labels(spec, n)
    return mesh_from_labels(cell_labels, spec.R)


def mesh_from_labels(cell_labels: np.ndarray, half_width: float) -> Mesh:
    """Build a mesh from an (n, n) grid of cell labels indexed [i, j]."""
    n = cell_labels.shape[0]
    solid = np.isin(cell_labels, (TissueLabel.ARTERY, TissueLabel.FIBROUS, TissueLabel.CALCIUM))
    if not solid.any():
        raise MeshError("no solid cells")
    _, ncomp = ndimage.label(solid)
    if ncomp != 1:
        raise MeshError(f"solid region has {ncomp} disconnected components")

    # Element order: j-major, i-minor (row by row from the bottom).
    jj, ii = np.nonzero(solid.T)
    cells = np.column_stack([ii, jj])
    grid_nodes = np.stack([(ii + di) + (n + 1) * (jj + dj) for di, dj in _CORNERS], axis=1)
    used, elements = np.unique(grid_nodes, return_inverse=True)
    elements = elements.reshape(-1, 4)
    coords = grid_coordinates(n, half_width)
    nodes = np.column_stack([coords[used % (n + 1)], coords[used // (n + 1)]])

    padded = np.full((n + 2, n + 2), TissueLabel.EXTERIOR, dtype=np.uint8)
    padded[1:-1, 1:-1] = cell_labels
    lumen_edges, fixed = [], []
    for a, b, di, dj in _SIDES:
        neighbour = padded[ii + 1 + di, jj + 1 + dj]
        edge = np.column_stack([elements[:, a], elements[:, b]])
        lumen_edges.append(edge[neighbour == TissueLabel.LUMEN])
        fixed.append(edge[neighbour == TissueLabel.EXTERIOR].ravel())
    loops = trace_loops(np.vstack(lumen_edges))
    ordered = np.vstack(loops) if loops else np.zeros((0, 2), dtype=np.int64)
    return Mesh(
        nodes=nodes,
        elements=elements.astype(np.int64),
        labels=cell_labels[ii, jj].astype(np.uint8),
        cells=cells.astype(np.int64),
        lumen_boundary_edges=ordered.astype(np.int64),
        outer_fixed_nodes=np.unique(np.concatenate(fixed)).astype(np.int64),
        grid_resolution=n,
        half_width=float(half_width),
    )


def trace_loops(edges: np.ndarray) -> list[np.ndarray]:
    """Split directed edges into closed loops, each an (m, 2) array in order.

    Every node on a lattice boundary has equal in- and out-degree, so greedy
    tracing always closes.  Ties at pinch vertices go to the lowest edge id,
    which keeps the result independent of anything but the edge list.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    outgoing: dict[int, list[int]] = {}
    for k, (a, _) in enumerate(edges):
        outgoing.setdefault(int(a), []).append(k)
    used = np.zeros(len(edges), dtype=bool)
    loops = []
    for start in np.argsort(edges[:, 0] * (edges.max(initial=0) + 1) + edges[:, 1], kind="stable"):
        if used[start]:
            continue
        loop = [start]
        used[start] = True
        head = int(edges[start, 0])
        node = int(edges[start, 1])
        while node != head:
            nxt = next(k for k in outgoing[node] if not used[k])
            used[nxt] = True
            loop.append(nxt)
            node = int(edges[nxt, 1])
        loops.append(edges[loop])
    return loops


def extract_lumen_boundary(mesh: Mesh) -> list[np.ndarray]:
    """Closed loops of lumen edges with the solid on the left."""
    return trace_loops(mesh.lumen_boundary_edges)


def extract_outer_boundary(mesh: Mesh) -> np.ndarray:
    """Indices of nodes on edges shared with removed exterior cells."""
    return mesh.outer_fixed_nodes


def save_mesh(mesh: Mesh, path) -> None:
    """Write ``<path>.json`` (header) and ``<path>.bin`` (binary block)."""
    path = Path(path)
    records = np.zeros(mesh.num_elements, dtype=ELEMENT_RECORD)
    records["nodes"] = mesh.elements
    records["label"] = mesh.labels
    blocks = [
        np.ascontiguousarray(mesh.nodes, dtype="<f8").tobytes(),
        records.tobytes(),
        np.ascontiguousarray(mesh.cells, dtype="<u4").tobytes(),
        np.ascontiguousarray(mesh.lumen_boundary_edges, dtype="<u4").tobytes(),
        np.ascontiguousarray(mesh.outer_fixed_nodes, dtype="<u4").tobytes(),
    ]
    header = {
        "format": "artery-quad-mesh", "version": 1,
        "grid_resolution": mesh.grid_resolution, "half_width_mm": mesh.half_width,
        "num_nodes": mesh.num_nodes, "num_elements": mesh.num_elements,
        "num_lumen_edges": len(mesh.lumen_boundary_edges),
        "num_fixed_nodes": len(mesh.outer_fixed_nodes),
        "block_bytes": [len(b) for b in blocks],
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))
    path.with_suffix(".bin").write_bytes(b"".join(blocks))


def load_mesh(path) -> Mesh:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    if len(raw) != sum(header["block_bytes"]):
        raise MeshError(f"{path}: binary block size does not match header")
    ne, nn = header["num_elements"], header["num_nodes"]
    off = 0

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.reshape(shape)

    nodes = take("<f8", nn * 2, (nn, 2)).copy()
    records = take(ELEMENT_RECORD, ne, (ne,))
    cells = take("<u4", ne * 2, (ne, 2)).astype(np.int64)
    nl = header["num_lumen_edges"]
    lumen = take("<u4", nl * 2, (nl, 2)).astype(np.int64)
    fixed = take("<u4", header["num_fixed_nodes"], (-1,)).astype(np.int64)
    return Mesh(nodes, records["nodes"].astype(np.int64), records["label"].copy(), cells,
                lumen, fixed, header["grid_resolution"], header["half_width_mm"])
