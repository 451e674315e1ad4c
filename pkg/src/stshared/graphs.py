"""Spatial adjacency graphs and intrinsic structure matrices.

Builds the precision templates used throughout the package:

* ``icar_structure`` -- graph Laplacian of an adjacency graph (diagonal =
  neighbour counts, off-diagonal -1 for neighbours).
* ``rw1_structure`` / ``rw2_structure`` -- difference-matrix cross products
  for first/second order random walks in time.
* ``interaction_structure`` -- the four space-time interaction templates
  obtained by Kronecker-combining the spatial and temporal pieces
  (unstructured, time-structured, space-structured, fully structured).

All matrices are assembled with exact integer entries, so kernel vectors
with integer coordinates are annihilated exactly in floating point.  Ranks
are derived combinatorially (component counts, difference orders, Kronecker
rank products) rather than detected numerically.

Cell ordering convention: space-time cells are stacked area-fastest, i.e.
cell (area i, period t) lives at flat index ``t * A + i``.  Kronecker
products therefore always take the temporal factor first:
``kron(temporal, spatial)``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "GraphFormatError",
    "AdjacencyGraph",
    "StructureMatrix",
    "load_graph",
    "lattice_graph",
    "path_graph",
    "icar_structure",
    "rw1_structure",
    "rw2_structure",
    "interaction_structure",
    "kronecker",
    "INTERACTION_KINDS",
]

INTERACTION_KINDS = ("I", "II", "III", "IV")

_MAX_KRON_DIM = 50_000_000


class GraphFormatError(ValueError):
    """Raised for malformed or inconsistent adjacency-graph input."""


@dataclass(frozen=True)
class AdjacencyGraph:
    """Undirected spatial adjacency graph.

    Parameters
    ----------
    n_areas : int
        Number of areas (nodes), indexed 0-based.
    edges : tuple of (int, int)
        Unordered neighbour pairs, stored sorted with i < j, no
        duplicates, no self-loops.
    component_labels : tuple of int
        Connected-component label per area.
    """

    n_areas: int
    edges: tuple[tuple[int, int], ...]
    component_labels: tuple[int, ...] = field(repr=False)

    @property
    def n_components(self) -> int:
        return len(set(self.component_labels)) if self.component_labels else 0

    @property
    def connected(self) -> bool:
        return self.n_components <= 1

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_areas, dtype=np.int64)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    @classmethod
    def from_edges(cls, n_areas: int, edges) -> "AdjacencyGraph":
        """Validate an edge list and compute connectivity."""
        if n_areas <= 0:
            raise GraphFormatError(f"n_areas must be positive, got {n_areas}")
        canon = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if not (0 <= i < n_areas and 0 <= j < n_areas):
                raise GraphFormatError(f"edge ({i},{j}) out of range [0,{n_areas})")
            if i == j:
                raise GraphFormatError(f"self-loop at node {i}")
            pair = (min(i, j), max(i, j))
            if pair in canon:
                raise GraphFormatError(f"duplicate edge {pair}")
            canon.add(pair)
        edge_tuple = tuple(sorted(canon))
        if edge_tuple:
            rows = [e[0] for e in edge_tuple] + [e[1] for e in edge_tuple]
            cols = [e[1] for e in edge_tuple] + [e[0] for e in edge_tuple]
            adj = sp.coo_array(
                (np.ones(len(rows)), (rows, cols)), shape=(n_areas, n_areas)
            )
            _, labels = connected_components(adj, directed=False)
        else:
            labels = np.arange(n_areas)
        return cls(n_areas, edge_tuple, tuple(int(x) for x in labels))

    def permute(self, perm) -> "AdjacencyGraph":
        """Relabel areas: node i becomes perm[i]."""
        perm = np.asarray(perm)
        new_edges = [(int(perm[i]), int(perm[j])) for i, j in self.edges]
        return AdjacencyGraph.from_edges(self.n_areas, new_edges)


@dataclass(frozen=True)
class StructureMatrix:
    """Sparse symmetric PSD precision template with known kernel.

    Attributes
    ----------
    dim : int
        Matrix dimension.
    entries : scipy.sparse.csr_array
        The matrix itself, assembled exactly (symmetric by construction).
    rank : int
        Rank, derived combinatorially.
    null_basis : ndarray, shape (dim, dim - rank)
        Orthonormal basis of the kernel.
    exact_kernel : ndarray, shape (dim, m)
        Generators spanning the kernel (m >= dim - rank, possibly
        redundant).  Integer-valued for graph-assembled structures, in
        which case ``entries @ exact_kernel`` is exactly zero in floating
        point (every product and partial sum is an integer below 2**53).
    """

    dim: int
    entries: sp.csr_array = field(repr=False)
    rank: int
    null_basis: np.ndarray = field(repr=False)
    exact_kernel: np.ndarray = field(repr=False)

    @property
    def null_dim(self) -> int:
        return self.dim - self.rank

    def toarray(self) -> np.ndarray:
        return self.entries.toarray()


def _orthonormal_kernel(generators: np.ndarray, null_dim: int) -> np.ndarray:
    """Orthonormal basis of span(generators), known to have rank null_dim."""
    if null_dim == 0 or generators.size == 0:
        return np.zeros((generators.shape[0], 0))
    u, s, _ = np.linalg.svd(generators, full_matrices=False)
    return u[:, :null_dim]


def _make_structure(mat: sp.csr_array, rank: int, generators: np.ndarray) -> StructureMatrix:
    dim = mat.shape[0]
    basis = _orthonormal_kernel(generators, dim - rank)
    return StructureMatrix(dim=dim, entries=mat, rank=rank,
                           null_basis=basis, exact_kernel=generators)


def load_graph(source) -> AdjacencyGraph:
    """Parse an adjacency graph from a byte/text stream or bytes.

    Format: first non-empty line holds the number of areas; then one line
    per node: ``<node-id> <num-neighbours> <neighbour-id>...`` with 0-based
    ids.  Neighbour declarations must be symmetric.

    Raises
    ------
    GraphFormatError
        On malformed lines, asymmetric declarations, out-of-range ids,
        duplicate or missing node lines.
    """
    if isinstance(source, (bytes, bytearray)):
        text = bytes(source).decode("utf-8")
    elif isinstance(source, str):
        text = source
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        raise TypeError(f"unsupported graph source {type(source)!r}")

    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GraphFormatError("empty graph file")
    try:
        n = int(lines[0])
    except ValueError as exc:
        raise GraphFormatError(f"bad header line {lines[0]!r}") from exc
    if n <= 0:
        raise GraphFormatError(f"n_areas must be positive, got {n}")
    if len(lines) - 1 != n:
        raise GraphFormatError(f"expected {n} node lines, found {len(lines) - 1}")

    neighbours: dict[int, list[int]] = {}
    for ln in lines[1:]:
        parts = ln.split()
        try:
            vals = [int(p) for p in parts]
        except ValueError as exc:
            raise GraphFormatError(f"malformed node line {ln!r}") from exc
        if len(vals) < 2:
            raise GraphFormatError(f"malformed node line {ln!r}")
        node, count, nbrs = vals[0], vals[1], vals[2:]
        if len(nbrs) != count:
            raise GraphFormatError(
                f"node {node}: declared {count} neighbours, listed {len(nbrs)}"
            )
        if not 0 <= node < n:
            raise GraphFormatError(f"node id {node} out of range [0,{n})")
        if node in neighbours:
            raise GraphFormatError(f"duplicate node line for {node}")
        for j in nbrs:
            if not 0 <= j < n:
                raise GraphFormatError(f"node {node}: neighbour {j} out of range")
            if j == node:
                raise GraphFormatError(f"self-loop at node {node}")
        if len(set(nbrs)) != len(nbrs):
            raise GraphFormatError(f"node {node}: duplicate neighbour entry")
        neighbours[node] = nbrs

    missing = set(range(n)) - set(neighbours)
    if missing:
        raise GraphFormatError(f"missing node lines for {sorted(missing)}")
    for i, nbrs in neighbours.items():
        for j in nbrs:
            if i not in neighbours[j]:
                raise GraphFormatError(
                    f"asymmetric declaration: {j} listed for {i} but not vice versa"
                )

    edges = [(i, j) for i, nbrs in neighbours.items() for j in nbrs if i < j]
    return AdjacencyGraph.from_edges(n, edges)


def lattice_graph(rows: int, cols: int) -> AdjacencyGraph:
    """Rook-adjacency rectangular lattice with rows*cols areas."""
    if rows <= 0 or cols <= 0:
        raise GraphFormatError("lattice dimensions must be positive")
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((k, k + 1))
            if r + 1 < rows:
                edges.append((k, k + cols))
    return AdjacencyGraph.from_edges(rows * cols, edges)


def path_graph(n: int) -> AdjacencyGraph:
    """Path 0 - 1 - ... - (n-1)."""
    return AdjacencyGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def icar_structure(graph: AdjacencyGraph) -> StructureMatrix:
    """Graph-Laplacian spatial structure matrix.

    Diagonal entries are neighbour counts, off-diagonals -1 for
    neighbours.  Rank is ``n_areas - n_components``; the kernel is spanned
    by the component indicator vectors.
    """
    n = graph.n_areas
    deg = graph.degrees().astype(float)
    rows, cols, vals = [], [], []
    for i, j in graph.edges:
        rows += [i, j]
        cols += [j, i]
        vals += [-1.0, -1.0]
    rows += list(range(n))
    cols += list(range(n))
    vals += list(deg)
    mat = sp.csr_array(sp.coo_array((vals, (rows, cols)), shape=(n, n)))
    labels = np.asarray(graph.component_labels)
    comps = sorted(set(graph.component_labels))
    gen = np.stack([(labels == c).astype(float) for c in comps], axis=1)
    return _make_structure(mat, rank=n - len(comps), generators=gen)


def _difference_matrix(T: int, order: int) -> sp.csr_array:
    d = sp.eye_array(T, format="csr")
    for _ in range(order):
        k = d.shape[0]
        d = sp.csr_array(d[1:, :] - d[:-1, :])
        assert d.shape[0] == k - 1
    return d


def rw1_structure(T: int) -> StructureMatrix:
    """First-order random-walk structure matrix D'D (first differences)."""
    if T < 2:
        raise ValueError(f"rw1 needs T >= 2, got {T}")
    d = _difference_matrix(T, 1)
    mat = sp.csr_array(d.T @ d)
    gen = np.ones((T, 1))
    return _make_structure(mat, rank=T - 1, generators=gen)


def rw2_structure(T: int) -> StructureMatrix:
    """Second-order random-walk structure matrix D2'D2 (second differences).

    Kernel holds constant and linear-in-time vectors.
    """
    if T < 3:
        raise ValueError(f"rw2 needs T >= 3, got {T}")
    d = _difference_matrix(T, 2)
    mat = sp.csr_array(d.T @ d)
    gen = np.stack([np.ones(T), np.arange(1.0, T + 1.0)], axis=1)
    return _make_structure(mat, rank=T - 2, generators=gen)


def identity_structure(dim: int) -> StructureMatrix:
    """Full-rank identity template (unstructured effects)."""
    mat = sp.csr_array(sp.eye_array(dim, format="csr"))
    return _make_structure(mat, rank=dim, generators=np.zeros((dim, 0)))


def kronecker(a: StructureMatrix, b: StructureMatrix) -> StructureMatrix:
    """Kronecker product of two structure matrices.

    rank(a (x) b) = rank(a) * rank(b); the kernel is spanned by
    ker(a) (x) R^dim_b together with R^dim_a (x) ker(b), generated here by
    Kronecker products with unit vectors (kept integer-exact).
    """
    if a.dim * b.dim > _MAX_KRON_DIM:
        raise ValueError(f"kronecker dim {a.dim}*{b.dim} exceeds limit")
    mat = sp.csr_array(sp.kron(a.entries, b.entries, format="csr"))
    rank = a.rank * b.rank
    gens = []
    eye_b = np.eye(b.dim)
    for col in range(a.exact_kernel.shape[1]):
        v = a.exact_kernel[:, col]
        gens.append(np.kron(v[:, None], eye_b))
    eye_a = np.eye(a.dim)
    for col in range(b.exact_kernel.shape[1]):
        w = b.exact_kernel[:, col]
        gens.append(np.kron(eye_a, w[:, None]))
    gen = np.concatenate(gens, axis=1) if gens else np.zeros((mat.shape[0], 0))
    return _make_structure(mat, rank=rank, generators=gen)


def interaction_structure(kind: str, r_gamma: StructureMatrix,
                          r_kappa: StructureMatrix) -> StructureMatrix:
    """Space-time interaction structure for one of the four types.

    Parameters
    ----------
    kind : {"I", "II", "III", "IV"}
        I: fully unstructured (identity).  II: random walk in time,
        unstructured in space.  III: structured in space, unstructured in
        time.  IV: structured in both.
    r_gamma : StructureMatrix
        Temporal structure, dim T.
    r_kappa : StructureMatrix
        Spatial structure, dim A.

    Returns
    -------
    StructureMatrix
        Dimension T*A, cells ordered area-fastest (flat index t*A + i).
    """
    if kind not in INTERACTION_KINDS:
        raise ValueError(f"unknown interaction kind {kind!r}")
    T, A = r_gamma.dim, r_kappa.dim
    if kind == "I":
        return identity_structure(T * A)
    if kind == "II":
        return kronecker(r_gamma, identity_structure(A))
    if kind == "III":
        return kronecker(identity_structure(T), r_kappa)
    return kronecker(r_gamma, r_kappa)
