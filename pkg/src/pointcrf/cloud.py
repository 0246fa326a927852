"""Point-cloud data model, file I/O, neighbor graphs, sampling, and interpolation.

Positions live in 3D Euclidean space; every point carries an optional feature
vector. Graph construction is brute force: at the scales this library targets
(thousands of points) an O(N^2) distance table is cheaper and easier to audit
than a spatial index.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CloudParseError",
    "PointCloud",
    "NeighborGraph",
    "SampleIndex",
    "read_cloud",
    "write_cloud",
    "knn_graph",
    "dilated_knn_graph",
    "radius_graph",
    "farthest_point_sample",
    "knn_interpolate",
]

# Fine points closer than this to a coarse point copy its feature verbatim.
COINCIDENT_DISTANCE = 1e-12


class CloudParseError(ValueError):
    """A cloud file failed to parse; the message names the offending line."""


def _format_value(value: float) -> str:
    # repr round-trips float64 exactly, which keeps file output deterministic
    # and makes read(write(cloud)) bit-identical.
    return repr(float(value))


@dataclass
class PointCloud:
    """N points with 3D positions and d-dimensional per-point features."""

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {self.positions.shape}")
        if self.features.ndim != 2:
            raise ValueError(f"features must have shape (N, d), got {self.features.shape}")
        if self.features.shape[0] != self.positions.shape[0]:
            raise ValueError(
                f"positions ({self.positions.shape[0]}) and features "
                f"({self.features.shape[0]}) disagree on point count"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_columns(cls, table: np.ndarray) -> "PointCloud":
        """Build a cloud from an (N, 3+d) table whose first 3 columns are x, y, z."""
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[1] < 3:
            raise ValueError(f"need at least 3 columns, got shape {table.shape}")
        return cls(positions=table[:, :3], features=table[:, 3:])

    def to_columns(self) -> np.ndarray:
        return np.hstack([self.positions, self.features])


@dataclass
class NeighborGraph:
    """Directed adjacency: per-node ordered neighbor lists, optional edge weights.

    Neighbor lists never contain the node itself or duplicates. When present,
    ``edge_weights`` is aligned entry-for-entry with ``neighbors`` and holds
    nonnegative finite scalars.
    """

    num_nodes: int
    neighbors: list
    edge_weights: list | None = None

    # flattened edge arrays, built once for vectorized message passing
    edge_src: np.ndarray = field(init=False, repr=False)
    edge_dst: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_nodes < 0:
            raise ValueError("num_nodes must be nonnegative")
        if len(self.neighbors) != self.num_nodes:
            raise ValueError(
                f"expected {self.num_nodes} neighbor lists, got {len(self.neighbors)}"
            )
        self.neighbors = [np.asarray(nbrs, dtype=np.int64).reshape(-1) for nbrs in self.neighbors]
        for i, nbrs in enumerate(self.neighbors):
            if nbrs.size == 0:
                continue
            if np.any(nbrs == i):
                raise ValueError(f"node {i} lists itself as a neighbor")
            if np.any(nbrs < 0) or np.any(nbrs >= self.num_nodes):
                raise ValueError(f"node {i} has a neighbor index out of range")
            if np.unique(nbrs).size != nbrs.size:
                raise ValueError(f"node {i} lists a duplicate neighbor")
        if self.edge_weights is not None:
            if len(self.edge_weights) != self.num_nodes:
                raise ValueError("edge_weights must have one array per node")
            self.edge_weights = [
                np.asarray(w, dtype=np.float64).reshape(-1) for w in self.edge_weights
            ]
            for i, (nbrs, w) in enumerate(zip(self.neighbors, self.edge_weights)):
                if w.shape != nbrs.shape:
                    raise ValueError(f"node {i}: edge_weights shape differs from neighbors")
                if not np.all(np.isfinite(w)) or np.any(w < 0):
                    raise ValueError(f"node {i}: edge weights must be finite and >= 0")
        counts = [nbrs.size for nbrs in self.neighbors]
        if sum(counts) > 0:
            self.edge_src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), counts)
            self.edge_dst = np.concatenate(self.neighbors)
        else:
            self.edge_src = np.empty(0, dtype=np.int64)
            self.edge_dst = np.empty(0, dtype=np.int64)

    @property
    def num_edges(self) -> int:
        return int(self.edge_src.size)

    def degree(self, node: int) -> int:
        return int(self.neighbors[node].size)

    def flat_weights(self) -> np.ndarray:
        if self.edge_weights is None:
            raise ValueError("graph carries no edge weights")
        if self.num_edges == 0:
            return np.empty(0, dtype=np.float64)
        return np.concatenate(self.edge_weights)


@dataclass
class SampleIndex:
    """Ordered subset of node indices produced by farthest point sampling."""

    selected: np.ndarray
    ratio: float

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64).reshape(-1)
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if np.unique(self.selected).size != self.selected.size:
            raise ValueError("selected indices must be unique")

    def __len__(self) -> int:
        return int(self.selected.size)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_FORMATS = ("ply-ascii", "csv-xyz")

_PLY_SCALAR_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint",
    "int8", "uint8", "int16", "uint16", "int32", "uint32",
    "float", "float32", "double", "float64",
}


def read_cloud(path, format: str) -> PointCloud:
    """Read a point cloud from ``path``.

    ``csv-xyz`` expects comma-separated rows ``x,y,z[,f1..fd]`` with no header;
    ``ply-ascii`` expects an ascii 1.0 PLY whose vertex properties include
    x, y, z. Extra columns/properties become the feature vector in file order.
    """
    path = Path(path)
    if format not in _FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {_FORMATS}")
    text = path.read_text()
    if format == "csv-xyz":
        return _parse_csv(text)
    return _parse_ply(text)


def write_cloud(cloud: PointCloud, path, format: str) -> None:
    """Write ``cloud`` to ``path``; read_cloud round-trips values exactly."""
    path = Path(path)
    if format not in _FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {_FORMATS}")
    if format == "csv-xyz":
        lines = [
            ",".join(_format_value(v) for v in row)
            for row in cloud.to_columns()
        ]
        path.write_text("".join(line + "\n" for line in lines))
        return
    d = cloud.feature_dim
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.num_points}"]
    for name in ("x", "y", "z"):
        header.append(f"property double {name}")
    for j in range(d):
        header.append(f"property double f{j}")
    header.append("end_header")
    body = [" ".join(_format_value(v) for v in row) for row in cloud.to_columns()]
    path.write_text("".join(line + "\n" for line in header + body))


def _parse_csv(text: str) -> PointCloud:
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if width is None:
            width = len(parts)
            if width < 3:
                raise CloudParseError(f"line {lineno}: expected at least 3 columns, got {width}")
        elif len(parts) != width:
            raise CloudParseError(
                f"line {lineno}: expected {width} columns, got {len(parts)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise CloudParseError(f"line {lineno}: non-numeric field") from None
    if not rows:
        return PointCloud(positions=np.empty((0, 3)), features=np.empty((0, 0)))
    return PointCloud.from_columns(np.array(rows, dtype=np.float64))


def _parse_ply(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError("line 1: missing 'ply' magic")
    vertex_count = None
    property_names: list[str] = []
    saw_format = False
    data_start = None
    current_element = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens or tokens[0] == "comment":
            continue
        keyword = tokens[0]
        if keyword == "format":
            if tokens[1:] != ["ascii", "1.0"]:
                raise CloudParseError(
                    f"line {lineno}: only 'format ascii 1.0' is supported"
                )
            saw_format = True
        elif keyword == "element":
            if len(tokens) != 3:
                raise CloudParseError(f"line {lineno}: malformed element declaration")
            try:
                count = int(tokens[2])
            except ValueError:
                raise CloudParseError(f"line {lineno}: bad element count") from None
            current_element = tokens[1]
            if tokens[1] == "vertex":
                vertex_count = count
            elif count != 0:
                raise CloudParseError(
                    f"line {lineno}: unsupported element '{tokens[1]}'"
                )
        elif keyword == "property":
            if current_element is None:
                raise CloudParseError(f"line {lineno}: property before any element")
            if current_element != "vertex":
                continue  # trailing zero-count elements carry no data rows
            if len(tokens) != 3 or tokens[1] not in _PLY_SCALAR_TYPES:
                raise CloudParseError(
                    f"line {lineno}: unsupported property declaration {raw.strip()!r}"
                )
            property_names.append(tokens[2])
        elif keyword == "end_header":
            data_start = lineno
            break
        else:
            raise CloudParseError(f"line {lineno}: unexpected keyword {keyword!r}")
    if not saw_format:
        raise CloudParseError("header: missing format declaration")
    if data_start is None:
        raise CloudParseError("header: missing end_header")
    if vertex_count is None:
        raise CloudParseError("header: missing element vertex declaration")
    for axis in ("x", "y", "z"):
        if axis not in property_names:
            raise CloudParseError(f"header: vertex property '{axis}' missing")

    values = np.zeros((vertex_count, len(property_names)), dtype=np.float64)
    row = 0
    for lineno, raw in enumerate(lines[data_start:], start=data_start + 1):
        if not raw.strip():
            continue
        if row >= vertex_count:
            raise CloudParseError(f"line {lineno}: more data rows than declared vertices")
        parts = raw.split()
        if len(parts) != len(property_names):
            raise CloudParseError(
                f"line {lineno}: expected {len(property_names)} values, got {len(parts)}"
            )
        try:
            values[row] = [float(p) for p in parts]
        except ValueError:
            raise CloudParseError(f"line {lineno}: non-numeric field") from None
        row += 1
    if row != vertex_count:
        raise CloudParseError(
            f"header declared {vertex_count} vertices but file has {row} data rows"
        )
    axes = [property_names.index(a) for a in ("x", "y", "z")]
    feature_cols = [j for j in range(len(property_names)) if j not in axes]
    return PointCloud(positions=values[:, axes], features=values[:, feature_cols])


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def _squared_distance_table(positions: np.ndarray) -> np.ndarray:
    # Differences, not the expanded |a|^2+|b|^2-2ab identity: coincident points
    # must land on exactly 0.0 so tie-breaking matches a brute-force oracle.
    diff = positions[:, None, :] - positions[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _sorted_candidates(d2_row: np.ndarray, self_index: int) -> np.ndarray:
    """All other nodes ordered by (distance, index)."""
    order = np.lexsort((np.arange(d2_row.size), d2_row))
    return order[order != self_index]


def knn_graph(cloud: PointCloud, k: int) -> NeighborGraph:
    """k nearest neighbors per node, sorted by distance, ties to lower index."""
    if cloud.num_points < 1:
        raise ValueError("knn_graph requires at least one point")
    if k < 1:
        raise ValueError("k must be >= 1")
    d2 = _squared_distance_table(cloud.positions)
    n = cloud.num_points
    take = min(k, n - 1)
    neighbors, weights = [], []
    for i in range(n):
        cand = _sorted_candidates(d2[i], i)[:take]
        neighbors.append(cand)
        weights.append(np.sqrt(d2[i, cand]))
    return NeighborGraph(num_nodes=n, neighbors=neighbors, edge_weights=weights)


def dilated_knn_graph(cloud: PointCloud, k: int, dil: int) -> NeighborGraph:
    """Keep every dil-th distance rank among the k*dil nearest neighbors.

    Rank selection is dil, 2*dil, ..., k*dil (1-indexed, self excluded), so
    dil=1 reproduces knn_graph. When fewer than k*dil candidates exist the
    selection truncates after the available ranks.
    """
    if cloud.num_points < 1:
        raise ValueError("dilated_knn_graph requires at least one point")
    if k < 1 or dil < 1:
        raise ValueError("k and dil must be >= 1")
    d2 = _squared_distance_table(cloud.positions)
    n = cloud.num_points
    pool = min(k * dil, n - 1)
    neighbors, weights = [], []
    for i in range(n):
        cand = _sorted_candidates(d2[i], i)[:pool]
        kept = cand[dil - 1 :: dil][:k]
        neighbors.append(kept)
        weights.append(np.sqrt(d2[i, kept]))
    return NeighborGraph(num_nodes=n, neighbors=neighbors, edge_weights=weights)


def radius_graph(cloud: PointCloud, r: float) -> NeighborGraph:
    """Connect each node to every other point with squared distance <= r."""
    if r <= 0:
        raise ValueError("radius must be > 0")
    if cloud.num_points < 1:
        raise ValueError("radius_graph requires at least one point")
    d2 = _squared_distance_table(cloud.positions)
    n = cloud.num_points
    neighbors, weights = [], []
    for i in range(n):
        cand = _sorted_candidates(d2[i], i)
        cand = cand[d2[i, cand] <= r]
        neighbors.append(cand)
        weights.append(np.sqrt(d2[i, cand]))
    return NeighborGraph(num_nodes=n, neighbors=neighbors, edge_weights=weights)


def sample_count(ratio: float, num_points: int) -> int:
    """Number of points a ratio keeps: max(1, ceil(ratio * N)).

    The tiny slack absorbs float error in ratio * N so that e.g. 0.1 * 10
    counts as 1 point, not 2.
    """
    return max(1, math.ceil(ratio * num_points - 1e-12))


def farthest_point_sample(cloud: PointCloud, ratio: float, seed_index: int = 0) -> SampleIndex:
    """Greedy farthest point sampling starting from ``seed_index``.

    Repeatedly adds the point with maximum distance to the already selected
    set (ties to the lower index) until ceil(ratio * N) points are chosen.
    """
    n = cloud.num_points
    if n < 1:
        raise ValueError("farthest_point_sample requires at least one point")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    count = sample_count(ratio, n)
    selected = [seed_index]
    diff = cloud.positions - cloud.positions[seed_index]
    min_d2 = np.einsum("ij,ij->i", diff, diff)
    # selected entries are parked below any real distance so coincident
    # points can never re-select them
    min_d2[seed_index] = -1.0
    while len(selected) < count:
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) index on ties
        selected.append(nxt)
        diff = cloud.positions - cloud.positions[nxt]
        min_d2 = np.minimum(min_d2, np.einsum("ij,ij->i", diff, diff))
        min_d2[nxt] = -1.0
    return SampleIndex(selected=np.array(selected, dtype=np.int64), ratio=ratio)


def knn_interpolate(coarse: PointCloud, fine_positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Upsample coarse features to fine positions by inverse-squared-distance weights.

    Each fine point takes a weighted mean of its min(k, coarse.N) nearest
    coarse features with weights proportional to 1/d^2. A fine point closer
    than 1e-12 to a coarse point copies that coarse feature verbatim.
    """
    if coarse.num_points < 1:
        raise ValueError("knn_interpolate requires a non-empty coarse cloud")
    if k < 1:
        raise ValueError("k must be >= 1")
    fine_positions = np.asarray(fine_positions, dtype=np.float64).reshape(-1, 3)
    m = fine_positions.shape[0]
    d = coarse.feature_dim
    out = np.zeros((m, d), dtype=np.float64)
    take = min(k, coarse.num_points)
    idx = np.arange(coarse.num_points)
    for i in range(m):
        diff = coarse.positions - fine_positions[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
        nearest = int(np.lexsort((idx, d2))[0])
        if d2[nearest] < COINCIDENT_DISTANCE**2:
            out[i] = coarse.features[nearest]
            continue
        cand = np.lexsort((idx, d2))[:take]
        w = 1.0 / d2[cand]
        out[i] = (w[:, None] * coarse.features[cand]).sum(axis=0) / w.sum()
    return out
