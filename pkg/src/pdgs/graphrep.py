"""Graph view of a P2 space: CSR adjacency, standardized coordinates,
distance-based edge features.

Nodes are all P2 nodes (vertices and midside nodes), since the network must
emit one coefficient per interior FE node.  Two nodes are adjacent when they
co-occur in an element's 6-node tuple (``adjacency="element"``, the default)
or when they are consecutive along a mesh edge (``adjacency="edge"``).
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class GraphTopology:
    num_nodes: int
    neighbor_offsets: np.ndarray  # int64, len num_nodes + 1
    neighbor_indices: np.ndarray  # int64, sorted within each row
    node_coords_std: np.ndarray  # (N, 2), per-dimension affine map to [-1, 1]

    @property
    def num_edges(self):
        return len(self.neighbor_indices)

    def degrees(self):
        return np.diff(self.neighbor_offsets)


@dataclass(frozen=True)
class EdgeFeatures:
    values: np.ndarray  # one weight per stored directed edge
    eps: float | None = None
    l_max: float | None = None


def graph_from_space(space, adjacency="element"):
    if adjacency == "element":
        stencils = space.elem_nodes
    elif adjacency == "edge":
        tri = space.mesh.triangles
        stencils = []
        for ti in range(len(tri)):
            for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
                stencils.append(
                    (tri[ti, a], space.elem_nodes[ti, 3 + k], tri[ti, b])
                )
        stencils = np.asarray(stencils, dtype=np.int64)
    else:
        raise ValueError(f"unknown adjacency mode {adjacency!r}")

    n = space.num_nodes
    width = stencils.shape[1]
    pairs = []
    for a in range(width):
        for b in range(width):
            if a != b:
                pairs.append(np.column_stack([stencils[:, a], stencils[:, b]]))
    if adjacency == "edge":
        # a stencil is a path v-m-w: the endpoints are not adjacent
        pairs = [
            np.column_stack([stencils[:, a], stencils[:, b]])
            for a, b in ((0, 1), (1, 0), (1, 2), (2, 1))
        ]
    edges = np.unique(np.concatenate(pairs), axis=0)

    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(edges[:, 0], minlength=n), out=offsets[1:])
    if (np.diff(offsets) == 0).any():
        missing = int(np.nonzero(np.diff(offsets) == 0)[0][0])
        raise ValueError(f"node {missing} is isolated")

    lo = space.mesh.domain_bbox[0]
    hi = space.mesh.domain_bbox[1]
    coords = 2.0 * (space.nodes - lo) / (hi - lo) - 1.0

    return GraphTopology(n, offsets, edges[:, 1].copy(), coords)


def distance_weight(length, eps, l_max):
    """The compression map log_eps(l_max / length)."""
    return np.log(l_max / length) / np.log(eps)


def edge_lengths(topo):
    rows = np.repeat(
        np.arange(topo.num_nodes, dtype=np.int64), topo.degrees()
    )
    diff = topo.node_coords_std[rows] - topo.node_coords_std[topo.neighbor_indices]
    return np.sqrt((diff**2).sum(axis=1))


def edge_features_distance(topo, eps=1.05, l_max=1.0):
    """Distance-related edge weights in standardized coordinates.

    Defaults eps=1.05 and l_max=1 follow the reference configuration.
    """
    if eps <= 1.0:
        raise ValueError("eps must be > 1")
    lengths = edge_lengths(topo)
    too_long = lengths >= l_max
    if too_long.any():
        e = int(np.nonzero(too_long)[0][0])
        rows = np.repeat(np.arange(topo.num_nodes), topo.degrees())
        raise ValueError(
            f"edge ({rows[e]}, {topo.neighbor_indices[e]}) has length "
            f"{lengths[e]:.6g} >= l_max={l_max:.6g}"
        )
    return EdgeFeatures(distance_weight(lengths, eps, l_max), eps, l_max)


def edge_features_uniform(topo):
    return EdgeFeatures(np.ones(topo.num_edges))


def aggregate(topo, edge_feats, features):
    """Mean aggregation of neighbor features weighted per edge (no autodiff)."""
    out = np.empty_like(features)
    return _kernels.aggregate_fwd_into(
        topo.neighbor_offsets,
        topo.neighbor_indices,
        edge_feats.values,
        features,
        out,
    )
