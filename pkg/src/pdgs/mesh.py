"""Conforming triangular meshes: generation, slit cutting, refinement, I/O.

A mesh is immutable after construction.  All operations return new meshes and
validate the full invariant set (positive areas, edge incidence, closed
boundary loops) before handing the result back.
"""

import json
from dataclasses import dataclass

import numpy as np


class MeshInvariantError(ValueError):
    """A mesh violates one of its structural invariants."""


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 2) float64
    triangles: np.ndarray  # (T, 3) int64, counterclockwise
    boundary_edges: np.ndarray  # (B, 3) int64 rows (i, j, tag)
    domain_bbox: np.ndarray  # (2, 2) [[xmin, ymin], [xmax, ymax]]

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)


def make_mesh(vertices, triangles, boundary_edges, bbox=None):
    """Construct and validate a mesh; bbox defaults to the vertex hull."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    boundary_edges = np.asarray(boundary_edges, dtype=np.int64).reshape(-1, 3)
    if bbox is None:
        bbox = np.stack([vertices.min(axis=0), vertices.max(axis=0)])
    else:
        bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 2)
    m = Mesh(vertices, triangles, boundary_edges, bbox)
    validate(m)
    return m


def meshes_equal(a, b):
    return (
        np.array_equal(a.vertices, b.vertices)
        and np.array_equal(a.triangles, b.triangles)
        and np.array_equal(a.boundary_edges, b.boundary_edges)
        and np.array_equal(a.domain_bbox, b.domain_bbox)
    )


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def signed_areas(mesh):
    p = mesh.vertices[mesh.triangles]
    return 0.5 * _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def ensure_ccw(vertices, triangles):
    """Swap two vertices of every clockwise triangle; reject degenerate ones."""
    if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
        bad = np.nonzero(
            ((triangles < 0) | (triangles >= len(vertices))).any(axis=1)
        )[0][0]
        raise MeshInvariantError(f"triangle {bad} has out-of-range vertex index")
    p = vertices[triangles]
    area2 = _cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    bad = np.nonzero(area2 == 0.0)[0]
    if bad.size:
        raise MeshInvariantError(f"triangle {bad[0]} has zero area")
    flipped = triangles.copy()
    cw = area2 < 0
    flipped[cw, 1], flipped[cw, 2] = triangles[cw, 2], triangles[cw, 1]
    return flipped


def _edge_key(i, j):
    return (i, j) if i < j else (j, i)


def _edge_incidence(triangles):
    counts = {}
    for t in triangles:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            k = _edge_key(int(a), int(b))
            counts[k] = counts.get(k, 0) + 1
    return counts


def validate(mesh):
    """Check every structural invariant; raise naming the first violation."""
    nv = mesh.num_vertices
    if not np.isfinite(mesh.vertices).all():
        raise MeshInvariantError("non-finite vertex coordinate")
    if mesh.num_triangles and (
        mesh.triangles.min() < 0 or mesh.triangles.max() >= nv
    ):
        bad = np.nonzero((mesh.triangles < 0) | (mesh.triangles >= nv))[0][0]
        raise MeshInvariantError(f"triangle {bad} has out-of-range vertex index")
    if len(mesh.boundary_edges) and (
        mesh.boundary_edges[:, :2].min() < 0
        or mesh.boundary_edges[:, :2].max() >= nv
    ):
        raise MeshInvariantError("boundary edge has out-of-range vertex index")

    areas = signed_areas(mesh)
    nonpos = np.nonzero(areas <= 0.0)[0]
    if nonpos.size:
        raise MeshInvariantError(
            f"triangle {nonpos[0]} has non-positive area {areas[nonpos[0]]:.3e}"
        )

    counts = _edge_incidence(mesh.triangles)
    over = [k for k, c in counts.items() if c > 2]
    if over:
        raise MeshInvariantError(
            f"edge {over[0]} is shared by more than two triangles"
        )
    bnd_from_tris = {k for k, c in counts.items() if c == 1}
    listed = [_edge_key(int(i), int(j)) for i, j, _ in mesh.boundary_edges]
    listed_set = set(listed)
    if len(listed) != len(listed_set):
        raise MeshInvariantError("duplicate boundary edge entry")
    if listed_set != bnd_from_tris:
        missing = bnd_from_tris - listed_set
        extra = listed_set - bnd_from_tris
        if missing:
            raise MeshInvariantError(
                f"edge {next(iter(missing))} lies on the boundary but is untagged"
            )
        raise MeshInvariantError(
            f"tagged edge {next(iter(extra))} is not a boundary edge"
        )

    deg = np.zeros(nv, dtype=np.int64)
    for i, j, _ in mesh.boundary_edges:
        deg[i] += 1
        deg[j] += 1
    odd = np.nonzero(deg % 2)[0]
    if odd.size:
        raise MeshInvariantError(
            f"boundary is not a union of closed loops (vertex {odd[0]} has odd degree)"
        )


def generate_unit_square(nx, ny, bbox=((0.0, 0.0), (1.0, 1.0))):
    """Structured mesh of a rectangle: 2 triangles per cell, alternating diagonals.

    Boundary edges are tagged 1.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 2)
    if not (bbox[1] > bbox[0]).all():
        raise ValueError("bbox is degenerate")

    xs = np.linspace(bbox[0, 0], bbox[1, 0], nx + 1)
    ys = np.linspace(bbox[0, 1], bbox[1, 1], ny + 1)
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]

    bedges = []
    for i in range(nx):
        bedges.append((vid(i, 0), vid(i + 1, 0), 1))
    for j in range(ny):
        bedges.append((vid(nx, j), vid(nx, j + 1), 1))
    for i in range(nx, 0, -1):
        bedges.append((vid(i, ny), vid(i - 1, ny), 1))
    for j in range(ny, 0, -1):
        bedges.append((vid(0, j), vid(0, j - 1), 1))

    return make_mesh(vertices, tris, bedges, bbox)


def cut_slit(mesh, p0, p1, tag=1):
    """Cut the mesh along the segment p0-p1, duplicating vertices per side.

    The segment must run along existing mesh edges.  An endpoint interior to
    the domain stays single (the slit tip); an endpoint on the outer boundary
    is duplicated like the rest of the slit so the two faces only meet at the
    tip.  Both slit faces become tagged boundary edges.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    length = np.linalg.norm(d)
    if length == 0:
        raise ValueError("slit endpoints coincide")

    rel = mesh.vertices - p0
    t = rel @ d / (length * length)
    off = np.abs(_cross2(np.broadcast_to(d, rel.shape), rel)) / length
    on_seg = (off <= 1e-12 * max(1.0, length)) & (t >= -1e-12) & (t <= 1 + 1e-12)
    chain = np.nonzero(on_seg)[0]
    chain = chain[np.argsort(t[chain])]
    if len(chain) < 2:
        raise ValueError("slit endpoints are not mesh vertices")

    counts = _edge_incidence(mesh.triangles)
    for a, b in zip(chain[:-1], chain[1:]):
        if counts.get(_edge_key(int(a), int(b)), 0) != 2:
            raise ValueError(
                f"slit segment ({a}, {b}) does not follow an interior mesh edge"
            )

    boundary_vertices = set(mesh.boundary_edges[:, :2].ravel().tolist())
    dup = []
    for end, v in ((0, chain[0]), (1, chain[-1])):
        if int(v) in boundary_vertices:
            dup.append(int(v))
    dup = set(dup) | {int(v) for v in chain[1:-1]}
    if not dup:
        raise ValueError("slit has no interior vertices to duplicate")

    new_vertices = [mesh.vertices]
    dup_index = {}
    for v in sorted(dup):
        dup_index[v] = mesh.num_vertices + len(dup_index)
        new_vertices.append(mesh.vertices[v : v + 1])
    vertices = np.concatenate(new_vertices)

    def side_of(point):
        return _cross2(np.broadcast_to(d, np.shape(point)), point - p0)

    triangles = mesh.triangles.copy()
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    below = side_of(centroids) < 0
    for ti in range(mesh.num_triangles):
        if not below[ti]:
            continue
        for k in range(3):
            v = int(triangles[ti, k])
            if v in dup_index:
                triangles[ti, k] = dup_index[v]

    bedges = []
    for i, j, etag in mesh.boundary_edges:
        i, j = int(i), int(j)
        mid = 0.5 * (mesh.vertices[i] + mesh.vertices[j])
        if side_of(mid) < 0:
            i = dup_index.get(i, i)
            j = dup_index.get(j, j)
        bedges.append((i, j, int(etag)))
    for a, b in zip(chain[:-1], chain[1:]):
        a, b = int(a), int(b)
        bedges.append((a, b, tag))
        bedges.append((dup_index.get(a, a), dup_index.get(b, b), tag))

    return make_mesh(vertices, triangles, bedges, mesh.domain_bbox)


def _point_triangle_dist(point, tri_pts):
    v = tri_pts - point
    cross1 = _cross2(tri_pts[1] - tri_pts[0], point - tri_pts[0])
    cross2 = _cross2(tri_pts[2] - tri_pts[1], point - tri_pts[1])
    cross3 = _cross2(tri_pts[0] - tri_pts[2], point - tri_pts[2])
    if cross1 >= 0 and cross2 >= 0 and cross3 >= 0:
        return 0.0
    best = np.inf
    for a, b in ((0, 1), (1, 2), (2, 0)):
        e = tri_pts[b] - tri_pts[a]
        tt = np.clip(-(v[a] @ e) / (e @ e), 0.0, 1.0)
        best = min(best, np.linalg.norm(v[a] + tt * e))
    return best


def refine_toward(mesh, center, radius, levels):
    """Red-green refinement of all triangles within ``radius`` of ``center``.

    Each level red-splits marked triangles into four, then restores
    conformity: neighbors with two or more split edges go red as well,
    neighbors with exactly one are bisected (green).
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    center = np.asarray(center, dtype=np.float64)
    for _ in range(levels):
        marked = np.array(
            [
                _point_triangle_dist(center, mesh.vertices[t]) <= radius
                for t in mesh.triangles
            ]
        )
        mesh = _split_marked(mesh, marked)
    return mesh


def refine_uniform(mesh):
    """Red-split every triangle.

    Vertex ordering contract: the refined mesh's vertices are the parent
    vertices (same indices) followed by one midpoint per parent edge, edges
    enumerated in sorted (min, max) order.  The P2 space uses the identical
    enumeration, so parent P2 node k sits at refined vertex k.
    """
    return _split_marked(mesh, np.ones(mesh.num_triangles, dtype=bool))


def _split_marked(mesh, red):
    red = red.copy()
    tri = mesh.triangles

    split_edges = set()
    for ti in np.nonzero(red)[0]:
        t = tri[ti]
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            split_edges.add(_edge_key(int(a), int(b)))

    # green closure: a triangle with >= 2 split edges becomes red
    changed = True
    while changed:
        changed = False
        for ti in np.nonzero(~red)[0]:
            t = tri[ti]
            edges = [
                _edge_key(int(a), int(b))
                for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0]))
            ]
            n_split = sum(e in split_edges for e in edges)
            if n_split >= 2:
                red[ti] = True
                for e in edges:
                    if e not in split_edges:
                        split_edges.add(e)
                        changed = True

    midpoint = {}
    new_vertices = [mesh.vertices]
    next_id = mesh.num_vertices
    for e in sorted(split_edges):
        midpoint[e] = next_id
        next_id += 1
        new_vertices.append(
            0.5 * (mesh.vertices[e[0] : e[0] + 1] + mesh.vertices[e[1] : e[1] + 1])
        )
    vertices = np.concatenate(new_vertices)

    new_tris = []
    for ti in range(mesh.num_triangles):
        v0, v1, v2 = (int(v) for v in tri[ti])
        if red[ti]:
            m01 = midpoint[_edge_key(v0, v1)]
            m12 = midpoint[_edge_key(v1, v2)]
            m20 = midpoint[_edge_key(v2, v0)]
            new_tris += [
                (v0, m01, m20),
                (m01, v1, m12),
                (m20, m12, v2),
                (m01, m12, m20),
            ]
        else:
            cyc = [(v0, v1, v2), (v1, v2, v0), (v2, v0, v1)]
            for a, b, c in cyc:
                m = midpoint.get(_edge_key(a, b))
                if m is not None:
                    new_tris += [(a, m, c), (m, b, c)]
                    break
            else:
                new_tris.append((v0, v1, v2))

    bedges = []
    for i, j, tag in mesh.boundary_edges:
        i, j, tag = int(i), int(j), int(tag)
        m = midpoint.get(_edge_key(i, j))
        if m is None:
            bedges.append((i, j, tag))
        else:
            bedges += [(i, m, tag), (m, j, tag)]

    return make_mesh(vertices, new_tris, bedges, mesh.domain_bbox)


def perturb_interior(mesh, amplitude, seed=0):
    """Jiggle interior vertices by uniform offsets of size amplitude*h.

    Breaks the structural symmetry of generated meshes (which otherwise
    superconverges P2 solutions past the generic O(h^3) rate).  Boundary
    vertices, including slit duplicates, stay put.
    """
    rng = np.random.default_rng(seed)
    h = np.sqrt(2.0 * np.abs(signed_areas(mesh)).mean())
    on_boundary = np.zeros(mesh.num_vertices, dtype=bool)
    on_boundary[mesh.boundary_edges[:, :2].ravel()] = True
    v = mesh.vertices.copy()
    shift = rng.uniform(-amplitude * h, amplitude * h, v.shape)
    v[~on_boundary] += shift[~on_boundary]
    return make_mesh(v, mesh.triangles, mesh.boundary_edges, mesh.domain_bbox)


def centroid_split(mesh, tri_ids):
    """Split each listed triangle into three at its centroid.

    No edges are split, so the mesh stays conforming; used to hit exact node
    counts for fixture meshes.
    """
    tri_ids = sorted(set(int(i) for i in tri_ids))
    vertices = [mesh.vertices]
    tris = []
    next_id = mesh.num_vertices
    chosen = set(tri_ids)
    for ti in range(mesh.num_triangles):
        v0, v1, v2 = (int(v) for v in mesh.triangles[ti])
        if ti in chosen:
            vertices.append(mesh.vertices[[v0, v1, v2]].mean(axis=0)[None, :])
            c = next_id
            next_id += 1
            tris += [(v0, v1, c), (v1, v2, c), (v2, v0, c)]
        else:
            tris.append((v0, v1, v2))
    return make_mesh(
        np.concatenate(vertices), tris, mesh.boundary_edges, mesh.domain_bbox
    )


# ---------------------------------------------------------------------------
# I/O

def save_mesh(mesh, path):
    doc = {
        "vertices": mesh.vertices.tolist(),
        "triangles": mesh.triangles.tolist(),
        "boundary_edges": mesh.boundary_edges.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_mesh(path):
    """Load a JSON mesh or a Gmsh MSH 2.2 ASCII subset, validating invariants.

    Clockwise triangles are reoriented; any other invariant violation raises
    MeshInvariantError naming the offending entity.
    """
    path = str(path)
    if path.endswith(".msh"):
        return _load_msh(path)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    for key in ("vertices", "triangles", "boundary_edges"):
        if key not in doc:
            raise MeshFormatError(f"{path}: missing key {key!r}")
    vertices = np.asarray(doc["vertices"], dtype=np.float64).reshape(-1, 2)
    triangles = np.asarray(doc["triangles"], dtype=np.int64).reshape(-1, 3)
    triangles = ensure_ccw(vertices, triangles)
    return make_mesh(vertices, triangles, doc["boundary_edges"])


def _load_msh(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]

    def section(name):
        try:
            start = lines.index(f"${name}") + 1
            end = lines.index(f"$End{name}")
        except ValueError:
            raise MeshFormatError(f"{path}: missing ${name} section") from None
        return start, end

    s, _ = section("MeshFormat")
    if not lines[s].startswith("2.2"):
        raise MeshFormatError(f"{path}:{s + 1}: only MSH 2.2 ASCII is supported")

    s, e = section("Nodes")
    count = int(lines[s])
    id_map = {}
    coords = []
    for ln in lines[s + 1 : s + 1 + count]:
        parts = ln.split()
        id_map[int(parts[0])] = len(coords)
        coords.append((float(parts[1]), float(parts[2])))
    if len(coords) != count or s + 1 + count != e:
        raise MeshFormatError(f"{path}: node count mismatch in $Nodes")

    s, e = section("Elements")
    count = int(lines[s])
    tris, bedges = [], []
    for off, ln in enumerate(lines[s + 1 : s + 1 + count]):
        parts = [int(x) for x in ln.split()]
        etype, ntags = parts[1], parts[2]
        nodes = parts[3 + ntags :]
        tag = parts[3] if ntags else 1
        if etype == 2:
            tris.append(tuple(id_map[n] for n in nodes))
        elif etype == 1:
            bedges.append((id_map[nodes[0]], id_map[nodes[1]], tag))
        elif etype == 15:
            continue  # point elements carry no geometry we use
        else:
            raise MeshFormatError(
                f"{path}:{s + 2 + off}: unsupported element type {etype}"
            )
    vertices = np.asarray(coords)
    triangles = ensure_ccw(vertices, np.asarray(tris, dtype=np.int64).reshape(-1, 3))
    return make_mesh(vertices, triangles, bedges)
