"""Second-order Lagrange (P2) elements: space, quadrature, assembly, oracle.

The PDE family is fixed as ``div(kappa grad u) + beta u + s = 0`` with
Dirichlet data g on tagged edges and optional Neumann flux q elsewhere.  The
assembled operator is ``A_ij = -int kappa grad(phi_i).grad(phi_j)
+ int beta phi_i phi_j`` and the load is ``b_i = -int phi_i s - int phi_i q``,
so the Galerkin residual of a coefficient vector m reads ``A m - b``.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import linalg, mesh as meshmod

# local midside node k+3 is the midpoint of edge _P2_EDGES[k]
_P2_EDGES = ((1, 2), (2, 0), (0, 1))

Field = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class PdeCoefficients:
    """kappa: flux coefficient, beta: reaction, source: s(x) or nodal vector."""

    kappa: Field = 1.0
    beta: Field = 0.0
    source: Union[Field, np.ndarray] = 0.0
    neumann_flux: Optional[Field] = None
    neumann_tags: tuple = ()


def eval_field(field, points):
    """Evaluate a constant or callable field at an (n, 2) coordinate array."""
    if callable(field):
        vals = np.asarray(field(points), dtype=np.float64)
        if vals.shape != (len(points),):
            raise ValueError("field evaluator returned wrong shape")
    else:
        vals = np.full(len(points), float(field))
    if not np.isfinite(vals).all():
        raise ValueError("field evaluated to a non-finite value")
    return vals


@dataclass(frozen=True)
class P2Space:
    mesh: meshmod.Mesh
    nodes: np.ndarray  # (N_h, 2): vertices first, then edge midpoints
    elem_nodes: np.ndarray  # (T, 6) int64
    edge_node: dict  # sorted vertex pair -> midside node id
    dirichlet_mask: np.ndarray  # (N_h,) bool
    interior_index: np.ndarray  # (N_h,) int64, -1 on Dirichlet nodes
    boundary_value_fn: Field
    dirichlet_tags: tuple

    @property
    def num_nodes(self):
        return len(self.nodes)

    @property
    def interior_nodes(self):
        return np.nonzero(~self.dirichlet_mask)[0]

    @property
    def dirichlet_nodes(self):
        return np.nonzero(self.dirichlet_mask)[0]

    def dirichlet_values(self):
        return eval_field(self.boundary_value_fn, self.nodes[self.dirichlet_mask])


def build_p2_space(mesh, dirichlet_tags=(1,), g=0.0):
    """Attach midside nodes and Dirichlet tagging to a mesh.

    Edges are enumerated in sorted (min, max) order; this matches the vertex
    ordering contract of ``mesh.refine_uniform`` so that parent P2 node k
    coincides with refined-mesh vertex k.
    """
    tri = mesh.triangles
    edge_set = set()
    for t in tri:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            edge_set.add((int(a), int(b)) if a < b else (int(b), int(a)))
    edges = sorted(edge_set)
    edge_node = {e: mesh.num_vertices + k for k, e in enumerate(edges)}

    midpoints = 0.5 * (
        mesh.vertices[[e[0] for e in edges]] + mesh.vertices[[e[1] for e in edges]]
    )
    nodes = np.concatenate([mesh.vertices, midpoints])

    elem_nodes = np.empty((mesh.num_triangles, 6), dtype=np.int64)
    elem_nodes[:, :3] = tri
    for k, (a, b) in enumerate(_P2_EDGES):
        for ti in range(mesh.num_triangles):
            i, j = int(tri[ti, a]), int(tri[ti, b])
            elem_nodes[ti, 3 + k] = edge_node[(i, j) if i < j else (j, i)]

    dirichlet_tags = set(int(t) for t in dirichlet_tags)
    mask = np.zeros(len(nodes), dtype=bool)
    for i, j, tag in mesh.boundary_edges:
        if int(tag) in dirichlet_tags:
            i, j = int(i), int(j)
            mask[i] = mask[j] = True
            mask[edge_node[(i, j) if i < j else (j, i)]] = True

    interior_index = np.full(len(nodes), -1, dtype=np.int64)
    interior_index[~mask] = np.arange(int((~mask).sum()))

    return P2Space(
        mesh,
        nodes,
        elem_nodes,
        edge_node,
        mask,
        interior_index,
        g,
        tuple(sorted(dirichlet_tags)),
    )


def p2_basis_eval(bary):
    """Values and barycentric gradients of the six P2 basis functions.

    Returns (values (6,), d/d lambda (6, 3)).
    """
    l = np.asarray(bary, dtype=np.float64)
    vals = np.empty(6)
    grads = np.zeros((6, 3))
    for a in range(3):
        vals[a] = l[a] * (2.0 * l[a] - 1.0)
        grads[a, a] = 4.0 * l[a] - 1.0
    for k, (a, b) in enumerate(_P2_EDGES):
        vals[3 + k] = 4.0 * l[a] * l[b]
        grads[3 + k, a] = 4.0 * l[b]
        grads[3 + k, b] = 4.0 * l[a]
    return vals, grads


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 3) barycentric
    weights: np.ndarray  # (nq,), sum = 1/2
    degree: int


def triangle_quadrature(degree):
    """Gauss rules on the reference triangle: degree 2 (3 pts) or 5 (7 pts)."""
    if degree == 2:
        pts = np.array(
            [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
        )
        w = np.full(3, 1.0 / 6.0)
        return QuadratureRule(pts, w, 2)
    if degree == 5:
        a = 0.4701420641051151
        b = 0.1012865073234563
        wa = (155.0 + np.sqrt(15.0)) / 2400.0
        wb = (155.0 - np.sqrt(15.0)) / 2400.0
        pts = [[1.0 / 3.0] * 3]
        w = [9.0 / 80.0]
        for c, wc in ((a, wa), (b, wb)):
            r = 1.0 - 2.0 * c
            pts += [[r, c, c], [c, r, c], [c, c, r]]
            w += [wc] * 3
        return QuadratureRule(np.array(pts), np.array(w), 5)
    raise ValueError(f"unsupported quadrature degree {degree}")


def edge_quadrature():
    """3-point Gauss rule on [0, 1] (degree 5), for Neumann loads."""
    s = np.sqrt(3.0 / 5.0)
    pts = 0.5 * (1.0 + np.array([-s, 0.0, s]))
    w = np.array([5.0, 8.0, 5.0]) / 18.0
    return pts, w


def _geometry(space):
    p = space.mesh.vertices[space.mesh.triangles]  # (T, 3, 2)
    d10 = p[:, 1] - p[:, 0]
    d20 = p[:, 2] - p[:, 0]
    det = d10[:, 0] * d20[:, 1] - d10[:, 1] * d20[:, 0]  # = 2 * area
    grad_lam = np.empty((len(p), 3, 2))
    grad_lam[:, 0, 0] = p[:, 1, 1] - p[:, 2, 1]
    grad_lam[:, 0, 1] = p[:, 2, 0] - p[:, 1, 0]
    grad_lam[:, 1, 0] = p[:, 2, 1] - p[:, 0, 1]
    grad_lam[:, 1, 1] = p[:, 0, 0] - p[:, 2, 0]
    grad_lam[:, 2, 0] = p[:, 0, 1] - p[:, 1, 1]
    grad_lam[:, 2, 1] = p[:, 1, 0] - p[:, 0, 0]
    grad_lam /= det[:, None, None]
    return p, det, grad_lam


def _source_at(space, coeffs, vals6, xq):
    if isinstance(coeffs.source, np.ndarray):
        if coeffs.source.shape != (space.num_nodes,):
            raise ValueError("nodal source length must equal the node count")
        return coeffs.source[space.elem_nodes] @ vals6
    return eval_field(coeffs.source, xq)


def assemble_operator(space, coeffs, quad=None):
    """Assemble the N_h x N_h weak-form operator as a CSR matrix."""
    if quad is None:
        quad = triangle_quadrature(5)
    p, det, grad_lam = _geometry(space)
    nt = len(det)
    ke = np.zeros((nt, 6, 6))
    for bary, w in zip(quad.points, quad.weights):
        vals6, dlam = p2_basis_eval(bary)
        g = np.einsum("ka,tad->tkd", dlam, grad_lam)  # (T, 6, 2)
        xq = np.einsum("a,tad->td", bary, p)
        kq = eval_field(coeffs.kappa, xq)
        bq = eval_field(coeffs.beta, xq)
        stiff = np.einsum("tkd,tld->tkl", g, g)
        mass = np.outer(vals6, vals6)
        ke += (w * det)[:, None, None] * (
            -kq[:, None, None] * stiff + bq[:, None, None] * mass[None, :, :]
        )
    rows = np.repeat(space.elem_nodes, 6, axis=1).ravel()
    cols = np.tile(space.elem_nodes, (1, 6)).ravel()
    return linalg.csr_from_triplets(
        space.num_nodes, space.num_nodes, rows, cols, ke.ravel()
    )


def _accumulate(n, idx, vals):
    # canonical (index, value) sort makes the sum independent of element order
    order = np.lexsort((vals, idx))
    out = np.zeros(n)
    np.add.at(out, idx[order], vals[order])
    return out


def assemble_load(space, coeffs, quad=None):
    """Assemble b with b_i = -int phi_i s dV - int phi_i q dS."""
    if quad is None:
        quad = triangle_quadrature(5)
    p, det, grad_lam = _geometry(space)
    nt = len(det)
    be = np.zeros((nt, 6))
    for bary, w in zip(quad.points, quad.weights):
        vals6, _ = p2_basis_eval(bary)
        xq = np.einsum("a,tad->td", bary, p)
        sq = _source_at(space, coeffs, vals6, xq)
        be -= (w * det * sq)[:, None] * vals6[None, :]
    b = _accumulate(space.num_nodes, space.elem_nodes.ravel(), be.ravel())

    if coeffs.neumann_flux is not None and len(coeffs.neumann_tags):
        tags = set(int(t) for t in coeffs.neumann_tags)
        tq, tw = edge_quadrature()
        for i, j, tag in space.mesh.boundary_edges:
            if int(tag) not in tags:
                continue
            i, j = int(i), int(j)
            m = space.edge_node[(i, j) if i < j else (j, i)]
            pi, pj = space.mesh.vertices[i], space.mesh.vertices[j]
            length = np.linalg.norm(pj - pi)
            for t, w in zip(tq, tw):
                x = (1 - t) * pi + t * pj
                q = eval_field(coeffs.neumann_flux, x[None, :])[0]
                shp = np.array(
                    [(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)]
                )
                for n, s in zip((i, j, m), shp):
                    b[n] -= w * length * q * s
    return b


def fem_solve_dirichlet(space, coeffs, tol=1e-10, max_iter=None):
    """Classic FEM solve with essential boundary values; the oracle path.

    Returns the full nodal coefficient vector of length N_h.
    """
    interior = space.interior_nodes
    if len(interior) == 0:
        raise ValueError("mesh has no interior nodes")
    boundary = space.dirichlet_nodes

    a = assemble_operator(space, coeffs)
    b = assemble_load(space, coeffs)
    a_ii = linalg.submatrix(a, interior, interior)
    a_ib = linalg.submatrix(a, interior, boundary)
    m_e = space.dirichlet_values()
    rhs = b[interior] - linalg.spmv(a_ib, m_e)

    if _is_negative_definite_form(coeffs):
        # A_ii is the negated SPD stiffness(+reaction); flip for CG
        neg = linalg.CsrMatrix(
            a_ii.nrows, a_ii.ncols, a_ii.row_offsets, a_ii.col_indices, -a_ii.values
        )
        x, _ = linalg.solve(neg, -rhs, method="cg", tol=tol, max_iter=max_iter)
    else:
        x, _ = linalg.solve(a_ii, rhs, method="bicgstab", tol=tol, max_iter=max_iter)

    m = np.zeros(space.num_nodes)
    m[interior] = x
    m[boundary] = m_e
    return m


def _is_negative_definite_form(coeffs):
    return (
        not callable(coeffs.kappa)
        and not callable(coeffs.beta)
        and float(coeffs.kappa) > 0.0
        and float(coeffs.beta) <= 0.0
    )


def l2_error(space, m, exact_fn, quad=None):
    """Relative function-space L2 error of the P2 field m against exact_fn.

    Integrated with element quadrature; this is the norm in which P2
    converges at O(h^3) (nodal values superconverge and are not comparable).
    """
    if quad is None:
        quad = triangle_quadrature(5)
    p, det, _ = _geometry(space)
    num = 0.0
    den = 0.0
    for bary, w in zip(quad.points, quad.weights):
        vals6, _ = p2_basis_eval(bary)
        xq = np.einsum("a,tad->td", bary, p)
        uh = m[space.elem_nodes] @ vals6
        ue = np.asarray(exact_fn(xq), dtype=np.float64)
        num += float(np.sum(w * det * (uh - ue) ** 2))
        den += float(np.sum(w * det * ue**2))
    return np.sqrt(num / den)


def refined_reference(space, coeffs, levels=2, tol=1e-10):
    """FEM solution on a ``levels``-times uniformly refined mesh, restricted
    to the nodes of ``space``.

    Relies on the shared edge enumeration: parent P2 node k is refined-mesh
    vertex k, so the restriction is a slice.
    """
    fine_mesh = space.mesh
    for _ in range(levels):
        fine_mesh = meshmod.refine_uniform(fine_mesh)
    fine_space = build_p2_space(
        fine_mesh, space.dirichlet_tags, space.boundary_value_fn
    )

    coeffs_fine = coeffs
    if isinstance(coeffs.source, np.ndarray):
        raise ValueError(
            "refined_reference requires a functional source, not nodal values"
        )
    fine_m = fem_solve_dirichlet(fine_space, coeffs_fine, tol=tol)
    if not np.allclose(
        fine_space.nodes[: space.num_nodes], space.nodes, atol=1e-12, rtol=0.0
    ):
        raise AssertionError("refined mesh does not nest parent P2 nodes")
    return fine_m[: space.num_nodes]
