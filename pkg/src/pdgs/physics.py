"""Precomputed Galerkin residual systems, the physics loss, and error metrics.

The residual of a full coefficient vector m is ``A m - b`` restricted to
interior test functions (Dirichlet-node test rows carry unknown boundary
fluxes and are dropped).  With hard boundary values m_e and network outputs
f_out, the interior residual is affine:

    R(f_out) = A_ii (delta f_out) + A_ib m_e - b_i

Everything except f_out is assembled once; training only does sparse
matvecs.  ``quadrature_residual`` recomputes the same vector by looping
Gaussian quadrature points without any precomputed matrix and serves as the
independent oracle for the matrix path.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import linalg
from .autodiff import accumulate_grad
from .fem import (
    PdeCoefficients,
    _geometry,
    assemble_load,
    assemble_operator,
    edge_quadrature,
    eval_field,
    p2_basis_eval,
    triangle_quadrature,
)


@dataclass(frozen=True)
class ResidualSystem:
    a_ii: linalg.CsrMatrix  # interior test x interior trial
    a_ib: linalg.CsrMatrix  # interior test x boundary trial
    a_ii_t: linalg.CsrMatrix  # transpose of a_ii, for the loss gradient
    b_i: np.ndarray
    m_e: np.ndarray
    delta: float
    interior: np.ndarray  # node ids of interior unknowns, ascending
    boundary: np.ndarray  # node ids of Dirichlet values, ascending
    num_nodes: int

    @property
    def num_interior(self):
        return len(self.interior)


def build_residual_system(space, coeffs, delta=1.0, quad=None):
    if delta <= 0:
        raise ValueError("delta must be positive")
    interior = space.interior_nodes
    if len(interior) == 0:
        raise ValueError("no interior nodes: nothing to solve for")
    boundary = space.dirichlet_nodes

    a = assemble_operator(space, coeffs, quad)
    b = assemble_load(space, coeffs, quad)
    a_ii = linalg.submatrix(a, interior, interior)
    a_ib = linalg.submatrix(a, interior, boundary)
    m_e = space.dirichlet_values()
    return ResidualSystem(
        a_ii,
        a_ib,
        linalg.transpose(a_ii),
        b[interior],
        m_e,
        float(delta),
        interior,
        boundary,
        space.num_nodes,
    )


def source_load_operator(space, quad=None):
    """CSR operator L with b_i = L @ s_nodal for a P2-interpolated source.

    Rows are interior test functions; this is the negated interior block of
    the mass matrix, matching the sign convention of ``assemble_load``.
    """
    mass = assemble_operator(
        space, PdeCoefficients(kappa=0.0, beta=-1.0, source=0.0), quad
    )
    return linalg.submatrix(mass, space.interior_nodes, np.arange(space.num_nodes))


def with_nodal_source(system, load_op, s_nodal):
    """Residual system sharing matrices with ``system`` but carrying the load
    of the given nodal source (overwrites, not adds, the stored b_i)."""
    return replace(system, b_i=linalg.spmv(load_op, np.asarray(s_nodal, float)))


def residual_vector(system, f_out):
    f_out = np.asarray(f_out, dtype=np.float64).reshape(-1)
    if len(f_out) != system.num_interior:
        raise ValueError(
            f"f_out has {len(f_out)} entries, expected {system.num_interior}"
        )
    r = linalg.spmv(system.a_ii, system.delta * f_out)
    if len(system.boundary):
        r += linalg.spmv(system.a_ib, system.m_e)
    return r - system.b_i


def quadrature_residual(space, coeffs, m):
    """Interior-test residual evaluated point-by-point from quadrature.

    Reconstructs u_h and grad(u_h) from basis values at every Gaussian point;
    shares no code with the assembly path beyond the basis definition.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (space.num_nodes,):
        raise ValueError("m must have one entry per P2 node")
    quad = triangle_quadrature(5)
    p, det, grad_lam = _geometry(space)
    r = np.zeros(space.num_nodes)

    for ti in range(len(det)):
        nodes = space.elem_nodes[ti]
        mloc = m[nodes]
        for bary, w in zip(quad.points, quad.weights):
            vals6, dlam = p2_basis_eval(bary)
            grads = dlam @ grad_lam[ti]  # (6, 2) physical basis gradients
            x = (bary @ p[ti])[None, :]
            uh = vals6 @ mloc
            guh = mloc @ grads
            kq = eval_field(coeffs.kappa, x)[0]
            bq = eval_field(coeffs.beta, x)[0]
            if isinstance(coeffs.source, np.ndarray):
                sq = vals6 @ coeffs.source[nodes]
            else:
                sq = eval_field(coeffs.source, x)[0]
            flux = kq * guh
            scale = w * det[ti]
            r[nodes] += scale * (-(grads @ flux) + vals6 * (bq * uh + sq))

    if coeffs.neumann_flux is not None and len(coeffs.neumann_tags):
        tags = set(int(t) for t in coeffs.neumann_tags)
        tq, tw = edge_quadrature()
        for i, j, tag in space.mesh.boundary_edges:
            if int(tag) not in tags:
                continue
            i, j = int(i), int(j)
            mid = space.edge_node[(i, j) if i < j else (j, i)]
            pi, pj = space.mesh.vertices[i], space.mesh.vertices[j]
            length = np.linalg.norm(pj - pi)
            for t, w in zip(tq, tw):
                x = ((1 - t) * pi + t * pj)[None, :]
                q = eval_field(coeffs.neumann_flux, x)[0]
                shp = np.array(
                    [(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)]
                )
                r[[i, j, mid]] += w * length * q * shp

    return r[space.interior_nodes]


def physics_loss(tape, systems, f_outs):
    """Sum over systems of the residual 2-norm, as a differentiable scalar.

    Each f_out is an (n_interior, 1) Tensor; the gradient
    delta * A_ii^T R / ||R|| is attached via a custom tape node (guarded to
    zero when ||R|| underflows).
    """
    if len(systems) != len(f_outs):
        raise ValueError("systems and outputs differ in length")
    total = None
    for system, f_out in zip(systems, f_outs):
        if f_out.shape != (system.num_interior, 1):
            raise ValueError(
                f"f_out shape {f_out.shape} != ({system.num_interior}, 1)"
            )
        r = residual_vector(system, f_out.data[:, 0])
        norm = float(np.linalg.norm(r))

        def bwd(out, system=system, f_out=f_out, r=r, norm=norm):
            if out.grad is None or norm < 1e-30:
                return
            g = system.delta / norm * linalg.spmv(system.a_ii_t, r)
            accumulate_grad(f_out, out.grad[0, 0] * g[:, None], own=True)

        term = tape.custom(np.array([[norm]]), bwd)
        total = term if total is None else tape.add(total, term)
    return total


def assemble_full_solution(system, f_out):
    """Stack [delta f_out; m_e] back into a full nodal vector."""
    f_out = np.asarray(f_out, dtype=np.float64).reshape(-1)
    if len(f_out) != system.num_interior:
        raise ValueError("interior output length mismatch")
    u = np.empty(system.num_nodes)
    u[system.interior] = system.delta * f_out
    u[system.boundary] = system.m_e
    return u


def relative_l2(u_nn, u_ref):
    u_nn = np.asarray(u_nn, dtype=np.float64)
    u_ref = np.asarray(u_ref, dtype=np.float64)
    if u_nn.shape != u_ref.shape:
        raise ValueError("length mismatch")
    denom = np.linalg.norm(u_ref)
    if denom == 0.0:
        raise ValueError("reference norm is zero")
    return float(np.linalg.norm(u_nn - u_ref) / denom)


# ---------------------------------------------------------------------------
# exports

def export_solution_csv(path, space, u):
    with open(path, "w") as fh:
        fh.write("node_id,x,y,u\n")
        for i, ((x, y), v) in enumerate(zip(space.nodes, u)):
            fh.write(f"{i},{float(x)!r},{float(y)!r},{float(v)!r}\n")


def export_solution_vtk(path, space, u):
    """Legacy ASCII VTK POLYDATA: P2 nodes as points, each element split into
    its four corner/midside subtriangles, solution as point scalars."""
    tris = []
    for nodes in space.elem_nodes:
        v0, v1, v2, m12, m20, m01 = (int(n) for n in nodes)
        tris += [
            (v0, m01, m20),
            (m01, v1, m12),
            (m20, m12, v2),
            (m01, m12, m20),
        ]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("pdgs solution\nASCII\nDATASET POLYDATA\n")
        fh.write(f"POINTS {space.num_nodes} double\n")
        for x, y in space.nodes:
            fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        fh.write(f"POLYGONS {len(tris)} {4 * len(tris)}\n")
        for a, b, c in tris:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"POINT_DATA {space.num_nodes}\n")
        fh.write("SCALARS u double 1\nLOOKUP_TABLE default\n")
        for v in u:
            fh.write(f"{float(v)!r}\n")
