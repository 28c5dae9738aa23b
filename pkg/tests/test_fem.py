import math

import numpy as np
import pytest

from pdgs import linalg
from pdgs.fem import (
    PdeCoefficients,
    l2_error,
    assemble_load,
    assemble_operator,
    build_p2_space,
    fem_solve_dirichlet,
    p2_basis_eval,
    refined_reference,
    triangle_quadrature,
)
from pdgs.mesh import (
    cut_slit,
    generate_unit_square,
    perturb_interior,
    refine_uniform,
)


def _ref_integral(a, b, c):
    # exact Dirichlet integral of lambda0^a lambda1^b lambda2^c over the
    # reference triangle (area 1/2)
    return (
        math.factorial(a)
        * math.factorial(b)
        * math.factorial(c)
        / math.factorial(a + b + c + 2)
    )


def test_space_counts_two_triangles():
    m = generate_unit_square(1, 1)
    sp = build_p2_space(m)
    assert sp.num_nodes == 4 + 5


def test_midside_nodes_at_midpoints():
    m = generate_unit_square(3, 2, ((-1, 0), (2, 1)))
    sp = build_p2_space(m)
    for (i, j), n in sp.edge_node.items():
        mid = 0.5 * (m.vertices[i] + m.vertices[j])
        assert np.linalg.norm(sp.nodes[n] - mid) <= 1e-14


def test_dirichlet_mask_covers_boundary_midpoints():
    m = generate_unit_square(2, 2)
    sp = build_p2_space(m, dirichlet_tags=(1,))
    for i, j, _ in m.boundary_edges:
        i, j = int(i), int(j)
        assert sp.dirichlet_mask[i] and sp.dirichlet_mask[j]
        assert sp.dirichlet_mask[sp.edge_node[(min(i, j), max(i, j))]]
    # interior_index is a bijection on the complement
    interior = np.nonzero(~sp.dirichlet_mask)[0]
    assert sorted(sp.interior_index[interior]) == list(range(len(interior)))


def test_basis_nodal_property_and_partition_of_unity():
    vals, _ = p2_basis_eval((1.0, 0.0, 0.0))
    assert np.allclose(vals, [1, 0, 0, 0, 0, 0], atol=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        l0, l1 = rng.random(2)
        if l0 + l1 > 1:
            l0, l1 = 1 - l0, 1 - l1
        vals, grads = p2_basis_eval((l0, l1, 1 - l0 - l1))
        assert abs(vals.sum() - 1.0) <= 1e-14
        # sum of barycentric partials is the constant [3,3,3]; combined with
        # sum(grad lambda_a) = 0 this gives zero physical gradient of sum(phi)
        assert np.allclose(grads.sum(axis=0), [3, 3, 3], atol=1e-14)


def test_basis_at_centroid():
    vals, _ = p2_basis_eval((1 / 3, 1 / 3, 1 / 3))
    assert np.allclose(vals[:3], -1.0 / 9.0, atol=1e-15)
    assert np.allclose(vals[3:], 4.0 / 9.0, atol=1e-15)


@pytest.mark.parametrize("degree", [2, 5])
def test_quadrature_weights_sum_to_half(degree):
    q = triangle_quadrature(degree)
    assert abs(q.weights.sum() - 0.5) <= 1e-15
    assert (q.weights > 0).all()
    assert np.allclose(q.points.sum(axis=1), 1.0, atol=1e-14)


def test_quadrature_degree2_exactness():
    q = triangle_quadrature(2)
    got = sum(w * p[0] ** 2 for p, w in zip(q.points, q.weights))
    assert abs(got - 1.0 / 12.0) <= 1e-15
    assert abs(1.0 / 12.0 - _ref_integral(2, 0, 0)) <= 1e-16


def test_quadrature_degree5_exactness():
    q = triangle_quadrature(5)
    for a, b, c in [(4, 1, 0), (5, 0, 0), (2, 2, 1), (3, 1, 1), (1, 1, 3)]:
        got = sum(
            w * p[0] ** a * p[1] ** b * p[2] ** c
            for p, w in zip(q.points, q.weights)
        )
        assert abs(got - _ref_integral(a, b, c)) <= 1e-15, (a, b, c)


def test_unsupported_quadrature_degree():
    with pytest.raises(ValueError):
        triangle_quadrature(3)


def test_stiffness_annihilates_constants():
    m = generate_unit_square(3, 3)
    sp = build_p2_space(m)
    a = assemble_operator(sp, PdeCoefficients(kappa=1.0, beta=0.0))
    y = linalg.spmv(a, np.ones(sp.num_nodes))
    assert np.abs(y).max() <= 1e-12


def test_mass_total_equals_area():
    m = generate_unit_square(3, 2, ((-1, -1), (1, 1)))
    sp = build_p2_space(m)
    a = assemble_operator(sp, PdeCoefficients(kappa=0.0, beta=1.0))
    total = linalg.spmv(a, np.ones(sp.num_nodes)).sum()
    assert abs(total - 4.0) <= 1e-12


def test_operator_two_pass_linearity():
    # kappa=1, beta=k^2 assembled at once equals -K + k^2 M from separate passes
    k = 40.0
    m = generate_unit_square(4, 4)
    sp = build_p2_space(m)
    both = assemble_operator(sp, PdeCoefficients(kappa=1.0, beta=k * k))
    stiff = assemble_operator(sp, PdeCoefficients(kappa=1.0, beta=0.0))
    mass = assemble_operator(sp, PdeCoefficients(kappa=0.0, beta=1.0))
    combo = stiff.toarray() + k * k * mass.toarray()
    diff = np.abs(both.toarray() - combo)
    assert diff.max() <= 1e-13 * max(1.0, np.abs(combo).max())


def test_operator_symmetry_with_variable_coefficients():
    m = generate_unit_square(3, 3)
    sp = build_p2_space(m)
    coeffs = PdeCoefficients(
        kappa=lambda x: 1.0 + 0.5 * x[:, 0] ** 2,
        beta=lambda x: np.sin(x[:, 1]),
    )
    a = assemble_operator(sp, coeffs).toarray()
    assert np.abs(a - a.T).max() <= 1e-13


def test_load_zero_source():
    m = generate_unit_square(2, 2)
    sp = build_p2_space(m)
    b = assemble_load(sp, PdeCoefficients(source=0.0))
    assert np.array_equal(b, np.zeros(sp.num_nodes))


def test_load_constant_source_sums_to_area():
    m = generate_unit_square(3, 3, ((-1, -1), (1, 1)))
    sp = build_p2_space(m)
    b = assemble_load(sp, PdeCoefficients(source=1.0))
    # b_i = -int(phi_i), so -sum(b) = domain area
    assert abs(-b.sum() - 4.0) <= 1e-12


def test_nodal_source_matches_analytic_linear():
    # s(x) = x is in the P2 space, so interpolation is exact and the nodal
    # load must match the analytic field load to quadrature exactness
    m = generate_unit_square(3, 2)
    sp = build_p2_space(m)
    mu = sp.nodes[:, 0].copy()
    b_nodal = assemble_load(sp, PdeCoefficients(source=mu))
    b_field = assemble_load(sp, PdeCoefficients(source=lambda x: x[:, 0]))
    assert np.abs(b_nodal - b_field).max() <= 1e-14


def test_fem_reproduces_quadratic_exactly():
    def g(x):
        return x[:, 0] ** 2 + x[:, 1] ** 2

    m = generate_unit_square(4, 4, ((-1, -1), (1, 1)))
    sp = build_p2_space(m, g=g)
    coeffs = PdeCoefficients(kappa=1.0, beta=0.0, source=-4.0)
    sol = fem_solve_dirichlet(sp, coeffs)
    exact = g(sp.nodes)
    assert np.abs(sol - exact).max() <= 1e-8


def test_fem_zero_data_gives_zero():
    m = generate_unit_square(3, 3)
    sp = build_p2_space(m, g=0.0)
    sol = fem_solve_dirichlet(sp, PdeCoefficients())
    assert np.abs(sol).max() == 0.0


def test_fem_interior_residual_small():
    m = generate_unit_square(4, 4, ((-1, -1), (1, 1)))
    sp = build_p2_space(m, g=0.0)
    coeffs = PdeCoefficients(source=1.0)
    sol = fem_solve_dirichlet(sp, coeffs, tol=1e-12)
    a = assemble_operator(sp, coeffs)
    b = assemble_load(sp, coeffs)
    res = linalg.spmv(a, sol) - b
    interior = sp.interior_nodes
    assert np.abs(res[interior]).max() <= 10 * 1e-12 * np.abs(b).max()


def test_cubic_p2_convergence_rate():
    # u = x^3 + y^3 is one degree past P2; L2 error contracts 8x per uniform
    # refinement.  Interior vertices are perturbed because structured meshes
    # superconverge past the generic rate.
    def g(x):
        return x[:, 0] ** 3 + x[:, 1] ** 3

    def s(x):
        return -(6.0 * x[:, 0] + 6.0 * x[:, 1])

    errors = []
    for n in (8, 16, 32):
        m = perturb_interior(generate_unit_square(n, n), 0.25, seed=n)
        sp = build_p2_space(m, g=g)
        sol = fem_solve_dirichlet(
            sp, PdeCoefficients(source=s), tol=1e-12
        )
        errors.append(l2_error(sp, sol, g))
    for ratio in (errors[0] / errors[1], errors[1] / errors[2]):
        assert 8 * 0.8 <= ratio <= 8 * 1.2, (errors, ratio)


def test_helmholtz_p2_convergence_rate():
    # u = sin(k x) solves laplace(u) + k^2 u = 0.  At desk-scale meshes the
    # pollution term still dominates, so the contraction per refinement sits
    # between the generic O(h^3) (8x) and the pollution O(h^4) (16x).
    k = 10.0

    def g(x):
        return np.sin(k * x[:, 0])

    errors = []
    for n in (8, 16, 32):
        m = perturb_interior(generate_unit_square(n, n), 0.25, seed=100 + n)
        sp = build_p2_space(m, g=g)
        sol = fem_solve_dirichlet(
            sp, PdeCoefficients(kappa=1.0, beta=k * k), tol=1e-12
        )
        errors.append(l2_error(sp, sol, g))
    r2 = errors[1] / errors[2]
    assert 6.0 <= r2 <= 24.0, (errors, r2)


def test_slit_space_separates_sides():
    m = cut_slit(generate_unit_square(4, 4, ((-1, -1), (1, 1))), (0, 0), (1, 0))
    sp = build_p2_space(m, g=0.0)
    # midside nodes on the two slit faces are distinct but coincident
    dup_mids = [
        n
        for (i, j), n in sp.edge_node.items()
        if abs(sp.nodes[n][1]) < 1e-14 and 0 < sp.nodes[n][0] < 1
    ]
    coords = np.round([sp.nodes[n][0] for n in dup_mids], 12)
    _, counts = np.unique(coords, return_counts=True)
    assert (counts == 2).all()


def test_refined_reference_matches_exact_quadratic():
    def g(x):
        return x[:, 0] ** 2 + x[:, 1] ** 2

    m = generate_unit_square(2, 2, ((-1, -1), (1, 1)))
    sp = build_p2_space(m, g=g)
    ref = refined_reference(sp, PdeCoefficients(source=-4.0), levels=1)
    assert np.abs(ref - g(sp.nodes)).max() <= 1e-8


def test_refine_uniform_keeps_p2_nodes():
    m = generate_unit_square(2, 2, ((-1, -1), (1, 1)))
    sp = build_p2_space(m)
    r = refine_uniform(m)
    assert np.allclose(r.vertices[: sp.num_nodes], sp.nodes, atol=1e-15)
