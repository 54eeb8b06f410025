"""Assembly of all single-mesh bilinear and trilinear forms.

The flow container carries the viscous form with the symmetric
gradient, nu * sym_grad(u) : sym_grad(v), the skew-symmetrized
convection trilinear form

    b(u, v, w) = (rho_f / 2) * integral( (u . grad v) . w - (u . grad w) . v ),

whose discrete matrix N satisfies v' N v = 0 for every coefficient
vector by construction, and the velocity/pressure divergence pairing.
The solid reference domain carries mass and gradient forms

    a_s(X, z) = beta (X, z) + gamma (grad X, grad z)

and the multiplier-side products: the plain L2 pairing or the full H1
inner product, depending on which realization of the coupling space is
selected.

Element contributions are computed in batch with einsum, accumulated as
triplets in a fixed element order, and compressed to CSR, so repeated
assembly of identical data is bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fespace import (P1P0, QuadRule, coefs, n_local, shape_grad_coeffs,
                      shape_values, triangle_rule)

C1_L2, C2_H1 = "l2", "h1"


@dataclass(frozen=True)
class PhysParams:
    """Material constants: fluid density, excess solid density
    (solid minus fluid, nonnegative), the two viscosities, and the
    elasticity coefficient of the linear stress law."""

    rho_f: float = 1.0
    delta_rho: float = 0.0
    nu_f: float = 0.1
    nu_s: float = 0.1
    kappa: float = 1.0

    def __post_init__(self):
        if self.rho_f <= 0:
            raise ValueError("rho_f must be positive")
        if self.delta_rho < 0:
            raise ValueError("delta_rho must be nonnegative")
        if self.nu_f <= 0 or self.nu_s <= 0:
            raise ValueError("viscosities must be positive")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


def _quad(space, quad, extra_degree=0):
    if quad is not None:
        return quad
    degree = {"P0": 0, "P1": 2, "P2": 4, "P1+P0": 2}[space.family]
    return triangle_rule(min(degree + extra_degree, 6) if extra_degree else degree)


def _basis_data(space, quad):
    """Reference values/derivative coefficients plus element geometry."""
    vals = shape_values(space.family, quad.points)            # (q, a)
    dcoef = shape_grad_coeffs(space.family, quad.points)      # (q, a, 3)
    areas, grad_lam, _, _ = space.mesh.geometry()
    grads = np.einsum("qal,tld->tqad", dcoef, grad_lam)       # (T, q, a, 2)
    return vals, grads, areas


def _scatter(shape, rows, cols, data):
    mat = sp.coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                        shape=shape)
    out = mat.tocsr()
    out.sum_duplicates()
    out.sort_indices()
    return out


def _masked_scatter_scalar(local, row_dofs, col_dofs, shape):
    """Scalar-scalar scatter dropping -1 (rank-fix) dof slots."""
    T, na, nb = local.shape
    rows = np.broadcast_to(row_dofs[:, :, None], (T, na, nb))
    cols = np.broadcast_to(col_dofs[:, None, :], (T, na, nb))
    keep = (rows >= 0) & (cols >= 0)
    return _scatter(shape, rows[keep], cols[keep], local[keep])


def scalar_mass(space, quad=None):
    quad = _quad(space, quad)
    vals, _, areas = _basis_data(space, quad)
    local = np.einsum("q,qa,qb->ab", quad.weights, vals, vals)
    local = areas[:, None, None] * local[None, :, :]
    n = space.n_scalar
    return _masked_scatter_scalar(local, space.elem_dofs, space.elem_dofs, (n, n))


def scalar_stiffness(space, quad=None):
    quad = _quad(space, quad)
    _, grads, areas = _basis_data(space, quad)
    local = np.einsum("q,tqad,tqbd->tab", quad.weights, grads, grads)
    local *= areas[:, None, None]
    n = space.n_scalar
    return _masked_scatter_scalar(local, space.elem_dofs, space.elem_dofs, (n, n))


def _vectorize_scalar_matrix(space, scalar_mat):
    """Lift an (n_scalar x n_scalar) matrix to interleaved components."""
    if space.components == 1:
        return scalar_mat
    c = scalar_mat.tocoo()
    rows = np.concatenate([2 * c.row, 2 * c.row + 1])
    cols = np.concatenate([2 * c.col, 2 * c.col + 1])
    data = np.concatenate([c.data, c.data])
    return _scatter((space.n_dofs, space.n_dofs), rows, cols, data)


def mass_matrix(space, quad=None):
    """L2 Gram matrix over the full (component-expanded) dof set."""
    return _vectorize_scalar_matrix(space, scalar_mass(space, quad))


def stiffness_matrix(space, quad=None):
    """Component-wise grad-grad matrix over the full dof set."""
    return _vectorize_scalar_matrix(space, scalar_stiffness(space, quad))


def h1_gram(space, quad=None):
    """Full H1 inner product matrix (mass plus stiffness)."""
    return mass_matrix(space, quad) + stiffness_matrix(space, quad)


def assemble_viscous(space, nu, quad=None):
    """Viscous stiffness with the symmetric gradient.

    For basis vectors e_c psi_a and e_d psi_b the integrand reduces to

        (1/2) (delta_cd grad(psi_a) . grad(psi_b) + d_d psi_a d_c psi_b),

    so the local kernel couples the two components. ``nu`` may be a
    scalar or a per-element array, which supports a piecewise viscosity
    given an element membership test.
    """
    if space.components != 2:
        raise ValueError("viscous form needs a vector space")
    quad = _quad(space, quad)
    _, grads, areas = _basis_data(space, quad)
    T, _, na, _ = grads.shape
    nu_el = np.broadcast_to(np.asarray(nu, dtype=float), (T,))
    same = np.einsum("q,tqax,tqbx->tab", quad.weights, grads, grads)
    cross = np.einsum("q,tqad,tqbc->tacbd", quad.weights, grads, grads)
    scale = (nu_el * areas)[:, None, None, None, None]
    local = 0.5 * scale * (np.einsum("tab,cd->tacbd", same, np.eye(2)) + cross)
    dofs = space.elem_dofs
    rows = (2 * dofs[:, :, None] + np.arange(2)[None, None, :])  # (T, a, c)
    rows = rows[:, :, :, None, None]
    cols = (2 * dofs[:, None, None, :, None]
            + np.arange(2)[None, None, None, None, :])
    rows = np.broadcast_to(rows, local.shape)
    cols = np.broadcast_to(cols, local.shape)
    return _scatter((space.n_dofs, space.n_dofs), rows, cols, local)


def assemble_convection(u_bar, space, rho_f=1.0, quad=None):
    """Skew-symmetrized convection matrix N(u_bar).

    The two halves of the integrand are antisymmetric under exchanging
    test and trial function, so v' N v vanishes for every v regardless
    of quadrature; that discrete skew-symmetry is what removes the
    convective term from the energy balance.
    """
    if space.components != 2:
        raise ValueError("convection form needs a vector space")
    quad = _quad(space, quad, extra_degree=1)
    vals, grads, areas = _basis_data(space, quad)
    ub = coefs(u_bar)
    T, _, na, _ = grads.shape
    ue = np.empty((T, na, 2))
    ue[:, :, 0] = ub[2 * space.elem_dofs]
    ue[:, :, 1] = ub[2 * space.elem_dofs + 1]
    uq = np.einsum("qa,tac->tqc", vals, ue)                   # u_bar at points
    adv = np.einsum("q,tqc,tqbc,qa->tab", quad.weights, uq, grads, vals)
    local = 0.5 * rho_f * areas[:, None, None] * (adv - adv.transpose(0, 2, 1))
    n = space.n_scalar
    scalar = _masked_scatter_scalar(local, space.elem_dofs, space.elem_dofs,
                                    (n, n))
    return _vectorize_scalar_matrix(space, scalar)


def _pressure_values_on(v_space, q_space, quad):
    """Pressure basis values at the velocity elements' quadrature points.

    Velocity elements either live on the pressure mesh itself or on its
    uniform refinement; in the nested case the values come from the
    parent element through the coarse affine map.
    """
    if q_space.mesh is v_space.mesh:
        vals = shape_values(q_space.family, quad.points)
        T = v_space.mesh.n_tris
        qvals = np.broadcast_to(vals, (T,) + vals.shape)
        return qvals, np.arange(T, dtype=np.intp)
    if v_space.mesh.coarse is q_space.mesh:
        parent = v_space.mesh.parent
        _, _, inv_c, p0_c = q_space.mesh.geometry()
        pts = np.einsum("qi,tid->tqd", quad.points, v_space.mesh.tri_coords())
        rel = pts - p0_c[parent][:, None, :]
        l1 = np.einsum("td,tqd->tq", inv_c[parent][:, 0, :], rel)
        l2 = np.einsum("td,tqd->tq", inv_c[parent][:, 1, :], rel)
        bary = np.stack([1.0 - l1 - l2, l1, l2], axis=-1)
        T, nq, _ = bary.shape
        qvals = shape_values(q_space.family, bary.reshape(-1, 3))
        return qvals.reshape(T, nq, -1), parent
    raise ValueError("pressure mesh must be the velocity mesh or its coarse parent")


def assemble_divergence(v_space, q_space, quad=None):
    """Divergence pairing B with (B u)_q = (div u, q).

    Integration runs over the velocity mesh; with the P1-iso-P2 pair the
    pressure basis is evaluated through the parent-element map.
    """
    quad = _quad(v_space, quad)
    _, grads, areas = _basis_data(v_space, quad)
    qvals, parent = _pressure_values_on(v_space, q_space, quad)
    # entry: integral chi_q * d_c psi_b
    local = np.einsum("q,tqi,tqbc->tibc", quad.weights, qvals, grads)
    local *= areas[:, None, None, None]
    T, ni, nb, _ = local.shape
    rows = np.broadcast_to(q_space.elem_dofs[parent][:, :, None, None],
                           local.shape)
    cols = (2 * v_space.elem_dofs[:, None, :, None]
            + np.arange(2)[None, None, None, :])
    cols = np.broadcast_to(cols, local.shape)
    keep = rows >= 0
    return _scatter((q_space.n_scalar, v_space.n_dofs),
                    rows[keep], cols[keep], local[keep])


def assemble_solid(space, beta, gamma, quad=None):
    """Solid form beta * mass + gamma * grad-grad on the reference domain."""
    if beta < 0 or gamma <= 0:
        raise ValueError("need beta >= 0 and gamma > 0")
    out = gamma * stiffness_matrix(space, quad)
    if beta != 0.0:
        out = out + beta * mass_matrix(space, quad)
    return out.tocsr()


def assemble_lambda_product(lambda_space, other_space, form=C2_H1, quad=None):
    """Pairing matrix between the multiplier space and another solid
    space: the L2 mass for the dual-space realization, plus the
    grad-grad term when the multiplier space is taken with the full H1
    product."""
    if lambda_space.mesh is not other_space.mesh:
        raise ValueError("multiplier products need both spaces on one mesh")
    if quad is None:
        quad = triangle_rule(4)
    valsL = shape_values(lambda_space.family, quad.points)
    valsS = shape_values(other_space.family, quad.points)
    areas, grad_lam, _, _ = lambda_space.mesh.geometry()
    local = np.einsum("q,qi,qa->ia", quad.weights, valsL, valsS)
    local = areas[:, None, None] * local[None, :, :]
    if form == C2_H1:
        gL = np.einsum("qil,tld->tqid",
                       shape_grad_coeffs(lambda_space.family, quad.points),
                       grad_lam)
        gS = np.einsum("qal,tld->tqad",
                       shape_grad_coeffs(other_space.family, quad.points),
                       grad_lam)
        local = local + areas[:, None, None] * np.einsum(
            "q,tqid,tqad->tia", quad.weights, gL, gS)
    elif form != C1_L2:
        raise ValueError(f"unknown coupling form {form!r}")
    n_rows = lambda_space.n_dofs
    n_cols = other_space.n_dofs
    scalar = _masked_scatter_scalar(local, lambda_space.elem_dofs,
                                    other_space.elem_dofs,
                                    (lambda_space.n_scalar, other_space.n_scalar))
    c = scalar.tocoo()
    rows = np.concatenate([2 * c.row, 2 * c.row + 1])
    cols = np.concatenate([2 * c.col, 2 * c.col + 1])
    data = np.concatenate([c.data, c.data])
    return _scatter((n_rows, n_cols), rows, cols, data)


def deformation_gradients(space, X, quad=None):
    """Jacobian of the deformation at quadrature points, (T, q, 2, 2)."""
    quad = _quad(space, quad)
    _, grads, areas = _basis_data(space, quad)
    xc = coefs(X)
    Xe = np.empty(space.elem_dofs.shape + (2,))
    Xe[..., 0] = xc[2 * space.elem_dofs]
    Xe[..., 1] = xc[2 * space.elem_dofs + 1]
    F = np.einsum("tac,tqad->tqcd", Xe, grads)
    return F, quad, areas


def elastic_energy(X, kappa, space=None):
    """Stored elastic energy (kappa / 2) * |grad X|^2 over the reference
    domain; nonnegative, and equal to half the grad-grad quadratic form."""
    if space is None:
        space = X.space
    F, quad, areas = deformation_gradients(space, X)
    dens = np.einsum("q,tqcd,tqcd->t", quad.weights, F, F)
    return 0.5 * float(kappa) * float(np.dot(areas, dens))


def mixed_mass_nested(coarse_space, fine_space, quad=None):
    """L2 pairing between a space and one on the refined mesh,
    component-expanded; rows index the coarse space."""
    if coarse_space.components != fine_space.components:
        raise ValueError("component counts differ")
    quad = _quad(fine_space, quad)
    valsF = shape_values(fine_space.family, quad.points)
    areas, _, _, _ = fine_space.mesh.geometry()
    valsC, parent = _pressure_values_on(fine_space, coarse_space, quad)
    local = np.einsum("q,tqi,qa->tia", quad.weights, valsC, valsF)
    local *= areas[:, None, None]
    scalar = _masked_scatter_scalar(
        local, coarse_space.elem_dofs[parent], fine_space.elem_dofs,
        (coarse_space.n_scalar, fine_space.n_scalar))
    if coarse_space.components == 1:
        return scalar
    c = scalar.tocoo()
    rows = np.concatenate([2 * c.row, 2 * c.row + 1])
    cols = np.concatenate([2 * c.col, 2 * c.col + 1])
    data = np.concatenate([c.data, c.data])
    return _scatter((coarse_space.n_dofs, fine_space.n_dofs), rows, cols, data)


def mean_vector(q_space):
    """Vector of integrals of each pressure basis function over the
    container; realizes the zero-mean constraint row."""
    quad = _quad(q_space, quad=None)
    vals = shape_values(q_space.family, quad.points)
    areas, _, _, _ = q_space.mesh.geometry()
    local = areas[:, None] * np.einsum("q,qi->i", quad.weights, vals)[None, :]
    out = np.zeros(q_space.n_scalar)
    keep = q_space.elem_dofs >= 0
    np.add.at(out, q_space.elem_dofs[keep], local[keep])
    return out


def export_matrix_market(matrix, path):
    """Text export in MatrixMarket coordinate format."""
    scipy.io.mmwrite(path, sp.coo_matrix(matrix))
