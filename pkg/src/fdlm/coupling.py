"""Cross-mesh coupling between the multiplier and the fluid velocity.

The kinematic constraint ties the fluid velocity, composed with the
current solid deformation, to the solid velocity. Its matrix pairs
multiplier basis functions on the solid reference mesh with fluid basis
functions evaluated at mapped quadrature points: for the L2 realization

    (C u)_mu = sum_q w_q |K| mu(s_q) . u(Xbar(s_q)),

and the H1 realization adds the gradient pairing, whose solid-side
gradient of the composed velocity follows the chain rule

    grad_s [v(Xbar(s))] = (grad v)(Xbar(s)) . grad_s Xbar(s).

Quadrature runs on the solid mesh; fluid element boundaries cut through
solid elements, so the integration is inexact. That affects constants
only, not the structure of the scheme, and the rule degree is
configurable.

A mapped quadrature point falling outside the fluid mesh means the
solid reached the container boundary; the step is aborted with
``SolidEscaped`` rather than clamped, since projecting points back in
would corrupt the energy bookkeeping.
"""

import numpy as np
import scipy.sparse as sp

from . import mesh as msh
from .fespace import coefs, shape_grad_coeffs, shape_values, triangle_rule
from .forms import C1_L2, C2_H1


class SolidEscaped(RuntimeError):
    """A mapped solid quadrature point left the fluid mesh (fatal)."""

    def __init__(self, point, element, bounds):
        self.point = tuple(point)
        self.element = int(element)
        self.bounds = bounds
        super().__init__(
            f"solid point mapped to {self.point} outside the fluid mesh "
            f"(solid element {self.element}; mapped position range "
            f"x in [{bounds[0]:.3g}, {bounds[1]:.3g}], "
            f"y in [{bounds[2]:.3g}, {bounds[3]:.3g}])")


class CouplingAssembler:
    """Precomputed context for repeated coupling assembly.

    Holds the multiplier and velocity spaces, a locator over the fluid
    (velocity) mesh, the solid-side quadrature rule, and the coupling
    form choice. Reassembling with bit-identical deformation
    coefficients yields a bit-identical matrix.
    """

    def __init__(self, lambda_space, velocity_space, locator=None,
                 quad_degree=4, form=C2_H1):
        if form not in (C1_L2, C2_H1):
            raise ValueError(f"unknown coupling form {form!r}")
        self.lambda_space = lambda_space
        self.velocity_space = velocity_space
        self.locator = locator or msh.MeshLocator(velocity_space.mesh)
        if self.locator.mesh is not velocity_space.mesh:
            raise ValueError("locator must be built over the velocity mesh")
        self.quad = triangle_rule(quad_degree)
        self.form = form
        smesh = lambda_space.mesh
        self._areas, self._grad_lam, _, _ = smesh.geometry()
        self._valsL = shape_values(lambda_space.family, self.quad.points)
        self._gradsL = np.einsum(
            "qil,tld->tqid",
            shape_grad_coeffs(lambda_space.family, self.quad.points),
            self._grad_lam)
        q = self.quad
        self._spts = np.einsum("qi,tid->tqd", q.points, smesh.tri_coords())

    def _mapped_points(self, X_bar):
        """Deformed quadrature point positions and deformation Jacobians."""
        space = self.lambda_space  # geometry of the shared solid mesh
        xb = coefs(X_bar)
        pos_space = getattr(X_bar, "space", None)
        fam = pos_space.family if pos_space is not None else "P1"
        elem = pos_space.elem_dofs if pos_space is not None else space.mesh.tris
        vals = shape_values(fam, self.quad.points)
        dco = shape_grad_coeffs(fam, self.quad.points)
        Xe = np.empty(elem.shape + (2,))
        Xe[..., 0] = xb[2 * elem]
        Xe[..., 1] = xb[2 * elem + 1]
        pts = np.einsum("qa,tac->tqc", vals, Xe)
        grads = np.einsum("qal,tld->tqad", dco, self._grad_lam)
        F = np.einsum("tac,tqad->tqcd", Xe, grads)
        return pts, F

    def assemble(self, X_bar):
        """Coupling matrix for the given deformation, shape
        (multiplier dofs) x (velocity dofs)."""
        pts, F = self._mapped_points(X_bar)
        T, nq, _ = pts.shape
        flat = pts.reshape(-1, 2)
        ktri, bary = self.locator.locate_many(flat)
        if np.any(ktri < 0):
            p = int(np.argmax(ktri < 0))
            raise SolidEscaped(flat[p], p // nq,
                               (flat[:, 0].min(), flat[:, 0].max(),
                                flat[:, 1].min(), flat[:, 1].max()))

        vfam = self.velocity_space.family
        vals_f = shape_values(vfam, bary).reshape(T, nq, -1)
        w, areas = self.quad.weights, self._areas
        entries = np.einsum("q,t,qi,tqa->tqia", w, areas, self._valsL, vals_f)
        if self.form == C2_H1:
            _, grad_lam_f, _, _ = self.velocity_space.mesh.geometry()
            dco_f = shape_grad_coeffs(vfam, bary)
            grads_f = np.einsum("pal,pld->pad", dco_f,
                                grad_lam_f[ktri]).reshape(T, nq, -1, 2)
            # chain rule: d/ds_d psi(Xbar(s)) = F_cd (d/dx_c psi)(Xbar(s))
            comp = np.einsum("tqcd,tqac->tqad", F, grads_f)
            entries = entries + np.einsum("q,t,tqid,tqad->tqia",
                                          w, areas, self._gradsL, comp)

        nlocL = self._valsL.shape[1]
        nlocV = vals_f.shape[2]
        rowsL = self.lambda_space.elem_dofs[:, None, :, None]
        rowsL = np.broadcast_to(rowsL, (T, nq, nlocL, nlocV))
        cols_f = self.velocity_space.elem_dofs[ktri].reshape(T, nq, 1, nlocV)
        cols_f = np.broadcast_to(cols_f, (T, nq, nlocL, nlocV))
        rows = np.concatenate([2 * rowsL.ravel(), 2 * rowsL.ravel() + 1])
        cols = np.concatenate([2 * cols_f.ravel(), 2 * cols_f.ravel() + 1])
        data = np.concatenate([entries.ravel(), entries.ravel()])
        mat = sp.coo_matrix((data, (rows, cols)),
                            shape=(self.lambda_space.n_dofs,
                                   self.velocity_space.n_dofs)).tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return mat

    def functional(self, X_bar, lam_fn, lam_grad_fn=None):
        """Dual vector of the coupling form against an analytic multiplier.

        Computes r with r_v = c(lam, v(Xbar)) for every velocity basis
        function, with lam given as a callable of reference points
        (n, 2) -> (n, 2); ``lam_grad_fn`` must return the reference
        Jacobian (n, 2, 2) with entries d lam_c / d s_d and is required
        for the H1 form. Used to manufacture consistent right-hand
        sides.
        """
        pts, F = self._mapped_points(X_bar)
        T, nq, _ = pts.shape
        flat = pts.reshape(-1, 2)
        ktri, bary = self.locator.locate_many(flat)
        if np.any(ktri < 0):
            p = int(np.argmax(ktri < 0))
            raise SolidEscaped(flat[p], p // nq,
                               (flat[:, 0].min(), flat[:, 0].max(),
                                flat[:, 1].min(), flat[:, 1].max()))
        spts = self._spts.reshape(-1, 2)
        lam = np.asarray(lam_fn(spts), dtype=float).reshape(T, nq, 2)
        vfam = self.velocity_space.family
        vals_f = shape_values(vfam, bary).reshape(T, nq, -1)
        w, areas = self.quad.weights, self._areas
        contrib = np.einsum("q,t,tqc,tqa->tqac", w, areas, lam, vals_f)
        if self.form == C2_H1:
            if lam_grad_fn is None:
                raise ValueError("H1 form needs the multiplier gradient")
            glam = np.asarray(lam_grad_fn(spts), dtype=float).reshape(T, nq, 2, 2)
            _, grad_lam_f, _, _ = self.velocity_space.mesh.geometry()
            dco_f = shape_grad_coeffs(vfam, bary)
            grads_f = np.einsum("pal,pld->pad", dco_f,
                                grad_lam_f[ktri]).reshape(T, nq, -1, 2)
            comp = np.einsum("tqcd,tqac->tqad", F, grads_f)
            contrib = contrib + np.einsum("q,t,tqcd,tqad->tqac",
                                          w, areas, glam, comp)
        out = np.zeros(self.velocity_space.n_dofs)
        cols = self.velocity_space.elem_dofs[ktri].reshape(T, nq, -1)
        for c in range(2):
            np.add.at(out, 2 * cols + c, contrib[..., c])
        return out


def assemble_coupling(assembler, X_bar):
    """Functional form of ``CouplingAssembler.assemble``."""
    return assembler.assemble(X_bar)


def constraint_residual(C_f, C_s, u, X_dot, d):
    """Max-norm violation of the discrete kinematic constraint
    C_f u - C_s X_dot = C_s d over the multiplier dofs."""
    r = C_f @ coefs(u) - C_s @ coefs(X_dot) - C_s @ coefs(d)
    return float(np.abs(r).max()) if r.size else 0.0


def constraint_residual_relative(C_f, C_s, u, X_dot, d):
    """Constraint violation scaled by the natural cancellation level
    of its three terms."""
    absC_f = sp.csr_matrix((np.abs(C_f.data), C_f.indices, C_f.indptr),
                           shape=C_f.shape)
    absC_s = sp.csr_matrix((np.abs(C_s.data), C_s.indices, C_s.indptr),
                           shape=C_s.shape)
    scale = max(
        float(np.abs(absC_f @ np.abs(coefs(u))).max()) if C_f.nnz else 0.0,
        float(np.abs(absC_s @ np.abs(coefs(X_dot))).max()) if C_s.nnz else 0.0,
        float(np.abs(absC_s @ np.abs(coefs(d))).max()) if C_s.nnz else 0.0,
        1e-300)
    return constraint_residual(C_f, C_s, u, X_dot, d) / scale
