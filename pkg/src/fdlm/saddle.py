"""Per-step stationary solver: build and solve the block saddle system.

With the unknowns ordered (u, X, lambda | p) plus one auxiliary scalar
xi enforcing the zero pressure mean, the monolithic operator reads

    [ A_f   0     C_f'  -B'   0 ] [u  ]   [f ]
    [ 0     A_s  -C_s'   0    0 ] [X  ]   [g ]
    [ C_f  -C_s   0      0    0 ] [lam] = [d ]
    [ B     0     0      0    m ] [p  ]   [0 ]
    [ 0     0     0      m'   0 ] [xi ]   [0 ]

where A_f collects the velocity mass scaled by the time-step
coefficient, the viscous form, and the skew convection at the lagged
velocity; A_s = beta * mass + gamma * stiffness on the solid; B is the
divergence pairing; C_f couples the multiplier to the fluid velocity
composed with the lagged deformation and C_s pairs it with solid test
functions. For backward Euler the coefficients are alpha = rho_f / dt,
beta = drho / dt, gamma = kappa * dt, and the scaled position unknown
X stands for (new deformation) / dt.

Wall constraints are eliminated symmetrically (rows and columns zeroed,
unit diagonal, right-hand side corrected), the composed matrix is
factorized once per step with a sparse direct LU, and every reported
residual is recomputed from the assembled operator, never copied from
the solver.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as msh
from .coupling import (CouplingAssembler, constraint_residual,
                       constraint_residual_relative)
from .fespace import (DiscreteField, coefs, make_pressure_space,
                      make_solid_spaces, make_velocity_space)
from .forms import (C2_H1, assemble_convection, assemble_divergence,
                    assemble_lambda_product, assemble_viscous, h1_gram,
                    mass_matrix, mean_vector, stiffness_matrix)


class SingularSystem(RuntimeError):
    """Factorization failed: incompatible spaces or an escaped solid."""


class Discretization:
    """Meshes, spaces, and the step-independent matrices of one setup.

    Assembles once: velocity mass and viscous matrices, solid mass and
    stiffness, the divergence block, the multiplier/solid pairing, the
    pressure mean vector, and the H1 Gram matrices used for norms. The
    per-step pieces (convection, cross-mesh coupling) are rebuilt from
    the lagged state by ``build_system``.
    """

    def __init__(self, fluid_mesh, solid_mesh, params,
                 element_pair="p1isop2_bp", deg_position=1, deg_multiplier=1,
                 coupling_form=C2_H1, quad_degree=4, nu_elements=None):
        self.fluid_mesh = fluid_mesh
        self.solid_mesh = solid_mesh
        self.params = params
        self.element_pair = element_pair
        self.coupling_form = coupling_form

        if element_pair == "p1isop2_bp":
            self.v_space = make_velocity_space(fluid_mesh, "P1isoP2")
            self.p_space = make_pressure_space(fluid_mesh, "BPenhanced")
        elif element_pair == "taylor_hood":
            self.v_space = make_velocity_space(fluid_mesh, "TaylorHoodP2")
            self.p_space = make_pressure_space(fluid_mesh, "P1")
        else:
            raise ValueError(f"unknown element pair {element_pair!r}")
        self.S_space, self.L_space = make_solid_spaces(
            solid_mesh, deg_position, deg_multiplier)

        nu = params.nu_f if nu_elements is None else nu_elements
        self.M_u = mass_matrix(self.v_space)
        self.A_visc = assemble_viscous(self.v_space, nu)
        self.M_s = mass_matrix(self.S_space)
        self.K_s = stiffness_matrix(self.S_space)
        self.B_div = assemble_divergence(self.v_space, self.p_space)
        self.C_s = assemble_lambda_product(self.L_space, self.S_space,
                                           coupling_form)
        self.mean_p = mean_vector(self.p_space)
        self.G_u = h1_gram(self.v_space)
        self.G_X = h1_gram(self.S_space)
        self.locator = msh.MeshLocator(self.v_space.mesh)
        self.coupler = CouplingAssembler(self.L_space, self.v_space,
                                         locator=self.locator,
                                         quad_degree=quad_degree,
                                         form=coupling_form)

        self.n_u = self.v_space.n_dofs
        self.n_X = self.S_space.n_dofs
        self.n_lam = self.L_space.n_dofs
        self.n_p = self.p_space.n_dofs
        self.n_total = self.n_u + self.n_X + self.n_lam + self.n_p + 1
        o = np.cumsum([0, self.n_u, self.n_X, self.n_lam, self.n_p])
        self.slc_u = slice(o[0], o[1])
        self.slc_X = slice(o[1], o[2])
        self.slc_lam = slice(o[2], o[3])
        self.slc_p = slice(o[3], o[4])
        self.idx_xi = self.n_total - 1
        self.constrained_dofs = self.v_space.constrained_idx
        self.constrained_vals = np.array(
            [self.v_space.constrained[int(i)] for i in self.constrained_dofs])

    # norm helpers used by steppers and monitors
    def norm_l2_u(self, v):
        return float(np.sqrt(max(coefs(v) @ (self.M_u @ coefs(v)), 0.0)))

    def norm_h1_u(self, v):
        return float(np.sqrt(max(coefs(v) @ (self.G_u @ coefs(v)), 0.0)))

    def norm_l2_X(self, z):
        return float(np.sqrt(max(coefs(z) @ (self.M_s @ coefs(z)), 0.0)))

    def norm_h1_X(self, z):
        return float(np.sqrt(max(coefs(z) @ (self.G_X @ coefs(z)), 0.0)))

    def be_coefficients(self, dt):
        p = self.params
        return p.rho_f / dt, p.delta_rho / dt, p.kappa * dt


class BlockSystem:
    """Assembled blocks and right-hand side of one stationary solve.

    Immutable once built; the composed constrained matrix and its LU
    factorization are cached on first use.
    """

    def __init__(self, disc, dt, coeffs, A_f, A_s, C_f, rhs_full, d_coefs):
        self.disc = disc
        self.dt = dt
        self.coeffs = coeffs
        self.A_f = A_f
        self.A_s = A_s
        self.C_f = C_f
        self.C_s = disc.C_s
        self.B_div = disc.B_div
        self.rhs = rhs_full
        self.d_coefs = d_coefs
        self._matrix = None
        self._factor = None

    def matrix(self):
        """Monolithic CSR matrix with wall constraints eliminated."""
        if self._matrix is None:
            d = self.disc
            mcol = sp.csr_matrix(d.mean_p[:, None])
            blocks = [
                [self.A_f, None, self.C_f.T, -self.B_div.T, None],
                [None, self.A_s, -self.C_s.T, None, None],
                [self.C_f, -self.C_s, None, None, None],
                [self.B_div, None, None, None, mcol],
                [None, None, None, mcol.T, None],
            ]
            mono = sp.bmat(blocks, format="csr")
            mask = np.ones(d.n_total)
            mask[d.constrained_dofs] = 0.0
            D = sp.diags(mask)
            self._matrix = (D @ mono @ D
                            + sp.diags(1.0 - mask)).tocsc()
            self._mono_mask = mask
        return self._matrix

    def factor(self):
        if self._factor is None:
            try:
                self._factor = spla.splu(self.matrix())
            except RuntimeError as err:
                raise SingularSystem(str(err)) from err
        return self._factor

    def constrained_rhs(self, rhs=None):
        """Right-hand side matching the eliminated matrix."""
        d = self.disc
        self.matrix()
        rhs = self.rhs if rhs is None else rhs
        x_bc = np.zeros(d.n_total)
        x_bc[d.constrained_dofs] = d.constrained_vals
        out = self._mono_mask * rhs
        if d.constrained_dofs.size:
            mono_cols = (self.matrix() @ x_bc)
            out = self._mono_mask * (rhs - mono_cols)
        out[d.constrained_dofs] = d.constrained_vals
        return out


class SaddleSolution:
    """Solved unknowns plus recomputed residual diagnostics."""

    def __init__(self, disc, x, residuals):
        self.u = DiscreteField(disc.v_space, x[disc.slc_u].copy())
        self.p = DiscreteField(disc.p_space, x[disc.slc_p].copy())
        self.X = DiscreteField(disc.S_space, x[disc.slc_X].copy())
        self.lam = DiscreteField(disc.L_space, x[disc.slc_lam].copy())
        self.xi = float(x[disc.idx_xi])
        self.residuals = residuals
        self.vector = x


def build_system(disc, dt, u_bar=None, X_bar=None, rhs=(None, None, None),
                 coeffs=None):
    """Assemble the step system from lagged data and load fields.

    ``coeffs`` overrides the backward-Euler coefficient mapping
    (alpha, beta, gamma); the right-hand side triple (f, g, d) is given
    as coefficient fields in the velocity/solid spaces, each optional.
    The coupling block is rebuilt from the lagged deformation, which
    must map the solid into the container.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if X_bar is None:
        raise ValueError("the lagged deformation X_bar is required")
    alpha, beta, gamma = coeffs if coeffs is not None else disc.be_coefficients(dt)

    A_f = (alpha * disc.M_u + disc.A_visc).tocsr()
    if u_bar is not None:
        ub = coefs(u_bar)
        if np.any(ub):
            A_f = A_f + assemble_convection(ub, disc.v_space,
                                            rho_f=disc.params.rho_f)
    A_s = (gamma * disc.K_s + (beta * disc.M_s if beta != 0.0 else 0.0))
    A_s = sp.csr_matrix(A_s)
    C_f = disc.coupler.assemble(X_bar)

    f, g, d = rhs
    full = np.zeros(disc.n_total)
    if f is not None:
        full[disc.slc_u] = disc.M_u @ coefs(f)
    if g is not None:
        full[disc.slc_X] = disc.M_s @ coefs(g)
    d_coefs = np.zeros(disc.n_X) if d is None else coefs(d).copy()
    full[disc.slc_lam] = disc.C_s @ d_coefs
    return BlockSystem(disc, dt, (alpha, beta, gamma), A_f, A_s, C_f,
                       full, d_coefs)


def solve(system, rhs_vector=None):
    """Direct solve with recomputed residual diagnostics.

    An explicit ``rhs_vector`` (already in constrained form, as produced
    by ``apply_operator``) bypasses the stored right-hand side; this is
    how manufactured round-trip tests drive the solver.
    """
    disc = system.disc
    b = (system.constrained_rhs() if rhs_vector is None
         else np.asarray(rhs_vector, dtype=float))
    x = system.factor().solve(b)
    if not np.all(np.isfinite(x)):
        raise SingularSystem("factorization produced non-finite values; "
                             "check space compatibility and the solid position")

    A = system.matrix()
    r = A @ x - b
    absA = sp.csc_matrix((np.abs(A.data), A.indices, A.indptr), shape=A.shape)
    scale = max(float(np.linalg.norm(b)),
                float(np.linalg.norm(absA @ np.abs(x))), 1e-300)
    alg_rel = float(np.linalg.norm(r)) / scale

    u = x[disc.slc_u]
    X = x[disc.slc_X]
    p = x[disc.slc_p]
    div = system.B_div @ u
    absB = sp.csr_matrix((np.abs(system.B_div.data), system.B_div.indices,
                          system.B_div.indptr), shape=system.B_div.shape)
    div_scale = max(float((absB @ np.abs(u)).max()) if disc.n_p else 0.0, 1e-300)
    residuals = {
        "algebraic_rel": alg_rel,
        "divergence": float(np.abs(div).max()) if div.size else 0.0,
        "divergence_rel": float(np.abs(div).max()) / div_scale,
        "constraint": constraint_residual(system.C_f, system.C_s, u, X,
                                          system.d_coefs),
        "constraint_rel": constraint_residual_relative(
            system.C_f, system.C_s, u, X, system.d_coefs),
        "pressure_mean": float(disc.mean_p @ p),
    }
    return SaddleSolution(disc, x, residuals)


def apply_operator(system, vec):
    """Blockwise action of the constrained monolithic operator."""
    disc = system.disc
    x = np.asarray(vec, dtype=float).copy()
    if x.shape != (disc.n_total,):
        raise ValueError("vector length does not match the system")
    bc = disc.constrained_dofs
    saved = x[bc].copy()
    x[bc] = 0.0
    u, X = x[disc.slc_u], x[disc.slc_X]
    lam, p = x[disc.slc_lam], x[disc.slc_p]
    xi = x[disc.idx_xi]
    y = np.empty_like(x)
    y[disc.slc_u] = (system.A_f @ u + system.C_f.T @ lam
                     - system.B_div.T @ p)
    y[disc.slc_X] = system.A_s @ X - system.C_s.T @ lam
    y[disc.slc_lam] = system.C_f @ u - system.C_s @ X
    y[disc.slc_p] = system.B_div @ u + disc.mean_p * xi
    y[disc.idx_xi] = disc.mean_p @ p
    y[bc] = saved
    return y
