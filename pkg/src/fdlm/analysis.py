"""Numerical estimation of the discrete stability constants and
convergence-rate studies.

The multiplier-side compatibility constant is obtained from the
generalized eigenvalue problem

    (C K_S^{-1} C') w = zeta^2 M w,

where C is the pairing matrix between the multiplier space and the
solid space, K_S the H1 Gram of the solid space, and M the norm matrix
of the multiplier space: the H1 Gram when the multiplier space carries
the H1 product (in which case nested spaces give exactly zeta = 1), or
the same Schur matrix C K_S^{-1} C' for the dual-norm realization, in
which case the estimate degenerates to a full-rank check of the
pairing.

The velocity/pressure inf-sup constant is the smallest nonzero
generalized singular value of the divergence block in the H1 x L2
norms with the constant pressure mode deflated, and kernel coercivity
is the smallest Rayleigh quotient of the leading diagonal blocks over
an explicitly computed basis of the divergence-free, constraint-
satisfying subspace.

Rate studies: a manufactured smooth stationary solution drives the
spatial study (optimal rates in h), and a fine-step reference solution
drives the temporal study (rates in dt per scheme). All eigenvalue
work is dense and guarded to desk-scale problems.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import mesh as msh
from .fespace import (interpolate, make_lagrange_space, make_solid_spaces,
                      triangle_rule)
from .forms import (C1_L2, C2_H1, PhysParams, _basis_data,
                    assemble_divergence, assemble_lambda_product, h1_gram,
                    mass_matrix, mean_vector, mixed_mass_nested, scalar_mass)
from .saddle import Discretization, build_system, solve
from .timestep import SchemeConfig, initialize, advance

DENSE_LIMIT = 4000


@dataclass
class InfSupReport:
    constant: float
    mesh_sizes: tuple
    config: str
    eigen_residual: float


@dataclass
class RateTable:
    """Rows of (parameter, errors) with rates between halved levels."""

    param_name: str = "h"
    params: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)

    def add_row(self, param, **errs):
        self.params.append(float(param))
        for name, val in errs.items():
            self.errors.setdefault(name, []).append(float(val))

    def rates(self, name):
        errs = self.errors[name]
        out = [None]
        for k in range(1, len(errs)):
            ratio = self.params[k - 1] / self.params[k]
            if errs[k] > 0 and errs[k - 1] > 0 and ratio > 1:
                out.append(float(np.log(errs[k - 1] / errs[k])
                                 / np.log(ratio)))
            else:
                out.append(None)
        return out

    def to_csv(self, path, names=None):
        names = list(self.errors) if names is None else list(names)
        with open(path, "w") as fh:
            cols = [self.param_name]
            for n in names:
                cols += [n, f"rate_{n}"]
            fh.write(",".join(cols) + "\n")
            all_rates = {n: self.rates(n) for n in names}
            for k, p in enumerate(self.params):
                row = [f"{p:.16e}"]
                for n in names:
                    row.append(f"{self.errors[n][k]:.16e}")
                    r = all_rates[n][k]
                    row.append("" if r is None else f"{r:.16e}")
                fh.write(",".join(row) + "\n")

    def to_text(self, names=None):
        names = list(self.errors) if names is None else list(names)
        lines = []
        head = f"{self.param_name:>12s}"
        for n in names:
            head += f" {n:>14s} {'rate':>7s}"
        lines.append(head)
        all_rates = {n: self.rates(n) for n in names}
        for k, p in enumerate(self.params):
            line = f"{p:12.6g}"
            for n in names:
                r = all_rates[n][k]
                line += f" {self.errors[n][k]:14.6e}"
                line += "        " if r is None else f" {r:7.2f}"
            lines.append(line)
        return "\n".join(lines)


def _dense(mat):
    return np.asarray(mat.todense()) if hasattr(mat, "todense") else np.asarray(mat)


def _guard(n, label):
    if n > DENSE_LIMIT:
        raise ValueError(f"{label}: {n} dofs exceeds the dense-analysis "
                         f"limit {DENSE_LIMIT}")


def _gen_eig_residual(A, M, lam, w):
    r = A @ w - lam * (M @ w)
    scale = max(np.linalg.norm(A @ w), abs(lam) * np.linalg.norm(M @ w), 1e-300)
    return float(np.linalg.norm(r) / scale)


def estimate_zeta(lambda_space, S_space, form=C2_H1):
    """Compatibility constant of the multiplier/solid pairing.

    With the H1 pairing and a multiplier space nested in the solid
    space the constant is exactly one; the dual-norm setting reduces to
    a rank check (one when the pairing has full row rank, zero when the
    necessary dimension condition fails).
    """
    _guard(lambda_space.n_dofs + S_space.n_dofs, "estimate_zeta")
    C = _dense(assemble_lambda_product(lambda_space, S_space, form))
    K_S = _dense(h1_gram(S_space))
    schur = C @ scipy.linalg.solve(K_S, C.T, assume_a="pos")
    schur = 0.5 * (schur + schur.T)
    if form == C2_H1:
        M = _dense(h1_gram(lambda_space))
    elif form == C1_L2:
        M = schur
    else:
        raise ValueError(f"unknown form {form!r}")
    try:
        vals, vecs = scipy.linalg.eigh(schur, M)
    except scipy.linalg.LinAlgError:
        return InfSupReport(0.0, (lambda_space.mesh.max_diameter(),),
                            f"{form} rank-deficient", np.inf)
    k = int(np.argmin(vals))
    zeta = float(np.sqrt(max(vals[k], 0.0)))
    res = _gen_eig_residual(schur, M, vals[k], vecs[:, k])
    return InfSupReport(zeta, (lambda_space.mesh.max_diameter(),),
                        f"lambda deg {lambda_space.family} / solid "
                        f"{S_space.family}, {form}", res)


def estimate_stokes_infsup(v_space, q_space):
    """Divergence inf-sup constant in the H1 x L2 norms.

    The sup runs over the constrained velocity space; the constant
    pressure mode is deflated exactly through a Householder basis of
    its orthogonal complement, so the smallest remaining eigenvalue is
    the squared inf-sup constant.
    """
    free = v_space.free_mask
    _guard(int(free.sum()) + q_space.n_dofs, "estimate_stokes_infsup")
    K = _dense(h1_gram(v_space))[np.ix_(free, free)]
    B = _dense(assemble_divergence(v_space, q_space))[:, free]
    M_p = _dense(scalar_mass(q_space))
    A = B @ scipy.linalg.solve(K, B.T, assume_a="pos")
    A = 0.5 * (A + A.T)

    m = mean_vector(q_space)
    v = m.copy()
    v[0] += np.sign(m[0] if m[0] != 0 else 1.0) * np.linalg.norm(m)
    H = np.eye(len(m)) - 2.0 * np.outer(v, v) / (v @ v)
    Z = H[:, 1:]
    A_z = Z.T @ A @ Z
    M_z = Z.T @ M_p @ Z
    vals, vecs = scipy.linalg.eigh(0.5 * (A_z + A_z.T), 0.5 * (M_z + M_z.T))
    k = int(np.argmin(vals))
    gamma = float(np.sqrt(max(vals[k], 0.0)))
    res = _gen_eig_residual(A_z, M_z, vals[k], vecs[:, k])
    return InfSupReport(gamma, (v_space.mesh.max_diameter(),),
                        f"{v_space.variant}/{q_space.variant}", res)


def kernel_coercivity(system, beta=None):
    """Smallest Rayleigh quotient of diag(A_f, A_s) over the discrete
    kernel (divergence-free velocities coupled to matching solid
    motions), measured in the product H1 norm.

    ``beta`` optionally rebuilds the solid block with a different mass
    weight at the stiffness weight already in the system.
    """
    disc = system.disc
    free = disc.v_space.free_mask
    n_uf = int(free.sum())
    _guard(n_uf + disc.n_X, "kernel_coercivity")

    A_f = system.A_f
    A_f = 0.5 * (_dense(A_f) + _dense(A_f).T)[np.ix_(free, free)]
    if beta is None:
        A_s = _dense(system.A_s)
    else:
        gamma = system.coeffs[2]
        A_s = beta * _dense(disc.M_s) + gamma * _dense(disc.K_s)
    B = _dense(system.B_div)[:, free]
    C_f = _dense(system.C_f)[:, free]
    C_s = _dense(system.C_s)
    G = np.block([[B, np.zeros((B.shape[0], disc.n_X))], [C_f, -C_s]])
    N = scipy.linalg.null_space(G)
    if N.shape[1] == 0:
        return 0.0
    top = scipy.linalg.block_diag(A_f, A_s)
    bot = scipy.linalg.block_diag(_dense(disc.G_u)[np.ix_(free, free)],
                                  _dense(disc.G_X))
    top_z = N.T @ top @ N
    bot_z = N.T @ bot @ N
    vals = scipy.linalg.eigh(0.5 * (top_z + top_z.T),
                             0.5 * (bot_z + bot_z.T), eigvals_only=True)
    return float(vals.min())


def projection_stability(S_space):
    """H1-stability constant of the L2 projection onto the space,
    measured against functions from the once-refined space."""
    fine_mesh = msh.refine_uniform(S_space.mesh)
    fine, _ = make_solid_spaces(fine_mesh, 1, 1)
    _guard(S_space.n_dofs + fine.n_dofs, "projection_stability")
    M_cf = _dense(mixed_mass_nested(S_space, fine))
    M_S = _dense(mass_matrix(S_space))
    P = scipy.linalg.solve(M_S, M_cf, assume_a="pos")
    K_S = _dense(h1_gram(S_space))
    K_F = _dense(h1_gram(fine))
    A = P.T @ K_S @ P
    vals = scipy.linalg.eigh(0.5 * (A + A.T), K_F, eigvals_only=True)
    return float(np.sqrt(max(vals.max(), 0.0)))


# ---------------------------------------------------------------------------
# manufactured stationary solution


def _mk(fn):
    """Wrap a closed-form field of two variables for batched points."""
    return lambda pts: fn(pts[:, 0], pts[:, 1])


def manufactured_solution():
    """Smooth stationary fields used for the spatial rate study.

    The velocity is the curl of sin^2(pi x) sin^2(pi y) / pi, hence
    exactly divergence free and vanishing on the boundary of the unit
    square; the pressure has zero mean; the deformation and multiplier
    are generic smooth fields on the quarter-annulus reference domain.
    """
    pi = np.pi
    sin, cos = np.sin, np.cos

    def u(x, y):
        return np.column_stack([sin(pi * x) ** 2 * sin(2 * pi * y),
                                -sin(2 * pi * x) * sin(pi * y) ** 2])

    def grad_u(x, y):
        g = np.empty((len(x), 2, 2))
        g[:, 0, 0] = pi * sin(2 * pi * x) * sin(2 * pi * y)
        g[:, 0, 1] = 2 * pi * sin(pi * x) ** 2 * cos(2 * pi * y)
        g[:, 1, 0] = -2 * pi * cos(2 * pi * x) * sin(pi * y) ** 2
        g[:, 1, 1] = -pi * sin(2 * pi * x) * sin(2 * pi * y)
        return g

    def p(x, y):
        return cos(pi * x) * cos(pi * y)

    def X(x, y):
        return np.column_stack([x + 0.05 * sin(x + 2 * y),
                                y + 0.05 * cos(2 * x - y)])

    def grad_X(x, y):
        g = np.empty((len(x), 2, 2))
        g[:, 0, 0] = 1 + 0.05 * cos(x + 2 * y)
        g[:, 0, 1] = 0.10 * cos(x + 2 * y)
        g[:, 1, 0] = -0.10 * sin(2 * x - y)
        g[:, 1, 1] = 1 + 0.05 * sin(2 * x - y)
        return g

    def lam(x, y):
        return np.column_stack([cos(x + y), sin(x - y)])

    def grad_lam(x, y):
        g = np.empty((len(x), 2, 2))
        g[:, 0, 0] = -sin(x + y)
        g[:, 0, 1] = -sin(x + y)
        g[:, 1, 0] = cos(x - y)
        g[:, 1, 1] = -cos(x - y)
        return g

    return {"u": _mk(u), "grad_u": _mk(grad_u), "p": _mk(p),
            "X": _mk(X), "grad_X": _mk(grad_X),
            "lam": _mk(lam), "grad_lam": _mk(grad_lam)}


def volume_functional(space, value_fn=None, stress_fn=None, quad_degree=6):
    """Dual vector of integral(value . phi + stress : grad phi) over the
    space's mesh for a vector-valued space."""
    if space.components != 2:
        raise ValueError("volume_functional expects a vector space")
    quad = triangle_rule(quad_degree)
    vals, grads, areas = _basis_data(space, quad)
    pts = np.einsum("qi,tid->tqd", quad.points, space.mesh.tri_coords())
    flat = pts.reshape(-1, 2)
    T, nq = pts.shape[:2]
    contrib = 0.0
    if value_fn is not None:
        v = np.asarray(value_fn(flat)).reshape(T, nq, 2)
        contrib = contrib + np.einsum("q,t,tqc,qa->tac", quad.weights,
                                      areas, v, vals)
    if stress_fn is not None:
        s = np.asarray(stress_fn(flat)).reshape(T, nq, 2, 2)
        contrib = contrib + np.einsum("q,t,tqcd,tqad->tac", quad.weights,
                                      areas, s, grads)
    out = np.zeros(space.n_dofs)
    for c in range(2):
        np.add.at(out, 2 * space.elem_dofs + c, contrib[..., c])
    return out


def field_error(space, coefficients, fn, grad_fn=None, quad_degree=6):
    """(L2 error, H1 seminorm error) of a coefficient vector against a
    closed-form field, integrated element by element."""
    quad = triangle_rule(quad_degree)
    vals, grads, areas = _basis_data(space, quad)
    pts = np.einsum("qi,tid->tqd", quad.points, space.mesh.tri_coords())
    flat = pts.reshape(-1, 2)
    T, nq = pts.shape[:2]
    c = np.asarray(coefficients)
    keep = space.elem_dofs >= 0
    sd = np.maximum(space.elem_dofs, 0)
    if space.components == 1:
        loc = np.where(keep, c[sd], 0.0)
        vh = np.einsum("qa,ta->tq", vals, loc)
        ve = np.asarray(fn(flat)).reshape(T, nq)
        l2 = np.einsum("q,t,tq->", quad.weights, areas, (vh - ve) ** 2)
        h1 = 0.0
        if grad_fn is not None:
            gh = np.einsum("tqad,ta->tqd", grads, loc)
            ge = np.asarray(grad_fn(flat)).reshape(T, nq, 2)
            h1 = np.einsum("q,t,tqd->", quad.weights, areas, (gh - ge) ** 2)
        return float(np.sqrt(l2)), float(np.sqrt(h1))
    loc = np.empty(space.elem_dofs.shape + (2,))
    for comp in range(2):
        loc[..., comp] = np.where(keep, c[2 * sd + comp], 0.0)
    vh = np.einsum("qa,tac->tqc", vals, loc)
    ve = np.asarray(fn(flat)).reshape(T, nq, 2)
    l2 = np.einsum("q,t,tqc->", quad.weights, areas, (vh - ve) ** 2)
    h1 = 0.0
    if grad_fn is not None:
        gh = np.einsum("tqad,tac->tqcd", grads, loc)
        ge = np.asarray(grad_fn(flat)).reshape(T, nq, 2, 2)
        h1 = np.einsum("q,t,tqcd->", quad.weights, areas, (gh - ge) ** 2)
    return float(np.sqrt(l2)), float(np.sqrt(h1))


def solve_manufactured(disc, exact=None, alpha=1.0, beta=1.0, gamma=1.0):
    """Solve one stationary instance whose data is manufactured from
    smooth fields; the lagged deformation is the identity map.

    Returns (solution, errors dict with velocity H1, pressure L2,
    position H1 errors).
    """
    exact = exact or manufactured_solution()
    nu = disc.params.nu_f

    X_bar = interpolate(disc.S_space, lambda p: p)
    system = build_system(disc, dt=1.0, u_bar=None, X_bar=X_bar,
                          rhs=(None, None, None),
                          coeffs=(alpha, beta, gamma))

    def momentum_stress(pts):
        g = np.asarray(exact["grad_u"](pts))
        eps = 0.5 * (g + g.transpose(0, 2, 1))
        s = nu * eps
        pv = np.asarray(exact["p"](pts))
        s[:, 0, 0] -= pv
        s[:, 1, 1] -= pv
        return s

    r_u = volume_functional(disc.v_space,
                            lambda pts: alpha * np.asarray(exact["u"](pts)),
                            momentum_stress)
    grad_arg = exact["grad_lam"] if disc.coupling_form == C2_H1 else None
    r_u = r_u + disc.coupler.functional(X_bar, exact["lam"], grad_arg)

    def solid_value(pts):
        return (beta * np.asarray(exact["X"](pts))
                - np.asarray(exact["lam"](pts)))

    def solid_stress(pts):
        s = gamma * np.asarray(exact["grad_X"](pts))
        if disc.coupling_form == C2_H1:
            s = s - np.asarray(exact["grad_lam"](pts))
        return s

    r_X = volume_functional(disc.S_space, solid_value, solid_stress)

    def gap_value(pts):
        return np.asarray(exact["u"](pts)) - np.asarray(exact["X"](pts))

    def gap_stress(pts):
        return np.asarray(exact["grad_u"](pts)) - np.asarray(exact["grad_X"](pts))

    r_lam = volume_functional(
        disc.L_space, gap_value,
        gap_stress if disc.coupling_form == C2_H1 else None)

    rhs = np.zeros(disc.n_total)
    rhs[disc.slc_u] = r_u
    rhs[disc.slc_X] = r_X
    rhs[disc.slc_lam] = r_lam
    sol = solve(system, rhs_vector=system.constrained_rhs(rhs))

    ul2, uh1 = field_error(disc.v_space, sol.u.coefficients,
                           exact["u"], exact["grad_u"])
    pl2, _ = field_error(disc.p_space, sol.p.coefficients, exact["p"])
    xl2, xh1 = field_error(disc.S_space, sol.X.coefficients,
                           exact["X"], exact["grad_X"])
    errors = {"velocity_h1": float(np.hypot(ul2, uh1)),
              "pressure_l2": pl2,
              "position_h1": float(np.hypot(xl2, xh1))}
    return sol, errors


def _spatial_setup(level, base_cells, params, element_pair, coupling_form):
    fluid = msh.build_square_mesh(base_cells * 2 ** level, (0.0, 1.0))
    solid = msh.build_quarter_annulus_mesh(2, 5, 0.3, 0.5)
    for _ in range(level):
        solid = msh.refine_uniform(solid)
    return Discretization(fluid, solid, params, element_pair=element_pair,
                          coupling_form=coupling_form)


def spatial_convergence(levels=4, base_cells=4, element_pair="p1isop2_bp",
                        coupling_form=C2_H1, params=None):
    """Rates of the manufactured stationary solve under uniform
    refinement of both meshes."""
    params = params or PhysParams(rho_f=1.0, delta_rho=0.0, nu_f=1.0,
                                  nu_s=1.0, kappa=1.0)
    exact = manufactured_solution()
    table = RateTable(param_name="h")
    for level in range(levels):
        disc = _spatial_setup(level, base_cells, params, element_pair,
                              coupling_form)
        _, errors = solve_manufactured(disc, exact)
        table.add_row(1.0 / (base_cells * 2 ** level), **errors)
    return table


def interpolation_rates(levels=4, base_cells=4):
    """Control study: errors of plain nodal interpolation of the
    manufactured velocity, the baseline the solver rates are judged
    against."""
    exact = manufactured_solution()
    table = RateTable(param_name="h")
    for level in range(levels):
        fluid = msh.build_square_mesh(base_cells * 2 ** level, (0.0, 1.0))
        refined = msh.refine_uniform(fluid)
        v = make_lagrange_space(refined, 1, components=2)
        ui = interpolate(v, exact["u"])
        l2, h1 = field_error(v, ui.coefficients, exact["u"], exact["grad_u"])
        table.add_row(1.0 / (base_cells * 2 ** level),
                      velocity_h1=float(np.hypot(l2, h1)))
    return table


# ---------------------------------------------------------------------------
# temporal rate study


def run_to_time(disc, params, scheme, dt, t_end, u0, X0, X1):
    cfg = SchemeConfig(scheme=scheme, dt=dt, t_end=t_end)
    state = initialize(disc, u0, X0, X1, cfg)
    for _ in range(int(round(t_end / dt))):
        state = advance(disc, state, params, cfg)
    return state


def temporal_convergence(disc, params, u0, X0, X1, dts,
                         schemes=("be_semi", "bdf2"), t_end=1.0,
                         ref_factor=8):
    """L2 errors at the final time against a fine-step BDF2 reference.

    All runs share the fixed spatial meshes, so the measured errors are
    purely temporal. Returns a table per scheme plus the reference
    time-step size.
    """
    dts = sorted(dts, reverse=True)
    dt_ref = min(dts) / ref_factor
    ref = run_to_time(disc, params, "bdf2", dt_ref, t_end, u0, X0, X1)
    tables = {}
    for scheme in schemes:
        table = RateTable(param_name="dt")
        for dt in dts:
            state = run_to_time(disc, params, scheme, dt, t_end, u0, X0, X1)
            table.add_row(dt,
                          velocity_l2=disc.norm_l2_u(state.u - ref.u),
                          position_l2=disc.norm_l2_X(state.X - ref.X))
        tables[scheme] = table
    return tables, dt_ref
