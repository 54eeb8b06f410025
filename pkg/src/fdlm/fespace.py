"""Finite element spaces, reference-element machinery, and fields.

Scalar Lagrange families P0, P1, P2 plus the composite pressure family
P1+P0 (continuous piecewise linears enriched by piecewise constants)
are described purely on the reference triangle through barycentric
coordinates; vector spaces interleave components, so the global index
of component c of scalar degree of freedom s is ``2 s + c``.

The velocity space can be built in two inf-sup stable variants: plain
quadratic Lagrange vectors on the given mesh, or linear vectors on the
once-refined mesh (the "P1-iso-P2" construction). The enriched pressure
family double-counts the global constant, so one piecewise-constant
degree of freedom (element 0) is dropped to restore full rank.

Dirichlet and symmetry conditions are stored as prescribed values on
constrained degrees of freedom and enforced later by row/column
elimination with right-hand-side correction, which keeps the discrete
energy identities exact.
"""

import numpy as np

from . import mesh as msh

P0, P1, P2, P1P0 = "P0", "P1", "P2", "P1+P0"


class QuadRule:
    """Symmetric triangle quadrature in barycentric coordinates.

    Weights are normalized to sum to one, so an integral over a triangle
    of area A is A times the weighted sum of point values.
    """

    def __init__(self, degree, points, weights):
        self.degree = degree
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)

    @property
    def n_points(self):
        return len(self.weights)


def _perm3(a, b, c):
    return [(a, b, c), (c, a, b), (b, c, a)]


def triangle_rule(degree):
    """Smallest shipped rule exact for polynomials of the given degree."""
    if degree <= 1:
        return QuadRule(1, [(1 / 3, 1 / 3, 1 / 3)], [1.0])
    if degree <= 2:
        return QuadRule(2, _perm3(0.5, 0.5, 0.0), [1 / 3] * 3)
    if degree <= 4:
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts = _perm3(1 - 2 * a1, a1, a1) + _perm3(1 - 2 * a2, a2, a2)
        return QuadRule(4, pts, [w1] * 3 + [w2] * 3)
    if degree <= 6:
        a1, w1 = 0.063089014491502, 0.050844906370207
        a2, w2 = 0.249286745170910, 0.116786275726379
        b, c, w3 = 0.636502499121399, 0.310352451033785, 0.082851075618374
        pts = (_perm3(1 - 2 * a1, a1, a1) + _perm3(1 - 2 * a2, a2, a2)
               + _perm3(b, c, 1 - b - c) + _perm3(c, b, 1 - b - c))
        w = [w1] * 3 + [w2] * 3 + [w3] * 6
        return QuadRule(6, pts, w)
    raise ValueError(f"no rule of degree {degree} available")


def shape_values(family, bary):
    """Basis values at barycentric points; shape (n_pts, n_local)."""
    lam = np.atleast_2d(np.asarray(bary, dtype=float))
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    if family == P1:
        return lam.copy()
    if family == P2:
        return np.column_stack([
            l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
        ])
    if family == P0:
        return np.ones((len(lam), 1))
    if family == P1P0:
        return np.column_stack([l0, l1, l2, np.ones(len(lam))])
    raise ValueError(f"unknown family {family}")


def shape_grad_coeffs(family, bary):
    """d(basis)/d(lambda_i) at barycentric points; shape (n_pts, n_local, 3).

    Physical gradients follow as sums of these coefficients times the
    per-element gradients of the barycentric coordinates.
    """
    lam = np.atleast_2d(np.asarray(bary, dtype=float))
    n = len(lam)
    if family == P1:
        return np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if family == P2:
        g = np.zeros((n, 6, 3))
        for i in range(3):
            g[:, i, i] = 4 * lam[:, i] - 1
        pairs = [(3, 0, 1), (4, 1, 2), (5, 2, 0)]
        for a, i, j in pairs:
            g[:, a, i] = 4 * lam[:, j]
            g[:, a, j] = 4 * lam[:, i]
        return g
    if family == P0:
        return np.zeros((n, 1, 3))
    if family == P1P0:
        g = np.zeros((n, 4, 3))
        g[:, :3, :] = np.eye(3)
        return g
    raise ValueError(f"unknown family {family}")


def n_local(family):
    return {P0: 1, P1: 3, P2: 6, P1P0: 4}[family]


class FeSpace:
    """A finite element space over a fixed mesh.

    Attributes
    ----------
    mesh : the mesh carrying the degrees of freedom
    family : one of P0, P1, P2, P1+P0
    components : 1 for scalar fields, 2 for vector fields
    elem_dofs : (T, n_local) scalar dof indices per element; -1 marks a
        dropped (rank-fix) slot
    n_scalar, n_dofs : scalar dof count and total (component-expanded)
    constrained : dict mapping global dof -> prescribed value
    variant : descriptive label of how the space was built
    coarse_mesh : for spaces living on a refined mesh, the parent mesh
    """

    def __init__(self, mesh, family, components, elem_dofs, n_scalar,
                 constrained=None, variant="", coarse_mesh=None):
        self.mesh = mesh
        self.family = family
        self.components = components
        self.elem_dofs = np.asarray(elem_dofs, dtype=np.intp)
        self.n_scalar = int(n_scalar)
        self.n_dofs = components * self.n_scalar
        self.constrained = dict(constrained or {})
        self.variant = variant
        self.coarse_mesh = coarse_mesh

    @property
    def constrained_idx(self):
        return np.array(sorted(self.constrained), dtype=np.intp)

    @property
    def free_mask(self):
        mask = np.ones(self.n_dofs, dtype=bool)
        if self.constrained:
            mask[self.constrained_idx] = False
        return mask

    def zeros(self):
        return np.zeros(self.n_dofs)


def _lagrange_space(mesh, degree, components, variant="", coarse_mesh=None):
    if degree == 1:
        return FeSpace(mesh, P1, components, mesh.tris, mesh.n_nodes,
                       variant=variant, coarse_mesh=coarse_mesh)
    if degree == 2:
        edges, tri_edges = mesh.edges()
        elem = np.hstack([mesh.tris, mesh.n_nodes + tri_edges])
        return FeSpace(mesh, P2, components, elem, mesh.n_nodes + len(edges),
                       variant=variant, coarse_mesh=coarse_mesh)
    raise ValueError("only degrees 1 and 2 are supported")


def make_lagrange_space(mesh, degree, components=1, variant=""):
    """Unconstrained scalar/vector Lagrange space of degree 1 or 2."""
    return _lagrange_space(mesh, degree, components, variant=variant)


def _edge_dof_lookup(space):
    """Map a sorted node pair to its P2 edge scalar dof on space.mesh."""
    edges, _ = space.mesh.edges()
    return {(int(i), int(j)): space.mesh.n_nodes + k
            for k, (i, j) in enumerate(edges)}


def _apply_wall_conditions(space):
    """Constrain boundary dofs per edge tag: walls pin both components,
    symmetry lines pin only the normal component."""
    comp_of_tag = {msh.OUTER_WALL: (0, 1), msh.SYMMETRY_X: (0,),
                   msh.SYMMETRY_Y: (1,), msh.FREE: ()}
    edge_dofs = _edge_dof_lookup(space) if space.family == P2 else None
    for i, j, tag in space.mesh.boundary_edges:
        scalar_dofs = [int(i), int(j)]
        if edge_dofs is not None:
            scalar_dofs.append(edge_dofs[(min(int(i), int(j)),
                                          max(int(i), int(j)))])
        for comp in comp_of_tag[int(tag)]:
            for s in scalar_dofs:
                space.constrained[2 * s + comp] = 0.0


def make_velocity_space(fluid_mesh, variant="P1isoP2"):
    """Vector velocity space with wall/symmetry constraints attached.

    'P1isoP2' places linear vectors on the once-refined mesh and keeps a
    reference to the coarse mesh for pairing with the pressure space;
    'TaylorHoodP2' places quadratic vectors on the given mesh. The plain
    'P1' variant is deliberately not inf-sup stable against equal-order
    pressures and exists as a negative control for the stability
    estimators.
    """
    if variant == "P1isoP2":
        refined = msh.refine_uniform(fluid_mesh)
        space = _lagrange_space(refined, 1, 2, variant=variant,
                                coarse_mesh=fluid_mesh)
    elif variant == "TaylorHoodP2":
        space = _lagrange_space(fluid_mesh, 2, 2, variant=variant)
    elif variant == "P1":
        space = _lagrange_space(fluid_mesh, 1, 2, variant=variant)
    else:
        raise ValueError(f"unknown velocity variant {variant!r}")
    _apply_wall_conditions(space)
    return space


def make_pressure_space(fluid_mesh, variant="BPenhanced"):
    """Scalar pressure space on the coarse mesh.

    'BPenhanced' is continuous P1 plus one constant per element with the
    element-0 constant dropped, since the sum double-counts the global
    constant. The zero-mean condition is handled at the solver level.
    """
    if variant == "P1":
        return _lagrange_space(fluid_mesh, 1, 1, variant=variant)
    if variant == "BPenhanced":
        n = fluid_mesh.n_nodes
        p0 = n - 1 + np.arange(fluid_mesh.n_tris, dtype=np.intp)
        p0[0] = -1  # dropped constant
        elem = np.hstack([fluid_mesh.tris, p0[:, None]])
        return FeSpace(fluid_mesh, P1P0, 1, elem,
                       n + fluid_mesh.n_tris - 1, variant=variant)
    raise ValueError(f"unknown pressure variant {variant!r}")


def make_solid_spaces(solid_mesh, deg_position=1, deg_multiplier=1):
    """Vector spaces for the solid deformation and the multiplier.

    Both live on the same reference mesh with no boundary constraints.
    The multiplier degree may not exceed the deformation degree: the
    pairing needs dim(position space) >= dim(multiplier space), and
    equal or lower degree keeps the multiplier space nested.
    """
    if deg_multiplier > deg_position:
        raise ValueError("multiplier degree must not exceed position degree")
    position = _lagrange_space(solid_mesh, deg_position, 2, variant="position")
    multiplier = _lagrange_space(solid_mesh, deg_multiplier, 2,
                                 variant="multiplier")
    return position, multiplier


class DiscreteField:
    """Coefficient vector attached to its space."""

    def __init__(self, space, coefficients=None):
        self.space = space
        if coefficients is None:
            coefficients = np.zeros(space.n_dofs)
        self.coefficients = np.asarray(coefficients, dtype=float)
        if self.coefficients.shape != (space.n_dofs,):
            raise ValueError("coefficient length does not match space")

    def copy(self):
        return DiscreteField(self.space, self.coefficients.copy())


def coefs(field_or_array):
    return (field_or_array.coefficients
            if isinstance(field_or_array, DiscreteField)
            else np.asarray(field_or_array, dtype=float))


def eval_on_element(space, coefficients, tri, bary):
    """Evaluate at barycentric points of a known element.

    ``bary`` has shape (n_pts, 3); returns (n_pts,) for scalar spaces and
    (n_pts, 2) for vector spaces.
    """
    vals = shape_values(space.family, bary)
    sd = space.elem_dofs[tri]
    keep = sd >= 0
    c = np.asarray(coefficients)
    if space.components == 1:
        loc = np.where(keep, c[np.maximum(sd, 0)], 0.0)
        return vals @ loc
    out = np.empty((len(vals), 2))
    for comp in range(2):
        loc = np.where(keep, c[2 * np.maximum(sd, 0) + comp], 0.0)
        out[:, comp] = vals @ loc
    return out


def eval_field(field, locator, point):
    """Point evaluation through a locator over the field's own mesh.

    Returns a float (scalar space) or a length-2 array; None signals the
    point is outside the mesh.
    """
    if locator.mesh is not field.space.mesh:
        raise ValueError("locator is not built over the field's mesh")
    hit = locator.locate(point)
    if hit is None:
        return None
    tri, bary = hit
    out = eval_on_element(field.space, field.coefficients, tri, bary[None, :])
    return float(out[0]) if field.space.components == 1 else out[0]


def dof_points(space):
    """Nodal coordinates per scalar dof (P1: vertices; P2: + midpoints)."""
    if space.family == P1:
        return space.mesh.nodes.copy()
    if space.family == P2:
        edges, _ = space.mesh.edges()
        mids = 0.5 * (space.mesh.nodes[edges[:, 0]] + space.mesh.nodes[edges[:, 1]])
        return np.vstack([space.mesh.nodes, mids])
    raise ValueError(f"no nodal coordinates for family {space.family}")


def interpolate(space, fn):
    """Nodal interpolation of a callable fn(points (n,2)) -> values.

    For the enriched pressure family only the continuous part is set.
    The callable must accept a batch of points and return (n,) for
    scalar spaces or (n, 2) for vector ones.
    """
    if space.family == P1P0:
        pts = space.mesh.nodes
        vals = np.asarray(fn(pts), dtype=float)
        out = np.zeros(space.n_dofs)
        out[:space.mesh.n_nodes] = vals
        return DiscreteField(space, out)
    pts = dof_points(space)
    vals = np.asarray(fn(pts), dtype=float)
    if space.components == 1:
        return DiscreteField(space, vals)
    out = np.empty(space.n_dofs)
    out[0::2] = vals[:, 0]
    out[1::2] = vals[:, 1]
    return DiscreteField(space, out)


def dump_field(field, name, path):
    """``field <name> ndofs <N>`` header plus one coefficient per line."""
    with open(path, "w") as fh:
        fh.write(f"field {name} ndofs {field.space.n_dofs}\n")
        for v in field.coefficients:
            fh.write(f"{v:.17g}\n")


def load_field(space, path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "field" or header[2] != "ndofs":
            raise ValueError(f"{path}: malformed field header")
        n = int(header[3])
        if n != space.n_dofs:
            raise ValueError(f"{path}: dof count {n} does not match space "
                             f"({space.n_dofs})")
        vals = np.array([float(fh.readline()) for _ in range(n)])
    return DiscreteField(space, vals), header[1]
