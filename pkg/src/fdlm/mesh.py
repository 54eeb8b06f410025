"""Fixed triangulations for the flow container and the immersed solid.

Two structured generators cover all geometries used here: a criss-cross
(alternating-diagonal) triangulation of a square container and a
polar-grid triangulation of a quarter annulus, the reference
configuration of a ring-shaped solid computed on a symmetric quadrant.
The meshes never move; the solid is tracked through a deformation field
living on its fixed reference mesh, so the only geometric query needed
at run time is locating points of one mesh inside the other, served by
``MeshLocator``.

Uniform (red) refinement keeps a child-to-parent map so that nested
spaces, such as a velocity space on the once-refined grid paired with a
pressure space on the coarse grid, can integrate against each other
exactly.
"""

import numpy as np

# boundary edge tags
OUTER_WALL = 0   # no-slip wall, both velocity components fixed
SYMMETRY_X = 1   # edge on a vertical symmetry line, normal component u_x fixed
SYMMETRY_Y = 2   # edge on a horizontal symmetry line, normal component u_y fixed
FREE = 3         # unconstrained (solid boundaries)

TAG_NAMES = {OUTER_WALL: "outer_wall", SYMMETRY_X: "symmetry_x",
             SYMMETRY_Y: "symmetry_y", FREE: "free"}
TAG_IDS = {v: k for k, v in TAG_NAMES.items()}

_BARY_TOL = 1e-12


class TriMesh:
    """Immutable 2D triangle mesh.

    Attributes
    ----------
    nodes : (N, 2) float array of vertex coordinates
    tris : (T, 3) int array, counterclockwise vertex indices
    boundary_edges : (B, 3) int array of rows (i, j, tag)
    parent : (T,) int array mapping each triangle to its parent in
        ``coarse``, present only on refined meshes (else None)
    coarse : the mesh this one was refined from, or None
    """

    def __init__(self, nodes, tris, boundary_edges, parent=None, coarse=None,
                 validate=True):
        self.nodes = np.ascontiguousarray(nodes, dtype=float)
        self.tris = np.ascontiguousarray(tris, dtype=np.intp)
        self.boundary_edges = np.ascontiguousarray(boundary_edges,
                                                   dtype=np.intp).reshape(-1, 3)
        self.parent = None if parent is None else np.asarray(parent, dtype=np.intp)
        self.coarse = coarse
        self._geom = None
        self._edges = None
        if validate:
            self.validate()

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_tris(self):
        return self.tris.shape[0]

    def tri_coords(self):
        """Vertex coordinates per triangle, shape (T, 3, 2)."""
        return self.nodes[self.tris]

    def signed_areas(self):
        p = self.tri_coords()
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self):
        return float(np.sum(self.signed_areas()))

    def max_diameter(self):
        p = self.tri_coords()
        e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return float(np.sqrt((e ** 2).sum(axis=2).max()))

    def geometry(self):
        """Per-element affine data: (areas, grad_lambda, inv_jac, p0).

        ``grad_lambda[t, i]`` is the constant physical gradient of the
        i-th barycentric coordinate on triangle t; ``inv_jac[t]`` maps
        (x - p0[t]) to the (lambda_1, lambda_2) pair.
        """
        if self._geom is None:
            p = self.tri_coords()
            areas = self.signed_areas()
            x, y = p[..., 0], p[..., 1]
            two_a = (2.0 * areas)[:, None]
            gl = np.empty((self.n_tris, 3, 2))
            # grad lambda_i = perp(p_{i+1} - p_{i+2}) / (2A), perp(v) = (-v_y, v_x)... in
            # components: grad lambda_0 = (y1 - y2, x2 - x1) / 2A, cyclic.
            gl[:, 0, 0] = y[:, 1] - y[:, 2]
            gl[:, 0, 1] = x[:, 2] - x[:, 1]
            gl[:, 1, 0] = y[:, 2] - y[:, 0]
            gl[:, 1, 1] = x[:, 0] - x[:, 2]
            gl[:, 2, 0] = y[:, 0] - y[:, 1]
            gl[:, 2, 1] = x[:, 1] - x[:, 0]
            gl /= two_a[..., None]
            # inverse of J = [p1-p0 | p2-p0], used for barycentric lookups
            inv = np.empty((self.n_tris, 2, 2))
            inv[:, 0, 0] = y[:, 2] - y[:, 0]
            inv[:, 0, 1] = x[:, 0] - x[:, 2]
            inv[:, 1, 0] = y[:, 0] - y[:, 1]
            inv[:, 1, 1] = x[:, 1] - x[:, 0]
            inv /= two_a[..., None]
            self._geom = (areas, gl, inv, p[:, 0].copy())
        return self._geom

    def edges(self):
        """Unique undirected edges and the per-triangle edge map.

        Returns (edges, tri_edges) with edges (E, 2) sorted node pairs and
        tri_edges (T, 3) in local order [(0,1), (1,2), (2,0)].
        """
        if self._edges is None:
            t = self.tris
            pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
            pairs = np.sort(pairs, axis=1)
            edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
            tri_edges = inverse.reshape(3, -1).T.copy()
            self._edges = (edges, tri_edges)
        return self._edges

    def validate(self):
        if self.tris.size and (self.tris.min() < 0 or
                               self.tris.max() >= self.n_nodes):
            raise ValueError("triangle node index out of range")
        areas = self.signed_areas()
        if np.any(areas <= 0.0):
            bad = int(np.argmin(areas))
            raise ValueError(f"triangle {bad} has nonpositive area {areas[bad]:g}")
        # each boundary edge must be an edge of exactly one triangle
        edges, _ = self.edges()
        counts = np.zeros(len(edges), dtype=int)
        t = self.tris
        pairs = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]),
                        axis=1)
        _, inv = np.unique(pairs, axis=0, return_inverse=True)
        np.add.at(counts, inv, 1)
        lone = {tuple(e) for e in edges[counts == 1]}
        for i, j, _tag in self.boundary_edges:
            if (min(i, j), max(i, j)) not in lone:
                raise ValueError(f"boundary edge ({i},{j}) not a lone mesh edge")


def build_square_mesh(n_cells, extent=(0.0, 1.0), side_tags=None):
    """Criss-cross triangulation of the square [a,b] x [a,b].

    Each of the n x n cells is split along a diagonal whose direction
    alternates checkerboard-fashion, which keeps the mesh shape regular
    and reproducible. ``side_tags`` maps any of 'left', 'right',
    'bottom', 'top' to a boundary tag; unspecified sides are tagged
    OUTER_WALL.
    """
    n = int(n_cells)
    if n < 1:
        raise ValueError("n_cells must be >= 1")
    a, b = map(float, extent)
    if not b > a:
        raise ValueError("extent must be increasing")
    tags = {"left": OUTER_WALL, "right": OUTER_WALL,
            "bottom": OUTER_WALL, "top": OUTER_WALL}
    if side_tags:
        unknown = set(side_tags) - set(tags)
        if unknown:
            raise ValueError(f"unknown sides {sorted(unknown)}")
        tags.update(side_tags)

    xs = np.linspace(a, b, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])
    nid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)

    tris = np.empty((2 * n * n, 3), dtype=np.intp)
    k = 0
    for i in range(n):
        for j in range(n):
            n00, n10 = nid[i, j], nid[i + 1, j]
            n01, n11 = nid[i, j + 1], nid[i + 1, j + 1]
            if (i + j) % 2 == 0:
                tris[k] = (n00, n10, n11)
                tris[k + 1] = (n00, n11, n01)
            else:
                tris[k] = (n00, n10, n01)
                tris[k + 1] = (n10, n11, n01)
            k += 2

    bedges = []
    for j in range(n):  # left (x = a) and right (x = b)
        bedges.append((nid[0, j], nid[0, j + 1], tags["left"]))
        bedges.append((nid[n, j], nid[n, j + 1], tags["right"]))
    for i in range(n):  # bottom (y = a) and top (y = b)
        bedges.append((nid[i, 0], nid[i + 1, 0], tags["bottom"]))
        bedges.append((nid[i, n], nid[i + 1, n], tags["top"]))
    return TriMesh(nodes, tris, np.array(bedges, dtype=np.intp))


def build_quarter_annulus_mesh(n_radial, n_angular, r_in, r_out):
    """Polar-grid triangulation of the first-quadrant quarter annulus.

    The circular arcs are approximated by straight edges; the geometric
    consistency error of the faceting is O(h^2). All boundary edges are
    tagged FREE: the solid boundary carries no kinematic constraint.
    """
    nr, na = int(n_radial), int(n_angular)
    if nr < 1 or na < 1:
        raise ValueError("subdivision counts must be >= 1")
    r_in, r_out = float(r_in), float(r_out)
    if not 0.0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")

    rs = np.linspace(r_in, r_out, nr + 1)
    ths = np.linspace(0.0, 0.5 * np.pi, na + 1)
    rr, tt = np.meshgrid(rs, ths, indexing="ij")
    nodes = np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])
    nid = np.arange((nr + 1) * (na + 1)).reshape(nr + 1, na + 1)

    tris = np.empty((2 * nr * na, 3), dtype=np.intp)
    k = 0
    for i in range(nr):
        for j in range(na):
            n00, n10 = nid[i, j], nid[i + 1, j]
            n01, n11 = nid[i, j + 1], nid[i + 1, j + 1]
            if (i + j) % 2 == 0:
                tris[k] = (n00, n10, n11)
                tris[k + 1] = (n00, n11, n01)
            else:
                tris[k] = (n00, n10, n01)
                tris[k + 1] = (n10, n11, n01)
            k += 2

    bedges = []
    for j in range(na):  # inner and outer arcs
        bedges.append((nid[0, j], nid[0, j + 1], FREE))
        bedges.append((nid[nr, j], nid[nr, j + 1], FREE))
    for i in range(nr):  # straight sides on the two axes
        bedges.append((nid[i, 0], nid[i + 1, 0], FREE))
        bedges.append((nid[i, na], nid[i + 1, na], FREE))
    return TriMesh(nodes, tris, np.array(bedges, dtype=np.intp))


def refine_uniform(mesh):
    """Split every triangle into four via edge midpoints.

    Child boundary edges inherit the parent tag, and the returned mesh
    records its parent triangle map so nested pairs of spaces can be
    integrated consistently.
    """
    edges, tri_edges = mesh.edges()
    mid = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    nodes = np.vstack([mesh.nodes, mid])
    off = mesh.n_nodes

    t = mesh.tris
    m01 = off + tri_edges[:, 0]
    m12 = off + tri_edges[:, 1]
    m20 = off + tri_edges[:, 2]
    children = np.empty((4 * mesh.n_tris, 3), dtype=np.intp)
    children[0::4] = np.column_stack([t[:, 0], m01, m20])
    children[1::4] = np.column_stack([t[:, 1], m12, m01])
    children[2::4] = np.column_stack([t[:, 2], m20, m12])
    children[3::4] = np.column_stack([m01, m12, m20])
    parent = np.repeat(np.arange(mesh.n_tris, dtype=np.intp), 4)

    # midpoint node of an edge (i, j) via lookup in the unique edge list
    edge_lookup = {(int(i), int(j)): off + k for k, (i, j) in enumerate(edges)}
    bedges = []
    for i, j, tag in mesh.boundary_edges:
        m = edge_lookup[(min(int(i), int(j)), max(int(i), int(j)))]
        bedges.append((i, m, tag))
        bedges.append((m, j, tag))
    return TriMesh(nodes, children, np.array(bedges, dtype=np.intp),
                   parent=parent, coarse=mesh)


class MeshLocator:
    """Uniform background grid answering which triangle owns a point.

    Bin size equals the largest triangle diameter, so every triangle
    overlaps a handful of bins. Points within 1e-12 of an edge are
    assigned deterministically to the candidate triangle of lowest
    index.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        p = mesh.tri_coords()
        lo = p.min(axis=(0, 1))
        hi = p.max(axis=(0, 1))
        size = max(mesh.max_diameter(), 1e-30)
        nb = np.maximum(1, np.ceil((hi - lo) / size).astype(int))
        self._lo, self._size, self._nb = lo, size, nb

        tmin = np.clip(((p.min(axis=1) - lo) / size).astype(int), 0, nb - 1)
        tmax = np.clip(((p.max(axis=1) - lo) / size).astype(int), 0, nb - 1)
        buckets = [[] for _ in range(int(nb[0] * nb[1]))]
        for t in range(mesh.n_tris):
            for bx in range(tmin[t, 0], tmax[t, 0] + 1):
                for by in range(tmin[t, 1], tmax[t, 1] + 1):
                    buckets[bx * nb[1] + by].append(t)
        # triangle indices appended in ascending order: first match below is
        # automatically the lowest-index owner
        self._buckets = [np.array(b, dtype=np.intp) for b in buckets]

    def _bin_ids(self, pts):
        ij = ((pts - self._lo) / self._size).astype(int)
        ij = np.clip(ij, 0, self._nb - 1)
        return ij[:, 0] * self._nb[1] + ij[:, 1]

    def locate_many(self, pts):
        """Vectorized lookup. Returns (tri, bary) with tri = -1 outside."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        npts = pts.shape[0]
        out_tri = np.full(npts, -1, dtype=np.intp)
        out_bary = np.zeros((npts, 3))
        _, _, inv, p0 = self.mesh.geometry()

        bids = self._bin_ids(pts)
        order = np.argsort(bids, kind="stable")
        sorted_bids = bids[order]
        cuts = np.flatnonzero(np.diff(sorted_bids)) + 1
        groups = np.split(order, cuts)
        for grp in groups:
            cand = self._buckets[int(bids[grp[0]])]
            if len(cand) == 0:
                continue
            x = pts[grp]                                   # (m, 2)
            v = x[None, :, :] - p0[cand][:, None, :]       # (c, m, 2)
            iv = inv[cand]                                 # (c, 2, 2)
            l1 = iv[:, None, 0, 0] * v[..., 0] + iv[:, None, 0, 1] * v[..., 1]
            l2 = iv[:, None, 1, 0] * v[..., 0] + iv[:, None, 1, 1] * v[..., 1]
            l0 = 1.0 - l1 - l2
            ok = (l0 >= -_BARY_TOL) & (l1 >= -_BARY_TOL) & (l2 >= -_BARY_TOL)
            hit = ok.any(axis=0)
            first = np.argmax(ok, axis=0)
            rows = np.arange(len(grp))
            sel = grp[hit]
            csel = cand[first[hit]]
            out_tri[sel] = csel
            out_bary[sel, 0] = l0[first[hit], rows[hit]]
            out_bary[sel, 1] = l1[first[hit], rows[hit]]
            out_bary[sel, 2] = l2[first[hit], rows[hit]]
        return out_tri, out_bary

    def locate(self, point):
        """Owning (triangle, barycentric) pair, or None if outside."""
        tri, bary = self.locate_many(np.asarray(point, dtype=float)[None, :])
        if tri[0] < 0:
            return None
        return int(tri[0]), bary[0]


def locate(locator, point):
    """Functional form of ``MeshLocator.locate``."""
    return locator.locate(point)


def dump_mesh(mesh, path):
    """Plain-text dump: ``nodes <N> tris <T>`` header, one node per line,
    one triangle per line, then one ``edge i j <tag>`` line per boundary
    edge (an extension the loader treats as optional)."""
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.n_nodes} tris {mesh.n_tris}\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g}\n")
        for i, j, k in mesh.tris:
            fh.write(f"{i} {j} {k}\n")
        for i, j, tag in mesh.boundary_edges:
            fh.write(f"edge {i} {j} {TAG_NAMES[int(tag)]}\n")


def load_mesh(path, default_tag=OUTER_WALL):
    """Read the ``dump_mesh`` format.

    Files without ``edge`` records get their boundary edges rebuilt
    topologically (edges on exactly one triangle) and tagged
    ``default_tag``; a trailing integer on a triangle line is accepted
    and ignored.
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4 or header[0] != "nodes" or header[2] != "tris":
            raise ValueError(f"{path}: malformed mesh header")
        n_nodes, n_tris = int(header[1]), int(header[3])
        nodes = np.empty((n_nodes, 2))
        for k in range(n_nodes):
            vals = fh.readline().split()
            nodes[k] = (float(vals[0]), float(vals[1]))
        tris = np.empty((n_tris, 3), dtype=np.intp)
        for k in range(n_tris):
            vals = fh.readline().split()
            tris[k] = (int(vals[0]), int(vals[1]), int(vals[2]))
        bedges = []
        for line in fh:
            vals = line.split()
            if not vals:
                continue
            if vals[0] != "edge":
                raise ValueError(f"{path}: unexpected record {vals[0]!r}")
            bedges.append((int(vals[1]), int(vals[2]), TAG_IDS[vals[3]]))
    if not bedges:
        mesh = TriMesh(nodes, tris, np.empty((0, 3), dtype=np.intp))
        edges, tri_edges = mesh.edges()
        counts = np.zeros(len(edges), dtype=int)
        np.add.at(counts, tri_edges.ravel(), 1)
        lone = edges[counts == 1]
        bedges = [(int(i), int(j), default_tag) for i, j in lone]
    return TriMesh(nodes, tris, np.array(bedges, dtype=np.intp))
