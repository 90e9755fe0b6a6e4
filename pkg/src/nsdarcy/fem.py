"""Finite element spaces and quadrature on two-domain meshes.

Discretization: continuous vector P2 velocity and P1 pressure on the fluid
subdomain (the velocity degree can be lowered to 1 for deliberately unstable
test configurations), continuous P1 head on the porous subdomain (degree 2
available as an option), and a vector P2 companion velocity space on the
porous subdomain that vanishes on the outer porous boundary and shares its
interface nodes with the fluid velocity.

Velocity/head Dirichlet constraints (gamma_f, gamma_pd, and the outer porous
boundary for the companion space) are removed from the algebraic systems, not
penalized; constrained nodes simply have no degree of freedom.
"""

import numpy as np

from .mesh import (FLUID, POROUS, GAMMA_F, GAMMA_PD, GAMMA_PN, _unique_edges)


class SpaceError(Exception):
    """Inconsistent discrete-space construction."""


class InterpolationError(Exception):
    """Data that the target space cannot represent (e.g. nonzero trace on a
    constrained boundary)."""


class SingularLinearSystem(Exception):
    """A linear system that cannot be solved reliably; carries defect info."""


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def _perm3(a):
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)]


def _perm6(a, b):
    c = 1.0 - a - b
    return [(c, a, b), (c, b, a), (a, c, b), (a, b, c), (b, c, a), (b, a, c)]


# symmetric rules on the reference triangle; (weight, barycentric point),
# weights normalized to sum to 1
_TRIANGLE_RULES = {
    1: [(1.0, (1 / 3, 1 / 3, 1 / 3))],
    2: [(1 / 3, p) for p in _perm3(1 / 6)],
    4: ([(0.223381589678011, p) for p in _perm3(0.445948490915965)]
        + [(0.109951743655322, p) for p in _perm3(0.091576213509771)]),
    6: ([(0.050844906370207, p) for p in _perm3(0.063089014491502)]
        + [(0.116786275726379, p) for p in _perm3(0.249286745170910)]
        + [(0.082851075618374, p) for p in _perm6(0.310352451033785, 0.053145049844816)]),
    9: ([(0.097135796282799, (1 / 3, 1 / 3, 1 / 3))]
        + [(0.031334700227139, p) for p in _perm3(0.489682519198738)]
        + [(0.077827541004774, p) for p in _perm3(0.437089591492937)]
        + [(0.079647738927210, p) for p in _perm3(0.188203535619033)]
        + [(0.025577675658698, p) for p in _perm3(0.044729513394453)]
        + [(0.043283539377289, p) for p in _perm6(0.221962989160766, 0.036838412054736)]),
}


class QuadratureRule:
    """Quadrature on the reference triangle or the reference edge [0, 1].

    Triangle rules store barycentric points and weights that sum to the
    reference measure 1/2, so an element integral is
    ``sum(w * f(x_q)) * |det J|``.  Edge rules store points in [0, 1] with
    weights summing to 1; an edge integral is ``sum(w * f(t_q)) * length``.
    """

    def __init__(self, degree, points, weights):
        self.degree = degree
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)

    @classmethod
    def triangle(cls, degree):
        """Smallest stored symmetric rule exact for polynomials of `degree`."""
        for d in sorted(_TRIANGLE_RULES):
            if d >= degree:
                data = _TRIANGLE_RULES[d]
                w = np.array([wi for wi, _ in data]) * 0.5
                pts = np.array([p for _, p in data])
                return cls(d, pts, w)
        raise ValueError(f"no stored triangle rule of degree >= {degree}")

    @classmethod
    def edge(cls, degree):
        """Gauss-Legendre rule on [0, 1] exact for polynomials of `degree`."""
        n = max(1, (degree + 2) // 2)
        x, w = np.polynomial.legendre.leggauss(n)
        return cls(2 * n - 1, 0.5 * (x + 1.0), 0.5 * w)


# ---------------------------------------------------------------------------
# reference bases
# ---------------------------------------------------------------------------

def shape_values(degree, bary):
    """Scalar shape functions at barycentric points; (nq, nloc).

    P2 local ordering: three vertices, then the midside nodes opposite
    vertex 0, 1, 2 (i.e. midpoints of edges 12, 20, 01).
    """
    bary = np.atleast_2d(bary)
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    if degree == 1:
        return np.stack([l0, l1, l2], axis=1)
    if degree == 2:
        return np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                         4 * l1 * l2, 4 * l2 * l0, 4 * l0 * l1], axis=1)
    raise ValueError(f"unsupported polynomial degree {degree}")


_DL = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # d(lambda)/d(xi, eta)


def shape_ref_grads(degree, bary):
    """Reference-coordinate shape gradients at barycentric points; (nq, nloc, 2)."""
    bary = np.atleast_2d(bary)
    nq = len(bary)
    if degree == 1:
        return np.broadcast_to(_DL, (nq, 3, 2)).copy()
    if degree == 2:
        l = bary
        g = np.empty((nq, 6, 2))
        for i in range(3):
            g[:, i] = (4 * l[:, i, None] - 1) * _DL[i]
        pairs = ((1, 2), (2, 0), (0, 1))
        for k, (i, j) in enumerate(pairs):
            g[:, 3 + k] = 4 * (l[:, j, None] * _DL[i] + l[:, i, None] * _DL[j])
        return g
    raise ValueError(f"unsupported polynomial degree {degree}")


def edge_shape_values(degree, t):
    """Trace shape functions on an edge, parametrized by t in [0, 1].

    Node order: the two endpoints, then (for degree 2) the midpoint.
    """
    t = np.atleast_1d(t)
    if degree == 1:
        return np.stack([1 - t, t], axis=1)
    if degree == 2:
        return np.stack([(1 - t) * (1 - 2 * t), t * (2 * t - 1), 4 * t * (1 - t)], axis=1)
    raise ValueError(f"unsupported polynomial degree {degree}")


# ---------------------------------------------------------------------------
# coupled space
# ---------------------------------------------------------------------------

class CoupledSpace:
    """Degree-of-freedom bookkeeping for the coupled discrete spaces.

    Blocks of the coupled system, in order: fluid velocity (two interleaved
    components per free node), fluid pressure (all fluid vertices; the
    zero-mean gauge is handled by the solver), porous head (free porous
    nodes).  The porous companion velocity space has its own numbering and is
    not part of the coupled block vector.

    Parameters
    ----------
    mesh : MixedMesh
    velocity_degree : 1 or 2
        Degree of the fluid and companion velocity spaces.  Degree 1 exists
        for deliberately unstable pairings in stability tests; the coupled
        solver requires degree 2.
    head_degree : 1 or 2
    """

    def __init__(self, mesh, velocity_degree=2, head_degree=1):
        if velocity_degree not in (1, 2):
            raise SpaceError("velocity_degree must be 1 or 2")
        if head_degree not in (1, 2):
            raise SpaceError("head_degree must be 1 or 2")
        self.mesh = mesh
        self.velocity_degree = velocity_degree
        self.head_degree = head_degree

        self.edges, self.tri_to_edge = _unique_edges(mesh.triangles)
        nv = mesh.num_vertices
        mids = 0.5 * (mesh.vertices[self.edges[:, 0]] + mesh.vertices[self.edges[:, 1]])
        self._coords = {1: mesh.vertices, 2: np.vstack([mesh.vertices, mids])}
        self._tri_nodes = {1: mesh.triangles,
                           2: np.column_stack([mesh.triangles, nv + self.tri_to_edge])}
        self._edge_index = {tuple(e): i for i, e in enumerate(self.edges)}

        self.fluid_tris = mesh.fluid_triangles()
        self.porous_tris = mesh.porous_triangles()

        bed = np.sort(mesh.boundary_edges, axis=1)
        btag = mesh.boundary_tags
        gamma_f_edges = bed[btag == GAMMA_F]
        gamma_pd_edges = bed[btag == GAMMA_PD]
        gamma_p_edges = bed[np.isin(btag, (GAMMA_PD, GAMMA_PN))]

        vd, hd = velocity_degree, head_degree
        fluid_nodes = np.unique(self._tri_nodes[vd][self.fluid_tris])
        porous_nodes_v = np.unique(self._tri_nodes[vd][self.porous_tris])
        porous_nodes_h = np.unique(self._tri_nodes[hd][self.porous_tris])

        on_gamma_f = self._nodes_on(gamma_f_edges, vd)
        on_gamma_p = self._nodes_on(gamma_p_edges, vd)
        on_gamma_pd_h = self._nodes_on(gamma_pd_edges, hd)

        # fluid velocity: 2 dofs per free fluid node, x at 2k, y at 2k+1
        self.u_node_dof = np.full(self.num_nodes(vd), -1, dtype=np.int64)
        free = fluid_nodes[~on_gamma_f[fluid_nodes]]
        self.u_node_dof[free] = 2 * np.arange(len(free))
        self.num_velocity_dofs = 2 * len(free)

        # pressure: P1 on all fluid vertices
        fluid_verts = np.unique(mesh.triangles[self.fluid_tris])
        self.p_vertex_dof = np.full(nv, -1, dtype=np.int64)
        self.p_vertex_dof[fluid_verts] = np.arange(len(fluid_verts))
        self.num_pressure_dofs = len(fluid_verts)

        # head: free porous nodes (gamma_pd removed)
        self.phi_node_dof = np.full(self.num_nodes(hd), -1, dtype=np.int64)
        free_h = porous_nodes_h[~on_gamma_pd_h[porous_nodes_h]]
        self.phi_node_dof[free_h] = np.arange(len(free_h))
        self.num_head_dofs = len(free_h)

        # companion velocity on the porous side: zero on gamma_pd+gamma_pn,
        # free on the interface
        self.aux_node_dof = np.full(self.num_nodes(vd), -1, dtype=np.int64)
        free_a = porous_nodes_v[~on_gamma_p[porous_nodes_v]]
        self.aux_node_dof[free_a] = 2 * np.arange(len(free_a))
        self.num_aux_dofs = 2 * len(free_a)

        # porous P1 vertices: multiplier space for the weak-divergence
        # constraint of the lifting
        porous_verts = np.unique(mesh.triangles[self.porous_tris])
        self.porous_vertex_row = np.full(nv, -1, dtype=np.int64)
        self.porous_vertex_row[porous_verts] = np.arange(len(porous_verts))
        self.num_porous_vertices = len(porous_verts)

        self.offset_u = 0
        self.offset_p = self.num_velocity_dofs
        self.offset_phi = self.offset_p + self.num_pressure_dofs
        self.num_total_dofs = self.offset_phi + self.num_head_dofs

        self._build_interface_data()
        self._cache = {}

    # -- bookkeeping -------------------------------------------------------

    def num_nodes(self, degree):
        return len(self._coords[degree])

    def node_coords(self, degree):
        return self._coords[degree]

    def tri_nodes(self, degree):
        return self._tri_nodes[degree]

    @property
    def pressure_space_dim(self):
        """Dimension of the zero-mean pressure space."""
        return self.num_pressure_dofs - 1

    def _nodes_on(self, edge_list, degree):
        marks = np.zeros(self.num_nodes(degree), dtype=bool)
        if len(edge_list):
            marks[np.asarray(edge_list).ravel()] = True
            if degree == 2:
                nv = self.mesh.num_vertices
                for a, b in edge_list:
                    marks[nv + self._edge_index[(a, b)]] = True
        return marks

    def _build_interface_data(self):
        mesh = self.mesh
        vd = self.velocity_degree
        nv = mesh.num_vertices
        nodes_per_edge = []
        for a, b in mesh.interface_edges:
            row = [a, b]
            if vd == 2:
                row.append(nv + self._edge_index[tuple(sorted((a, b)))])
            nodes_per_edge.append(row)
        self.iface_edge_nodes = np.array(nodes_per_edge, dtype=np.int64)
        if self.head_degree == 2:
            self.iface_edge_head_nodes = np.array(
                [[a, b, nv + self._edge_index[tuple(sorted((a, b)))]]
                 for a, b in mesh.interface_edges], dtype=np.int64)
        else:
            self.iface_edge_head_nodes = mesh.interface_edges
        self.iface_lengths = np.linalg.norm(
            mesh.vertices[mesh.interface_edges[:, 1]]
            - mesh.vertices[mesh.interface_edges[:, 0]], axis=1)
        self.iface_normals = mesh.interface_normals
        self.iface_tangents = np.column_stack(
            [-self.iface_normals[:, 1], self.iface_normals[:, 0]])

        self.interface_nodes = np.unique(self.iface_edge_nodes)
        self._iface_row = {int(n): i for i, n in enumerate(self.interface_nodes)}

        # alignment: every interface node must exist on both sides, and a node
        # constrained on one side must be constrained on the other
        coords = self.node_coords(vd)
        fluid_set = set(np.unique(self.tri_nodes(vd)[self.fluid_tris]).tolist())
        porous_set = set(np.unique(self.tri_nodes(vd)[self.porous_tris]).tolist())
        for n in self.interface_nodes:
            n = int(n)
            if n not in fluid_set or n not in porous_set:
                raise SpaceError(f"interface node {n} at {coords[n]} not shared "
                                 "by both subdomains")
            fluid_fixed = self.u_node_dof[n] < 0
            aux_fixed = self.aux_node_dof[n] < 0
            if fluid_fixed != aux_fixed:
                raise SpaceError(f"interface node {n} at {coords[n]} is "
                                 "constrained on one side only")

    # -- value plumbing -----------------------------------------------------

    def velocity_node_values(self, coeffs, dirichlet=None):
        """Expand fluid-velocity coefficients to per-node values, (nn, 2).

        Constrained nodes take ``dirichlet`` values (a callable of the node
        coordinates) when given, otherwise zero.  Nodes outside the fluid
        subdomain are zero.
        """
        vals = np.zeros((self.num_nodes(self.velocity_degree), 2))
        free = self.u_node_dof >= 0
        vals[free, 0] = coeffs[self.u_node_dof[free]]
        vals[free, 1] = coeffs[self.u_node_dof[free] + 1]
        if dirichlet is not None:
            fluid_nodes = np.unique(self.tri_nodes(self.velocity_degree)[self.fluid_tris])
            fixed = fluid_nodes[self.u_node_dof[fluid_nodes] < 0]
            coords = self.node_coords(self.velocity_degree)
            for n in fixed:
                vals[n] = dirichlet(coords[n, 0], coords[n, 1])
        return vals

    def aux_node_values(self, coeffs):
        """Expand companion-velocity coefficients to per-node values, (nn, 2)."""
        vals = np.zeros((self.num_nodes(self.velocity_degree), 2))
        free = self.aux_node_dof >= 0
        vals[free, 0] = coeffs[self.aux_node_dof[free]]
        vals[free, 1] = coeffs[self.aux_node_dof[free] + 1]
        return vals

    def head_node_values(self, coeffs, dirichlet=None):
        vals = np.zeros(self.num_nodes(self.head_degree))
        free = self.phi_node_dof >= 0
        vals[free] = coeffs[self.phi_node_dof[free]]
        if dirichlet is not None:
            porous_nodes = np.unique(self.tri_nodes(self.head_degree)[self.porous_tris])
            fixed = porous_nodes[self.phi_node_dof[porous_nodes] < 0]
            coords = self.node_coords(self.head_degree)
            for n in fixed:
                vals[n] = dirichlet(coords[n, 0], coords[n, 1])
        return vals

    def pressure_node_values(self, coeffs):
        vals = np.zeros(self.mesh.num_vertices)
        free = self.p_vertex_dof >= 0
        vals[free] = coeffs[self.p_vertex_dof[free]]
        return vals

    def interface_trace(self, u_coeffs, dirichlet=None):
        """Values of a fluid-velocity field at the interface nodes, (ni, 2)."""
        vals = self.velocity_node_values(u_coeffs, dirichlet)
        return vals[self.interface_nodes]

    def split_state(self, x):
        """Split a coupled block vector into (u, p, phi) coefficient views."""
        return (x[:self.offset_p], x[self.offset_p:self.offset_phi], x[self.offset_phi:])


# ---------------------------------------------------------------------------
# interpolation onto the fluid velocity space
# ---------------------------------------------------------------------------

def scott_zhang_interpolate(space, values, tol=1e-10):
    """Nodal interpolation onto the fluid velocity space.

    ``values`` is a callable ``(x, y) -> (2,)`` or a per-node array of shape
    (num_nodes, 2).  The realization is pointwise-nodal (boundary-averaged
    variants coincide with it on continuous data); it reproduces discrete
    fields exactly.  Data that does not vanish on gamma_f cannot be
    represented and raises InterpolationError.
    """
    vd = space.velocity_degree
    coords = space.node_coords(vd)
    if callable(values):
        vals = np.array([values(x, y) for x, y in coords], dtype=float)
    else:
        vals = np.asarray(values, dtype=float)
        if vals.shape != (space.num_nodes(vd), 2):
            raise InterpolationError(f"expected node values of shape "
                                     f"({space.num_nodes(vd)}, 2), got {vals.shape}")
    fluid_nodes = np.unique(space.tri_nodes(vd)[space.fluid_tris])
    scale = max(1.0, float(np.abs(vals[fluid_nodes]).max(initial=0.0)))
    fixed = fluid_nodes[space.u_node_dof[fluid_nodes] < 0]
    worst = float(np.abs(vals[fixed]).max(initial=0.0))
    if worst > tol * scale:
        raise InterpolationError(
            f"data does not vanish on gamma_f (max |v| = {worst:.3e}); "
            "the constrained space cannot represent it")
    coeffs = np.zeros(space.num_velocity_dofs)
    free = fluid_nodes[space.u_node_dof[fluid_nodes] >= 0]
    coeffs[space.u_node_dof[free]] = vals[free, 0]
    coeffs[space.u_node_dof[free] + 1] = vals[free, 1]
    return coeffs


# ---------------------------------------------------------------------------
# divergence-constrained lifting into the porous companion space
# ---------------------------------------------------------------------------

class LiftingResult:
    """Outcome of the interface-data lifting.

    Attributes
    ----------
    coeffs : (num_aux_dofs,) array
        Companion-space coefficients with the prescribed interface values.
    flux_defect : float
        Net interface flux of the data; the weak-divergence constraint can
        only hold against mean-free test functions when this is nonzero.
    constraint_residual : float
        Largest weak-divergence pairing against the constrained multiplier
        basis (solver roundoff).
    warnings : list of str
    """

    def __init__(self, coeffs, flux_defect, constraint_residual, warnings):
        self.coeffs = coeffs
        self.flux_defect = flux_defect
        self.constraint_residual = constraint_residual
        self.warnings = warnings


def trace_node_array(space, trace):
    """Normalize interface data to an array aligned with space.interface_nodes."""
    if callable(trace):
        coords = space.node_coords(space.velocity_degree)[space.interface_nodes]
        return np.array([trace(x, y) for x, y in coords], dtype=float)
    arr = np.asarray(trace, dtype=float)
    if arr.shape != (len(space.interface_nodes), 2):
        raise InterpolationError(f"expected interface values of shape "
                                 f"({len(space.interface_nodes)}, 2), got {arr.shape}")
    return arr


def discrete_lifting(space, trace, flux_tol=1e-10):
    """Extend interface velocity data into the porous companion space.

    Minimizes the squared strain seminorm subject to the weak-divergence
    constraint (div u, q) = 0 against porous P1 test functions with one
    pinned vertex, with the interface nodal values prescribed strongly and
    zero values on the outer porous boundary.  ``trace`` is a callable
    ``(x, y) -> (2,)`` or an array aligned with ``space.interface_nodes``;
    it must vanish at interface endpoints (nodes shared with the outer
    porous boundary).  Incompatible net flux is reported as a warning on the
    result, not an error: the constraint then holds against mean-free test
    functions only.
    """
    from scipy.sparse import bmat, csr_matrix
    from scipy.sparse.linalg import splu
    from . import assembly

    vals = trace_node_array(space, trace)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    fixed = space.aux_node_dof[space.interface_nodes] < 0
    worst = float(np.abs(vals[fixed]).max(initial=0.0))
    if worst > 1e-10 * scale:
        raise InterpolationError(
            f"interface data must vanish at interface endpoints "
            f"(max |v| = {worst:.3e})")

    A = assembly.strain_matrix(space, region=POROUS, kind="aux")
    D = assembly.aux_divergence_matrix(space)

    naux = space.num_aux_dofs
    g = np.zeros(naux)
    on_iface = np.zeros(naux, dtype=bool)
    for row, n in enumerate(space.interface_nodes):
        dof = space.aux_node_dof[n]
        if dof >= 0:
            g[dof:dof + 2] = vals[row]
            on_iface[dof:dof + 2] = True
    interior = ~on_iface

    # drop the lowest porous vertex from the multiplier space
    keep = np.ones(space.num_porous_vertices, dtype=bool)
    keep[0] = False
    Dt = D[keep]

    Aii = A[interior][:, interior]
    Aig = A[interior][:, on_iface]
    Di = Dt[:, interior]
    Dg = Dt[:, on_iface]
    gv = g[on_iface]

    nm = Dt.shape[0]
    K = bmat([[Aii, Di.T], [Di, csr_matrix((nm, nm))]], format="csc")
    rhs = np.concatenate([-Aig @ gv, -Dg @ gv])
    try:
        lu = splu(K)
    except RuntimeError as exc:
        raise SingularLinearSystem(
            f"lifting saddle system is singular ({exc}); the porous "
            "triangulation is too coarse for the divergence-constrained "
            "extension") from exc
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise SingularLinearSystem("lifting solve produced non-finite values")

    coeffs = g.copy()
    coeffs[interior] = sol[:interior.sum()]

    pair = Dt @ coeffs
    constraint_residual = float(np.abs(pair).max(initial=0.0))
    sys_scale = max(1.0, float(np.abs(A @ coeffs).max(initial=0.0)))
    if constraint_residual > 1e-6 * sys_scale:
        raise SingularLinearSystem(
            f"lifting constraint residual {constraint_residual:.3e} "
            "indicates an unreliable saddle solve")

    flux = float(np.asarray(D.sum(axis=0)).ravel() @ coeffs)
    warnings = []
    if abs(flux) > flux_tol * scale:
        warnings.append(
            f"interface data carries net flux {flux:.3e}; weak divergence "
            "constraint relaxed to mean-free test functions")
    return LiftingResult(coeffs, flux, constraint_residual, warnings)
