"""Bilinear-form assembly and quadrature-based functionals.

Matrix builders assemble in an *expanded* numbering first: every geometric
node of the relevant scalar space carries its degrees of freedom (two
interleaved components for vector fields), whether or not it is free.  The
expanded form makes inhomogeneous Dirichlet data a plain matrix-vector
product.  By default builders return the restriction to free dofs in the
ordering of the CoupledSpace maps; pass ``expanded=True`` for the full
matrix.

Per-node *raw value* arrays -- shape (num_nodes, 2) for vector fields,
(num_nodes,) for scalars -- are the lingua franca of the functional
evaluators at the bottom of the module.  They coincide with expanded
coefficient vectors after ``ravel()``.

Volume operators use a degree-6 triangle rule and interface operators a
degree-7 edge rule, so every bilinear-form integrand of the discretization
(polynomial degree at most 5, and at most 6 on edges) is integrated exactly.
Load functionals use degree-9 volume and degree-11 edge rules.
"""

import numpy as np
from scipy.sparse import coo_matrix

from .mesh import FLUID, POROUS
from .fem import QuadratureRule, shape_values, shape_ref_grads, edge_shape_values

OPERATOR_DEGREE = 6
LOAD_DEGREE = 9
EDGE_OPERATOR_DEGREE = 7
EDGE_LOAD_DEGREE = 11


class ParameterError(ValueError):
    """Physically inadmissible model parameters."""


class ModelParams:
    """Model data bound to a mesh.

    Parameters
    ----------
    mesh : MixedMesh
    nu : float
        Fluid viscosity, positive.
    K : scalar, (2, 2) array, or callable (x, y) -> (2, 2)
        Permeability (hydraulic conductivity) field; sampled once per porous
        triangle at the barycenter.  Must be symmetric positive definite.
    G : float
        Slip (friction) coefficient of the tangential interface condition.
    sigma : float or None
        Viscosity of the porous companion problem; default (None) resolves
        to nu * h at use time.
    g_f : callable (x, y) -> (2,), optional
        Fluid volume force.
    g_p : callable (x, y) -> float, optional
        Porous source.
    """

    def __init__(self, mesh, nu, K=1.0, G=1.0, sigma=None, g_f=None, g_p=None):
        if not (np.isfinite(nu) and nu > 0):
            raise ParameterError(f"viscosity must be positive, got {nu}")
        if not (np.isfinite(G) and G > 0):
            raise ParameterError(f"slip coefficient must be positive, got {G}")
        if sigma is not None and not (np.isfinite(sigma) and sigma > 0):
            raise ParameterError(f"companion viscosity must be positive, got {sigma}")
        self.mesh = mesh
        self.nu = float(nu)
        self.G = float(G)
        self.sigma = None if sigma is None else float(sigma)
        self.g_f = g_f
        self.g_p = g_p
        self._K_input = K
        self.K_elems = self._sample_permeability(K)
        eigs = np.linalg.eigvalsh(self.K_elems)
        self.lambda_min = float(eigs.min())
        self.lambda_max = float(eigs.max())
        if self.lambda_min <= 0:
            raise ParameterError(
                f"permeability must be positive definite "
                f"(smallest sampled eigenvalue {self.lambda_min:.3e})")

    def _sample_permeability(self, K):
        tris = self.mesh.porous_triangles()
        bary = self.mesh.vertices[self.mesh.triangles[tris]].mean(axis=1)
        if callable(K):
            vals = np.array([np.asarray(K(x, y), dtype=float) for x, y in bary])
        else:
            K = np.asarray(K, dtype=float)
            if K.ndim == 0:
                K = K * np.eye(2)
            if K.shape != (2, 2):
                raise ParameterError(f"permeability must be scalar, (2, 2), or "
                                     f"callable, got shape {K.shape}")
            vals = np.broadcast_to(K, (len(tris), 2, 2)).copy()
        if vals.shape != (len(tris), 2, 2) or not np.all(np.isfinite(vals)):
            raise ParameterError("permeability samples must be finite (2, 2) tensors")
        asym = np.abs(vals - vals.transpose(0, 2, 1)).max(initial=0.0)
        if asym > 1e-12 * max(1.0, np.abs(vals).max()):
            raise ParameterError(f"permeability must be symmetric "
                                 f"(max asymmetry {asym:.3e})")
        return vals

    def effective_sigma(self):
        """Companion viscosity: the explicit value, or nu * h."""
        return self.sigma if self.sigma is not None else self.nu * self.mesh.h

    def rebind(self, mesh):
        """Same physical data sampled on another mesh."""
        return ModelParams(mesh, self.nu, self._K_input, self.G, self.sigma,
                           self.g_f, self.g_p)


# ---------------------------------------------------------------------------
# cached element data
# ---------------------------------------------------------------------------

def _region_tris(space, region):
    if region == FLUID:
        return space.fluid_tris
    if region == POROUS:
        return space.porous_tris
    raise ValueError(f"unknown region tag {region}")


def _geometry(space, region):
    key = ("geom", region)
    if key not in space._cache:
        tris = _region_tris(space, region)
        pts = space.mesh.vertices[space.mesh.triangles[tris]]
        J = np.stack([pts[:, 1] - pts[:, 0], pts[:, 2] - pts[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        invJT = np.empty_like(J)
        invJT[:, 0, 0] = J[:, 1, 1] / det
        invJT[:, 0, 1] = -J[:, 1, 0] / det
        invJT[:, 1, 0] = -J[:, 0, 1] / det
        invJT[:, 1, 1] = J[:, 0, 0] / det
        space._cache[key] = (tris, pts, det, invJT)
    return space._cache[key]


def _rule(degree):
    return QuadratureRule.triangle(degree)


def _basis(space, degree, quad_degree):
    key = ("basis", degree, quad_degree)
    if key not in space._cache:
        rule = _rule(quad_degree)
        space._cache[key] = (rule, shape_values(degree, rule.points),
                             shape_ref_grads(degree, rule.points))
    return space._cache[key]


def _element_data(space, region, degree, quad_degree):
    """(tris, nodes, values, phys_grads, weights) for one region/space/rule."""
    key = ("elem", region, degree, quad_degree)
    if key not in space._cache:
        tris, pts, det, invJT = _geometry(space, region)
        rule, vals, ref_grads = _basis(space, degree, quad_degree)
        grads = np.einsum('eij,qlj->eqli', invJT, ref_grads)
        weights = rule.weights[None, :] * det[:, None]
        nodes = space.tri_nodes(degree)[tris]
        space._cache[key] = (tris, nodes, vals, grads, weights)
    return space._cache[key]


def _quad_points(space, region, quad_degree):
    key = ("qpts", region, quad_degree)
    if key not in space._cache:
        _, pts, _, _ = _geometry(space, region)
        rule = _rule(quad_degree)
        space._cache[key] = np.einsum('qk,ekd->eqd', rule.points, pts)
    return space._cache[key]


def expanded_index(space, kind):
    """Map free dofs of a field to their expanded-numbering positions."""
    key = ("index", kind)
    if key in space._cache:
        return space._cache[key]
    if kind in ("velocity", "aux"):
        node_dof = space.u_node_dof if kind == "velocity" else space.aux_node_dof
        n = space.num_velocity_dofs if kind == "velocity" else space.num_aux_dofs
        idx = np.empty(n, dtype=np.int64)
        nodes = np.flatnonzero(node_dof >= 0)
        idx[node_dof[nodes]] = 2 * nodes
        idx[node_dof[nodes] + 1] = 2 * nodes + 1
    elif kind == "pressure":
        nodes = np.flatnonzero(space.p_vertex_dof >= 0)
        idx = np.empty(space.num_pressure_dofs, dtype=np.int64)
        idx[space.p_vertex_dof[nodes]] = nodes
    elif kind == "head":
        nodes = np.flatnonzero(space.phi_node_dof >= 0)
        idx = np.empty(space.num_head_dofs, dtype=np.int64)
        idx[space.phi_node_dof[nodes]] = nodes
    elif kind == "porous_vertex":
        nodes = np.flatnonzero(space.porous_vertex_row >= 0)
        idx = np.empty(space.num_porous_vertices, dtype=np.int64)
        idx[space.porous_vertex_row[nodes]] = nodes
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    space._cache[key] = idx
    return idx


def restrict(space, A, row_kind, col_kind):
    """Restrict an expanded matrix to the free dofs of the given fields."""
    A = A.tocsr()
    return A[expanded_index(space, row_kind)][:, expanded_index(space, col_kind)]


def _scatter_vv(L, nodes, dim):
    """Scatter (ne, nl, 2, nl, 2) local blocks; vector rows x vector cols."""
    ne, nl = nodes.shape
    comp = np.arange(2)
    rows = 2 * nodes[:, :, None, None, None] + comp[None, None, :, None, None]
    cols = 2 * nodes[:, None, None, :, None] + comp[None, None, None, None, :]
    rows = np.broadcast_to(rows, L.shape)
    cols = np.broadcast_to(cols, L.shape)
    return coo_matrix((L.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(dim, dim)).tocsr()


def _scatter_sv(L, rnodes, cnodes, rdim, cdim):
    """Scatter (ne, nr, nc, 2) blocks; scalar rows x vector cols."""
    rows = np.broadcast_to(rnodes[:, :, None, None], L.shape)
    cols = np.broadcast_to(2 * cnodes[:, None, :, None] + np.arange(2), L.shape)
    return coo_matrix((L.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(rdim, cdim)).tocsr()


def _scatter_ss(L, rnodes, cnodes, rdim, cdim):
    rows = np.broadcast_to(rnodes[:, :, None], L.shape)
    cols = np.broadcast_to(cnodes[:, None, :], L.shape)
    return coo_matrix((L.ravel(), (rows.ravel(), cols.ravel())),
                      shape=(rdim, cdim)).tocsr()


def _vector_kind(region):
    return "velocity" if region == FLUID else "aux"


# ---------------------------------------------------------------------------
# matrix builders
# ---------------------------------------------------------------------------

def strain_matrix(space, region=FLUID, kind=None, coefficient=1.0, expanded=False):
    """(D(u), D(v)) over one region, times a constant coefficient.

    ``kind`` selects the restriction map and defaults to the natural vector
    field of the region (fluid velocity / porous companion velocity).
    """
    kind = kind or _vector_kind(region)
    _, nodes, _, g, W = _element_data(space, region, space.velocity_degree,
                                      OPERATOR_DEGREE)
    base = np.einsum('eqli,eqmi,eq->elm', g, g, W)
    cross = np.einsum('eqld,eqmc,eq->elmcd', g, g, W)
    L = 0.5 * (np.einsum('elm,cd->elcmd', base, np.eye(2))
               + cross.transpose(0, 1, 3, 2, 4))
    A = coefficient * _scatter_vv(L, nodes, 2 * space.num_nodes(space.velocity_degree))
    return A if expanded else restrict(space, A, kind, kind)


def darcy_matrix(space, params, expanded=False):
    """(K grad(phi), grad(psi)) over the porous region."""
    _, nodes, _, g, W = _element_data(space, POROUS, space.head_degree,
                                      OPERATOR_DEGREE)
    Kg = np.einsum('eij,eqmj->eqmi', params.K_elems, g)
    L = np.einsum('eqli,eqmi,eq->elm', g, Kg, W)
    A = _scatter_ss(L, nodes, nodes, space.num_nodes(space.head_degree),
                    space.num_nodes(space.head_degree))
    return A if expanded else restrict(space, A, "head", "head")


def divergence_matrix(space, region=FLUID, expanded=False):
    """(q, div u): P1 scalar rows against vector columns over one region."""
    tris, nodes, _, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    vals1 = shape_values(1, _rule(OPERATOR_DEGREE).points)
    rnodes = space.mesh.triangles[tris]
    L = np.einsum('qr,eqmd,eq->ermd', vals1, g, W)
    B = _scatter_sv(L, rnodes, nodes, space.mesh.num_vertices,
                    2 * space.num_nodes(space.velocity_degree))
    if expanded:
        return B
    if region == FLUID:
        return restrict(space, B, "pressure", "velocity")
    return restrict(space, B, "porous_vertex", "aux")


def aux_divergence_matrix(space):
    """(q, div u) on the porous region: P1 vertex rows x companion columns."""
    return divergence_matrix(space, region=POROUS)


def convection_matrix(space, wind, region=FLUID, skew=True, expanded=False):
    """((w . grad) u, v), plus the skew stabilization 1/2 (div w, u . v).

    ``wind`` is a raw per-node value array of shape (num_nodes, 2).
    """
    _, nodes, vals, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    wn = np.asarray(wind)[nodes]
    wq = np.einsum('ql,elc->eqc', vals, wn)
    wgrad = np.einsum('eqj,eqmj->eqm', wq, g)
    P = np.einsum('ql,eqm,eq->elm', vals, wgrad, W)
    if skew:
        divw = np.einsum('elc,eqlc->eq', wn, g)
        P = P + 0.5 * np.einsum('eq,ql,qm->elm', divw * W, vals, vals)
    L = np.einsum('elm,cd->elcmd', P, np.eye(2))
    A = _scatter_vv(L, nodes, 2 * space.num_nodes(space.velocity_degree))
    kind = _vector_kind(region)
    return A if expanded else restrict(space, A, kind, kind)


def newton_convection_matrix(space, wind, region=FLUID, expanded=False):
    """((u . grad) w, v) + 1/2 (div u, w . v): the extra Newton block."""
    _, nodes, vals, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    wn = np.asarray(wind)[nodes]
    wq = np.einsum('ql,elc->eqc', vals, wn)
    gw = np.einsum('elc,eqlj->eqcj', wn, g)
    L = (np.einsum('ql,qm,eqcd,eq->elcmd', vals, vals, gw, W)
         + 0.5 * np.einsum('ql,eqmd,eqc,eq->elcmd', vals, g, wq, W))
    A = _scatter_vv(L, nodes, 2 * space.num_nodes(space.velocity_degree))
    kind = _vector_kind(region)
    return A if expanded else restrict(space, A, kind, kind)


def bjs_matrix(space, coefficient=1.0, expanded=False):
    """coefficient * (u . tau, v . tau) over the interface."""
    vd = space.velocity_degree
    rule = QuadratureRule.edge(EDGE_OPERATOR_DEGREE)
    sv = edge_shape_values(vd, rule.points)
    dim = 2 * space.num_nodes(vd)
    rows, cols, data = [], [], []
    for i in range(len(space.iface_edge_nodes)):
        nodes = space.iface_edge_nodes[i]
        tau = space.iface_tangents[i]
        base = space.iface_lengths[i] * np.einsum('q,qa,qb->ab', rule.weights, sv, sv)
        block = coefficient * np.einsum('ab,c,d->acbd', base, tau, tau)
        r = (2 * nodes[:, None, None, None] + np.arange(2)[None, :, None, None])
        c = (2 * nodes[None, None, :, None] + np.arange(2)[None, None, None, :])
        rows.append(np.broadcast_to(r, block.shape).ravel())
        cols.append(np.broadcast_to(c, block.shape).ravel())
        data.append(block.ravel())
    A = coo_matrix((np.concatenate(data),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(dim, dim)).tocsr()
    return A if expanded else restrict(space, A, "velocity", "velocity")


def interface_coupling_matrix(space, expanded=False):
    """(phi, v . n_f) over the interface: velocity rows x head columns.

    The coupled system uses this block once as assembled and once as its
    exact transpose with a minus sign, which keeps the pairing
    algebraically skew-symmetric.
    """
    vd, hd = space.velocity_degree, space.head_degree
    rule = QuadratureRule.edge(EDGE_OPERATOR_DEGREE)
    sv = edge_shape_values(vd, rule.points)
    sh = edge_shape_values(hd, rule.points)
    rdim = 2 * space.num_nodes(vd)
    cdim = space.num_nodes(hd)
    rows, cols, data = [], [], []
    for i in range(len(space.iface_edge_nodes)):
        vnodes = space.iface_edge_nodes[i]
        hnodes = space.iface_edge_head_nodes[i]
        n = space.iface_normals[i]
        base = space.iface_lengths[i] * np.einsum('q,qa,qb->ab', rule.weights, sv, sh)
        block = np.einsum('ab,c->acb', base, n)
        r = 2 * vnodes[:, None, None] + np.arange(2)[None, :, None]
        c = np.broadcast_to(hnodes[None, None, :], block.shape)
        rows.append(np.broadcast_to(r, block.shape).ravel())
        cols.append(c.ravel())
        data.append(block.ravel())
    A = coo_matrix((np.concatenate(data),
                    (np.concatenate(rows), np.concatenate(cols))),
                   shape=(rdim, cdim)).tocsr()
    return A if expanded else restrict(space, A, "velocity", "head")


def pressure_mass_matrix(space, expanded=False):
    """(p, q) over the fluid region, P1 x P1."""
    tris, _, _, _, W = _element_data(space, FLUID, space.velocity_degree,
                                     OPERATOR_DEGREE)
    vals1 = shape_values(1, _rule(OPERATOR_DEGREE).points)
    rnodes = space.mesh.triangles[tris]
    L = np.einsum('ql,qm,eq->elm', vals1, vals1, W)
    M = _scatter_ss(L, rnodes, rnodes, space.mesh.num_vertices,
                    space.mesh.num_vertices)
    return M if expanded else restrict(space, M, "pressure", "pressure")


def pressure_mean_vector(space):
    """Integrals of the pressure basis functions over the fluid region."""
    tris, _, _, _, W = _element_data(space, FLUID, space.velocity_degree,
                                     OPERATOR_DEGREE)
    vals1 = shape_values(1, _rule(OPERATOR_DEGREE).points)
    loc = np.einsum('ql,eq->el', vals1, W)
    m = np.zeros(space.mesh.num_vertices)
    np.add.at(m, space.mesh.triangles[tris], loc)
    return m[expanded_index(space, "pressure")]


# ---------------------------------------------------------------------------
# load vectors
# ---------------------------------------------------------------------------

def _eval_at(points, func, width):
    flat = points.reshape(-1, 2)
    out = np.empty((len(flat), width) if width > 1 else len(flat))
    for k, (x, y) in enumerate(flat):
        out[k] = func(x, y)
    return out.reshape(points.shape[:2] + ((width,) if width > 1 else ()))


def load_vector(space, params):
    """Coupled right-hand side from the volume sources (g_f, g_p)."""
    b = np.zeros(space.num_total_dofs)
    if params.g_f is not None:
        _, nodes, _, _, _ = _element_data(space, FLUID, space.velocity_degree,
                                          LOAD_DEGREE)
        rule = _rule(LOAD_DEGREE)
        vals = shape_values(space.velocity_degree, rule.points)
        tris, pts, det, _ = _geometry(space, FLUID)
        W = rule.weights[None, :] * det[:, None]
        F = _eval_at(_quad_points(space, FLUID, LOAD_DEGREE), params.g_f, 2)
        loc = np.einsum('eq,eqc,ql->elc', W, F, vals)
        f = np.zeros(2 * space.num_nodes(space.velocity_degree))
        np.add.at(f, 2 * nodes, loc[:, :, 0])
        np.add.at(f, 2 * nodes + 1, loc[:, :, 1])
        b[space.offset_u:space.offset_p] = f[expanded_index(space, "velocity")]
    if params.g_p is not None:
        _, nodes, _, _, _ = _element_data(space, POROUS, space.head_degree,
                                          LOAD_DEGREE)
        rule = _rule(LOAD_DEGREE)
        vals = shape_values(space.head_degree, rule.points)
        _, _, det, _ = _geometry(space, POROUS)
        W = rule.weights[None, :] * det[:, None]
        F = _eval_at(_quad_points(space, POROUS, LOAD_DEGREE), params.g_p, 1)
        loc = np.einsum('eq,eq,ql->el', W, F, vals)
        f = np.zeros(space.num_nodes(space.head_degree))
        np.add.at(f, nodes, loc)
        b[space.offset_phi:] = f[expanded_index(space, "head")]
    return b


def interface_residual_loads(space, r_mass=None, r_normal=None, r_tangential=None):
    """Consistency loads for manufactured solutions with nonzero interface
    residuals.

    For exact fields (u, p, phi) with interface defects
    ``r_normal = p - 2 nu n.D(u)n - phi``,
    ``r_tangential = -2 nu tau.D(u)n - G u.tau`` and
    ``r_mass = u.n_f + K grad(phi).n_f``, the discrete weak form reproduces
    the fields when the right-hand side carries
    ``-(r_normal, v.n) - (r_tangential, v.tau)`` on the momentum rows and
    ``-(r_mass, psi)`` on the head rows.
    """
    b = np.zeros(space.num_total_dofs)
    rule = QuadratureRule.edge(EDGE_LOAD_DEGREE)
    sv = edge_shape_values(space.velocity_degree, rule.points)
    sh = edge_shape_values(space.head_degree, rule.points)
    fu = np.zeros(2 * space.num_nodes(space.velocity_degree))
    fh = np.zeros(space.num_nodes(space.head_degree))
    verts = space.mesh.vertices
    for i, (a, bb) in enumerate(space.mesh.interface_edges):
        pa, pb = verts[a], verts[bb]
        xq = pa[None, :] + rule.points[:, None] * (pb - pa)[None, :]
        n, tau = space.iface_normals[i], space.iface_tangents[i]
        wlen = rule.weights * space.iface_lengths[i]
        if r_normal is not None or r_tangential is not None:
            vecq = np.zeros((len(xq), 2))
            if r_normal is not None:
                rn = np.array([r_normal(x, y) for x, y in xq])
                vecq -= rn[:, None] * n
            if r_tangential is not None:
                rt = np.array([r_tangential(x, y) for x, y in xq])
                vecq -= rt[:, None] * tau
            loc = np.einsum('q,qc,qa->ca', wlen, vecq, sv)
            nodes = space.iface_edge_nodes[i]
            np.add.at(fu, 2 * nodes, loc[0])
            np.add.at(fu, 2 * nodes + 1, loc[1])
        if r_mass is not None:
            rm = np.array([r_mass(x, y) for x, y in xq])
            loc = -np.einsum('q,q,qa->a', wlen, rm, sh)
            np.add.at(fh, space.iface_edge_head_nodes[i], loc)
    b[space.offset_u:space.offset_p] = fu[expanded_index(space, "velocity")]
    b[space.offset_phi:] = fh[expanded_index(space, "head")]
    return b


# ---------------------------------------------------------------------------
# functional evaluators on raw per-node values
# ---------------------------------------------------------------------------

def strain_energy(space, u_raw, region):
    """Integral of D(u):D(u) over a region (no viscosity factor)."""
    _, nodes, _, g, W = _element_data(space, region, space.velocity_degree,
                                      OPERATOR_DEGREE)
    gu = np.einsum('elc,eqlj->eqcj', np.asarray(u_raw)[nodes], g)
    D = 0.5 * (gu + gu.transpose(0, 1, 3, 2))
    return float(np.einsum('eqcj,eqcj,eq->', D, D, W))


def darcy_energy(space, phi_raw, params):
    """Integral of grad(phi) . K grad(phi) over the porous region."""
    _, nodes, _, g, W = _element_data(space, POROUS, space.head_degree,
                                      OPERATOR_DEGREE)
    gp = np.einsum('el,eqlj->eqj', np.asarray(phi_raw)[nodes], g)
    return float(np.einsum('eqi,eij,eqj,eq->', gp, params.K_elems, gp, W))


def divergence_value(space, q_raw, u_raw, region=FLUID):
    """Integral of q * div(u), q piecewise linear on vertices."""
    tris, nodes, _, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    vals1 = shape_values(1, _rule(OPERATOR_DEGREE).points)
    qq = np.einsum('ql,el->eq', vals1, np.asarray(q_raw)[space.mesh.triangles[tris]])
    divu = np.einsum('elc,eqlc->eq', np.asarray(u_raw)[nodes], g)
    return float(np.einsum('eq,eq,eq->', qq, divu, W))


def convection_value(space, w_raw, u_raw, v_raw, region=FLUID, skew=True):
    """((w . grad) u, v) over a region, optionally with 1/2 (div w, u . v)."""
    _, nodes, vals, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    wn = np.asarray(w_raw)[nodes]
    wq = np.einsum('ql,elc->eqc', vals, wn)
    gu = np.einsum('elc,eqlj->eqcj', np.asarray(u_raw)[nodes], g)
    vq = np.einsum('ql,elc->eqc', vals, np.asarray(v_raw)[nodes])
    out = np.einsum('eqj,eqcj,eqc,eq->', wq, gu, vq, W)
    if skew:
        divw = np.einsum('elc,eqlc->eq', wn, g)
        uq = np.einsum('ql,elc->eqc', vals, np.asarray(u_raw)[nodes])
        out += 0.5 * np.einsum('eq,eqc,eqc,eq->', divw, uq, vq, W)
    return float(out)


def divdot_value(space, w_raw, u_raw, v_raw, region=POROUS):
    """Integral of div(w) * (u . v) over a region."""
    _, nodes, vals, g, W = _element_data(space, region, space.velocity_degree,
                                         OPERATOR_DEGREE)
    divw = np.einsum('elc,eqlc->eq', np.asarray(w_raw)[nodes], g)
    uq = np.einsum('ql,elc->eqc', vals, np.asarray(u_raw)[nodes])
    vq = np.einsum('ql,elc->eqc', vals, np.asarray(v_raw)[nodes])
    return float(np.einsum('eq,eqc,eqc,eq->', divw, uq, vq, W))


def _edge_values(space, raw, i, sv):
    return np.einsum('qa,ac->qc', sv, np.asarray(raw)[space.iface_edge_nodes[i]])


def interface_uv_flux(space, u_raw, v_raw, w_raw):
    """Integral over the interface of (u . v) (w . n_f)."""
    rule = QuadratureRule.edge(EDGE_OPERATOR_DEGREE)
    sv = edge_shape_values(space.velocity_degree, rule.points)
    out = 0.0
    for i in range(len(space.iface_edge_nodes)):
        uq = _edge_values(space, u_raw, i, sv)
        vq = _edge_values(space, v_raw, i, sv)
        wq = _edge_values(space, w_raw, i, sv)
        wn = wq @ space.iface_normals[i]
        out += space.iface_lengths[i] * np.einsum(
            'q,q,q->', rule.weights, np.einsum('qc,qc->q', uq, vq), wn)
    return float(out)


def gamma_term(space, u_raw):
    """1/2 integral over the interface of |u|^2 (u . n_f)."""
    return 0.5 * interface_uv_flux(space, u_raw, u_raw, u_raw)


def bjs_energy(space, u_raw, coefficient=1.0):
    """coefficient * integral over the interface of (u . tau)^2."""
    rule = QuadratureRule.edge(EDGE_OPERATOR_DEGREE)
    sv = edge_shape_values(space.velocity_degree, rule.points)
    out = 0.0
    for i in range(len(space.iface_edge_nodes)):
        ut = _edge_values(space, u_raw, i, sv) @ space.iface_tangents[i]
        out += space.iface_lengths[i] * np.einsum('q,q,q->', rule.weights, ut, ut)
    return coefficient * float(out)


def interface_head_flux(space, u_raw, phi_raw):
    """Integral over the interface of phi (u . n_f)."""
    rule = QuadratureRule.edge(EDGE_OPERATOR_DEGREE)
    sv = edge_shape_values(space.velocity_degree, rule.points)
    sh = edge_shape_values(space.head_degree, rule.points)
    out = 0.0
    for i in range(len(space.iface_edge_nodes)):
        un = _edge_values(space, u_raw, i, sv) @ space.iface_normals[i]
        pq = sh @ np.asarray(phi_raw)[space.iface_edge_head_nodes[i]]
        out += space.iface_lengths[i] * np.einsum('q,q,q->', rule.weights, pq, un)
    return float(out)


def load_value(space, params, u_raw, phi_raw):
    """(g_f, u) over the fluid region plus (g_p, phi) over the porous one."""
    out = 0.0
    rule = _rule(LOAD_DEGREE)
    if params.g_f is not None:
        _, nodes, _, _, _ = _element_data(space, FLUID, space.velocity_degree,
                                          LOAD_DEGREE)
        vals = shape_values(space.velocity_degree, rule.points)
        _, _, det, _ = _geometry(space, FLUID)
        W = rule.weights[None, :] * det[:, None]
        F = _eval_at(_quad_points(space, FLUID, LOAD_DEGREE), params.g_f, 2)
        uq = np.einsum('ql,elc->eqc', vals, np.asarray(u_raw)[nodes])
        out += np.einsum('eqc,eqc,eq->', F, uq, W)
    if params.g_p is not None:
        _, nodes, _, _, _ = _element_data(space, POROUS, space.head_degree,
                                          LOAD_DEGREE)
        vals = shape_values(space.head_degree, rule.points)
        _, _, det, _ = _geometry(space, POROUS)
        W = rule.weights[None, :] * det[:, None]
        F = _eval_at(_quad_points(space, POROUS, LOAD_DEGREE), params.g_p, 1)
        pq = np.einsum('ql,el->eq', vals, np.asarray(phi_raw)[nodes])
        out += np.einsum('eq,eq,eq->', F, pq, W)
    return float(out)


def export_matrix_market(A, path, comment=""):
    """Write a sparse matrix in Matrix Market format."""
    from scipy.io import mmwrite
    mmwrite(str(path), coo_matrix(A), comment=comment)
