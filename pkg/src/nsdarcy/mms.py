"""Manufactured solutions and convergence studies.

A manufactured case prescribes closed-form fields (u, p, phi) on the
canonical two-strip geometry (fluid above, porous below, horizontal
interface with downward fluid normal) and derives volume sources and
interface consistency loads so the discrete problem reproduces the fields.
The prescribed fields need not satisfy the interface conditions; their
defects are assembled as additional interface loads.

Provided cases keep the outer-boundary data exact: the smooth case
satisfies the homogeneous velocity, head, and no-flux conditions by
construction, and the representable case (all fields in the discrete
spaces) carries its inhomogeneous velocity trace as Dirichlet data.  Both
use constant diagonal permeability so the lateral no-flux condition holds
exactly.
"""

import numpy as np

from . import assembly
from .fem import QuadratureRule, shape_ref_grads, shape_values
from .mesh import FLUID, POROUS, build_rectangle_mesh, refine_uniform
from .solver import solve_coupled

__all__ = ["ManufacturedCase", "smooth_case", "representable_case",
           "get_case", "CASE_NAMES", "convergence_study", "solution_errors",
           "consistency_residual", "StudyResult"]

_N_F = np.array([0.0, -1.0])
_TAU = np.array([1.0, 0.0])


class ManufacturedCase:
    """Closed-form fields plus everything needed to reproduce them discretely.

    The field callables take (x, y): ``u -> (2,)``, ``grad_u -> (2, 2)`` with
    entry [i, j] = du_i/dx_j, ``lap_u -> (2,)``, ``p/phi -> float``,
    ``grad_p/grad_phi -> (2,)``, ``hess_phi -> (2, 2)``.  ``dirichlet`` is
    the velocity trace on gamma_f, or None when the field vanishes there.
    """

    def __init__(self, name, nu, K, G, u, grad_u, lap_u, p, grad_p,
                 phi, grad_phi, hess_phi, dirichlet=None):
        self.name = name
        self.nu = float(nu)
        self.K = np.asarray(K, dtype=float)
        self.G = float(G)
        self.u = u
        self.grad_u = grad_u
        self.lap_u = lap_u
        self.p = p
        self.grad_p = grad_p
        self.phi = phi
        self.grad_phi = grad_phi
        self.hess_phi = hess_phi
        self.dirichlet = dirichlet

    # -- derived sources and interface defects ------------------------------

    def source_fluid(self, x, y):
        """g_f = -nu lap(u) + grad(p) + (u . grad) u."""
        gu = np.asarray(self.grad_u(x, y))
        return (-self.nu * np.asarray(self.lap_u(x, y))
                + np.asarray(self.grad_p(x, y))
                + gu @ np.asarray(self.u(x, y)))

    def source_porous(self, x, y):
        """g_p = -div(K grad(phi)) for constant K."""
        return -float(np.tensordot(self.K, np.asarray(self.hess_phi(x, y))))

    def _strain(self, x, y):
        gu = np.asarray(self.grad_u(x, y))
        return 0.5 * (gu + gu.T)

    def r_normal(self, x, y):
        """Normal-stress defect p - 2 nu n.D(u)n - phi on the interface."""
        D = self._strain(x, y)
        return (self.p(x, y) - 2 * self.nu * (_N_F @ D @ _N_F)
                - self.phi(x, y))

    def r_tangential(self, x, y):
        """Slip defect -2 nu tau.D(u)n - G u.tau on the interface."""
        D = self._strain(x, y)
        return (-2 * self.nu * (_TAU @ D @ _N_F)
                - self.G * (np.asarray(self.u(x, y)) @ _TAU))

    def r_mass(self, x, y):
        """Mass defect u.n_f + (K grad phi).n_f on the interface."""
        return (np.asarray(self.u(x, y)) @ _N_F
                + (self.K @ np.asarray(self.grad_phi(x, y))) @ _N_F)

    # -- discrete problem ----------------------------------------------------

    def params(self, mesh, sigma=None):
        return assembly.ModelParams(mesh, nu=self.nu, K=self.K, G=self.G,
                                    sigma=sigma, g_f=self.source_fluid,
                                    g_p=self.source_porous)

    def interface_loads(self, space):
        return assembly.interface_residual_loads(
            space, r_mass=self.r_mass, r_normal=self.r_normal,
            r_tangential=self.r_tangential)

    def solve(self, space, config=None):
        return solve_coupled(space, self.params(space.mesh), config,
                             dirichlet=self.dirichlet,
                             extra_loads=self.interface_loads(space))


def smooth_case(nu=1.0, amplitude=0.4, head_amplitude=0.15,
                pressure_amplitude=2.0, K=1.0, G=1.0):
    """Trigonometric divergence-free velocity, outer data exactly zero.

    Stream function A sin^2(pi x) (2 - y)^2 for the fluid, head
    B cos(pi x) y, pressure C sin(pi x) cos(pi y) (mean-free on the strip).

    The default amplitudes keep each field's own interpolation error
    dominant in the corresponding error norm, so a refinement study
    observes the clean approximation orders instead of cross-field
    pollution (a large head amplitude drags the velocity L2 rate below 3;
    a small pressure amplitude lets the pressure ride the velocity error
    above order 2).
    """
    A, B, C = amplitude, head_amplitude, pressure_amplitude
    pi = np.pi
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        K = K * np.eye(2)
    if abs(K[0, 1]) > 0 or abs(K[1, 0]) > 0:
        raise ValueError("smooth case requires diagonal permeability so the "
                         "lateral no-flux condition stays exact")

    def u(x, y):
        return (-2 * A * np.sin(pi * x) ** 2 * (2 - y),
                -A * pi * np.sin(2 * pi * x) * (2 - y) ** 2)

    def grad_u(x, y):
        return ((-2 * A * pi * np.sin(2 * pi * x) * (2 - y),
                 2 * A * np.sin(pi * x) ** 2),
                (-2 * A * pi ** 2 * np.cos(2 * pi * x) * (2 - y) ** 2,
                 2 * A * pi * np.sin(2 * pi * x) * (2 - y)))

    def lap_u(x, y):
        return (-4 * A * pi ** 2 * np.cos(2 * pi * x) * (2 - y),
                4 * A * pi ** 3 * np.sin(2 * pi * x) * (2 - y) ** 2
                - 2 * A * pi * np.sin(2 * pi * x))

    def p(x, y):
        return C * np.sin(pi * x) * np.cos(pi * y)

    def grad_p(x, y):
        return (C * pi * np.cos(pi * x) * np.cos(pi * y),
                -C * pi * np.sin(pi * x) * np.sin(pi * y))

    def phi(x, y):
        return B * np.cos(pi * x) * y

    def grad_phi(x, y):
        return (-B * pi * np.sin(pi * x) * y, B * np.cos(pi * x))

    def hess_phi(x, y):
        return ((-B * pi ** 2 * np.cos(pi * x) * y, -B * pi * np.sin(pi * x)),
                (-B * pi * np.sin(pi * x), 0.0))

    return ManufacturedCase("smooth", nu, K, G, u, grad_u, lap_u, p, grad_p,
                            phi, grad_phi, hess_phi)


def representable_case(nu=1.0, head_amplitude=1.0, K=1.0, G=1.0):
    """Quadratic divergence-free velocity, linear pressure and head: every
    field lies in the discrete spaces, so the solver must reproduce it to
    rounding.  The velocity trace on gamma_f is inhomogeneous Dirichlet data.

    Stream function x^2 (y - 1) + y^2 x, pressure x - 1/2 (mean-free), head
    B y.
    """
    B = head_amplitude
    K = np.asarray(K, dtype=float)
    if K.ndim == 0:
        K = K * np.eye(2)
    if abs(K[0, 1]) > 0 or abs(K[1, 0]) > 0:
        raise ValueError("representable case requires diagonal permeability "
                         "so the lateral no-flux condition stays exact")

    def u(x, y):
        return (x ** 2 + 2 * x * y, -2 * x * (y - 1) - y ** 2)

    def grad_u(x, y):
        return ((2 * x + 2 * y, 2 * x), (-2 * (y - 1), -2 * x - 2 * y))

    def lap_u(x, y):
        return (2.0, -2.0)

    def p(x, y):
        return x - 0.5

    def grad_p(x, y):
        return (1.0, 0.0)

    def phi(x, y):
        return B * y

    def grad_phi(x, y):
        return (0.0, B)

    def hess_phi(x, y):
        return ((0.0, 0.0), (0.0, 0.0))

    return ManufacturedCase("representable", nu, K, G, u, grad_u, lap_u,
                            p, grad_p, phi, grad_phi, hess_phi, dirichlet=u)


_CASES = {"smooth": smooth_case, "representable": representable_case}
CASE_NAMES = tuple(sorted(_CASES))


def get_case(name, **kwargs):
    try:
        factory = _CASES[name]
    except KeyError:
        raise KeyError(f"unknown manufactured case {name!r}; "
                       f"available: {', '.join(CASE_NAMES)}") from None
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# error norms and convergence studies
# ---------------------------------------------------------------------------

_ERROR_DEGREE = 9


def solution_errors(space, case, state):
    """L2/H1-seminorm errors of a discrete state against the exact fields.

    Returns a dict with err_u_h1, err_u_l2, err_p_l2, err_phi_h1 (the
    velocity and pressure over the fluid region, the head gradient over the
    porous region), all by degree-9 quadrature.
    """
    rule = QuadratureRule.triangle(_ERROR_DEGREE)
    out = {}

    vd = space.velocity_degree
    _, nodes, vals, grads, W = assembly._element_data(space, FLUID, vd,
                                                      _ERROR_DEGREE)
    X = assembly._quad_points(space, FLUID, _ERROR_DEGREE)
    u_raw = state.u_raw(space)
    uh = np.einsum('ql,elc->eqc', vals, u_raw[nodes])
    guh = np.einsum('elc,eqlj->eqcj', u_raw[nodes], grads)
    ue = np.empty_like(uh)
    gue = np.empty_like(guh)
    for e in range(X.shape[0]):
        for q in range(X.shape[1]):
            ue[e, q] = case.u(*X[e, q])
            gue[e, q] = case.grad_u(*X[e, q])
    du, dg = uh - ue, guh - gue
    out["err_u_l2"] = float(np.sqrt(np.einsum('eqc,eqc,eq->', du, du, W)))
    out["err_u_h1"] = float(np.sqrt(np.einsum('eqcj,eqcj,eq->', dg, dg, W)))

    tris = space.fluid_tris
    vals1 = shape_values(1, rule.points)
    p_raw = state.p_raw(space)
    ph = np.einsum('ql,el->eq', vals1, p_raw[space.mesh.triangles[tris]])
    pe = np.empty_like(ph)
    for e in range(X.shape[0]):
        for q in range(X.shape[1]):
            pe[e, q] = case.p(*X[e, q])
    out["err_p_l2"] = float(np.sqrt(np.einsum('eq,eq,eq->', ph - pe, ph - pe, W)))

    hd = space.head_degree
    _, nodes_h, _, grads_h, Wp = assembly._element_data(space, POROUS, hd,
                                                        _ERROR_DEGREE)
    Xp = assembly._quad_points(space, POROUS, _ERROR_DEGREE)
    phi_raw = state.phi_raw(space)
    gph = np.einsum('el,eqlj->eqj', phi_raw[nodes_h], grads_h)
    gpe = np.empty_like(gph)
    for e in range(Xp.shape[0]):
        for q in range(Xp.shape[1]):
            gpe[e, q] = case.grad_phi(*Xp[e, q])
    dphi = gph - gpe
    out["err_phi_h1"] = float(np.sqrt(np.einsum('eqj,eqj,eq->', dphi, dphi, Wp)))
    return out


def consistency_residual(space, case):
    """Relative discrete weak residual of the exact fields themselves.

    Every form is integrated with the exact field callables (not their
    interpolants) at load-degree quadrature, against all free discrete test
    functions, including the derived sources and interface loads.  The
    result reflects only derivation mistakes and quadrature error, so it
    must be small on any mesh before convergence rates mean anything.

    The skew stabilization is omitted: the cases are built divergence free,
    where it vanishes identically.
    """
    params = case.params(space.mesh)
    b = assembly.load_vector(space, params) + case.interface_loads(space)
    R = b.copy()

    vd = space.velocity_degree
    _, nodes, vals, grads, W = assembly._element_data(space, FLUID, vd,
                                                      _ERROR_DEGREE)
    X = assembly._quad_points(space, FLUID, _ERROR_DEGREE)
    ne, nq = W.shape
    U = np.empty((ne, nq, 2))
    GU = np.empty((ne, nq, 2, 2))
    P = np.empty((ne, nq))
    for e in range(ne):
        for q in range(nq):
            x, y = X[e, q]
            U[e, q] = case.u(x, y)
            GU[e, q] = case.grad_u(x, y)
            P[e, q] = case.p(x, y)
    D = 0.5 * (GU + GU.transpose(0, 1, 3, 2))
    conv = np.einsum('eqcj,eqj->eqc', GU, U)
    loc = (-2 * case.nu * np.einsum('eq,eqcj,eqlj->elc', W, D, grads)
           - np.einsum('eq,eqc,ql->elc', W, conv, vals)
           + np.einsum('eq,eq,eqlc->elc', W, P, grads))
    fu = np.zeros(2 * space.num_nodes(vd))
    np.add.at(fu, 2 * nodes, loc[:, :, 0])
    np.add.at(fu, 2 * nodes + 1, loc[:, :, 1])
    R[:space.offset_p] += fu[assembly.expanded_index(space, "velocity")]

    divu = GU[..., 0, 0] + GU[..., 1, 1]
    vals1 = shape_values(1, QuadratureRule.triangle(_ERROR_DEGREE).points)
    tris = space.fluid_tris
    locp = -np.einsum('eq,eq,qr->er', W, divu, vals1)
    fp = np.zeros(space.mesh.num_vertices)
    np.add.at(fp, space.mesh.triangles[tris], locp)
    R[space.offset_p:space.offset_phi] += fp[
        assembly.expanded_index(space, "pressure")]

    hd = space.head_degree
    _, nodes_h, _, grads_h, Wp = assembly._element_data(space, POROUS, hd,
                                                        _ERROR_DEGREE)
    Xp = assembly._quad_points(space, POROUS, _ERROR_DEGREE)
    GPHI = np.empty(Xp.shape)
    for e in range(Xp.shape[0]):
        for q in range(Xp.shape[1]):
            GPHI[e, q] = case.grad_phi(*Xp[e, q])
    KG = GPHI @ case.K.T
    loch = -np.einsum('eq,eqj,eqlj->el', Wp, KG, grads_h)
    fh = np.zeros(space.num_nodes(hd))
    np.add.at(fh, nodes_h, loch)
    R[space.offset_phi:] += fh[assembly.expanded_index(space, "head")]

    # interface terms of the weak form, subtracted through the same edge
    # quadrature the load path uses: -(phi, v.n) - G (u.tau, v.tau) on the
    # momentum rows and +(u.n_f, psi) on the head rows
    R += assembly.interface_residual_loads(
        space,
        r_mass=lambda x, y: -(np.asarray(case.u(x, y)) @ _N_F),
        r_normal=case.phi,
        r_tangential=lambda x, y: case.G * (np.asarray(case.u(x, y)) @ _TAU))

    return float(np.linalg.norm(R) / max(np.linalg.norm(b), 1e-30))


_ERROR_KEYS = ("err_u_h1", "err_u_l2", "err_p_l2", "err_phi_h1")


class StudyResult:
    """Rows of a refinement study plus observed convergence rates."""

    def __init__(self, case_name, rows):
        self.case_name = case_name
        self.rows = rows

    def rates(self):
        """Observed orders between consecutive levels (h halves each time)."""
        out = {}
        for key in _ERROR_KEYS:
            vals = [r[key] for r in self.rows]
            out["rate_" + key[4:]] = [
                float(np.log2(a / b)) for a, b in zip(vals[:-1], vals[1:])]
        return out

    def final_rates(self):
        return {k: v[-1] for k, v in self.rates().items()}

    def to_csv(self, path):
        rates = self.rates()
        header = ["level", "h"] + list(_ERROR_KEYS) + sorted(rates)
        lines = [",".join(header)]
        for i, row in enumerate(self.rows):
            cells = [str(row["level"]), repr(row["h"])]
            cells += [repr(row[k]) for k in _ERROR_KEYS]
            cells += ["" if i == 0 else repr(rates[k][i - 1])
                      for k in sorted(rates)]
            lines.append(",".join(cells))
        text = "\n".join(lines) + "\n"
        with open(path, "w") as fh:
            fh.write(text)
        return text


def convergence_study(case, num_levels=4, base=(4, 8), config=None,
                      velocity_degree=2, head_degree=1):
    """Solve the case on a refinement sequence and collect the error norms."""
    from .fem import CoupledSpace
    mesh = build_rectangle_mesh(base[0], base[1], 1.0)
    rows = []
    for level in range(num_levels):
        space = CoupledSpace(mesh, velocity_degree=velocity_degree,
                             head_degree=head_degree)
        state = case.solve(space, config)
        errs = solution_errors(space, case, state)
        rows.append({"level": level, "h": mesh.h,
                     "iterations": state.iterations, **errs})
        if level + 1 < num_levels:
            mesh = refine_uniform(mesh)
    return StudyResult(case.name, rows)
