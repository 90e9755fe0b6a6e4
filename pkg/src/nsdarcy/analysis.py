"""Numerical verification toolkit: energy estimates, interface-transport
compensation, inf-sup constants, and small-data uniqueness checks.

All reports expose ``to_dict()`` returning a flat JSON-serializable dict
with stable key names.
"""

import numpy as np
from scipy.linalg import eigh
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

from . import assembly
from .mesh import FLUID, POROUS
from .solver import SolverConfig, solve_auxiliary, solve_coupled

__all__ = ["EnergyReport", "CompensationReport", "InfSupResult",
           "UniquenessReport", "dual_norm_fluid", "dual_norm_porous",
           "uniqueness_number", "verify_energy_estimate",
           "compensation_residual", "aux_flux_agreement", "compute_inf_sup",
           "check_uniqueness"]


def _riesz(A, b):
    """Solve A z = b and return (z, sqrt(b . z)); A must be SPD."""
    if not len(b):
        return b, 0.0
    z = splu(csc_matrix(A)).solve(b)
    val = float(b @ z)
    return z, float(np.sqrt(max(val, 0.0)))


def dual_norm_fluid(space, params):
    """Dual norm of the fluid load: sup (g_f, v) / ||D(v)|| over the
    discrete fluid velocity space, via a Riesz solve."""
    if params.g_f is None:
        return 0.0
    b = assembly.load_vector(space, params)[:space.offset_p]
    A = assembly.strain_matrix(space, FLUID)
    return _riesz(A, b)[1]


def dual_norm_porous(space, params):
    """Dual norm of the porous source: sup (g_p, psi) / ||K^1/2 grad(psi)||."""
    if params.g_p is None:
        return 0.0
    b = assembly.load_vector(space, params)[space.offset_phi:]
    A = assembly.darcy_matrix(space, params)
    return _riesz(A, b)[1]


def uniqueness_number(space, params):
    """Small-data functional nu^-2 ||g_f||_* + nu^-3/2 lambda_min^-1/2 ||g_p||_*.

    Values small against one indicate the convective perturbation is
    dominated by the dissipation, the regime with a unique solution.
    """
    gf = dual_norm_fluid(space, params)
    gp = dual_norm_porous(space, params)
    return (gf / params.nu ** 2
            + gp / (params.nu ** 1.5 * np.sqrt(params.lambda_min)))


class EnergyReport:
    """Every quantity of the a priori theory at one discrete solution.

    ``e_*`` are the energies (viscous, Darcy, companion, slip), ``dual_g*``
    the load dual norms, ``C_sq`` the reference bound
    ``nu^-1 dual_gf^2 + lambda_min^-1 dual_gp^2``, and
    ``bound_ratio = (e_fluid + e_darcy) / C_sq`` the measured constant of
    the a priori estimate, flagged against ``c_mult``.
    """

    _fields = ("e_fluid", "e_darcy", "e_aux", "e_bjs", "dual_gf", "dual_gp",
               "C_sq", "bound_ratio", "uniqueness_number", "pressure_norm",
               "pressure_dual", "beta", "gamma_term", "compensation_residual",
               "balance_defect_rel", "bound_ok", "c_mult", "load_work",
               "h", "nu", "slip_coefficient", "lambda_min", "lambda_max")

    def __init__(self, **kw):
        for f in self._fields:
            setattr(self, f, kw.pop(f))
        if kw:
            raise TypeError(f"unexpected fields {sorted(kw)}")

    def to_dict(self):
        out = {}
        for f in self._fields:
            v = getattr(self, f)
            out[f] = bool(v) if f == "bound_ok" else float(v)
        return out


def verify_energy_estimate(space, params, state, c_mult=4.0,
                           with_inf_sup=True, with_companion=True):
    """Check the discrete energy balance and the a priori energy bound.

    The balance identity (exact at the discrete solution up to solver and
    rounding error) reads

        2 nu ||D(u)||^2 + ||K^1/2 grad(phi)||^2 + G ||u.tau||^2 + gamma(u)
            = (g_f, u) + (g_p, phi),

    where gamma(u) is half the interface flux of the kinetic energy.  The a
    priori estimate is checked as e_fluid + e_darcy <= c_mult * C_sq with
    the dual norms computed by discrete Riesz solves.

    ``with_inf_sup`` and ``with_companion`` skip the eigensolve (dense, for
    modest meshes) and the companion solve (needs the solution trace to
    vanish at the interface endpoints); the corresponding report fields
    become nan.
    """
    u_raw = state.u_raw(space)
    phi_raw = state.phi_raw(space)
    strain = assembly.strain_energy(space, u_raw, FLUID)
    darcy = assembly.darcy_energy(space, phi_raw, params)
    bjs = assembly.bjs_energy(space, u_raw, coefficient=params.G)
    gamma = assembly.gamma_term(space, u_raw)
    work = assembly.load_value(space, params, u_raw, phi_raw)

    balance = 2 * params.nu * strain + darcy + bjs + gamma - work
    scale = max(abs(work), 2 * params.nu * strain + darcy + bjs, 1e-30)

    gf = dual_norm_fluid(space, params)
    gp = dual_norm_porous(space, params)
    c_sq = gf ** 2 / params.nu + gp ** 2 / params.lambda_min
    e_fluid = params.nu * strain
    lhs = e_fluid + darcy
    ratio = lhs / c_sq if c_sq > 0 else (0.0 if lhs == 0 else np.inf)

    # pressure stability: ||p|| <= beta^-1 * sup_v (p, div v)/||D(v)||, the
    # supremum evaluated from the discrete momentum residual
    Mp = assembly.pressure_mass_matrix(space)
    p_norm = float(np.sqrt(max(state.p @ (Mp @ state.p), 0.0)))
    ell = _pressure_pairing_functional(space, params, state)
    _, p_dual = _riesz(assembly.strain_matrix(space, FLUID), ell)

    beta = compute_inf_sup(space).beta if with_inf_sup else np.nan
    if with_companion:
        comp = compensation_residual(space, params, state=state)
        e_aux, comp_res = comp.energy_aux, comp.residual
    else:
        e_aux = comp_res = np.nan

    return EnergyReport(
        e_fluid=e_fluid, e_darcy=darcy, e_aux=e_aux, e_bjs=bjs,
        dual_gf=gf, dual_gp=gp, C_sq=c_sq, bound_ratio=ratio,
        uniqueness_number=(gf / params.nu ** 2
                           + gp / (params.nu ** 1.5
                                   * np.sqrt(params.lambda_min))),
        pressure_norm=p_norm, pressure_dual=p_dual, beta=beta,
        gamma_term=gamma, compensation_residual=comp_res,
        balance_defect_rel=abs(balance) / scale,
        bound_ok=bool(ratio <= c_mult), c_mult=c_mult, load_work=work,
        h=space.mesh.h, nu=params.nu, slip_coefficient=params.G,
        lambda_min=params.lambda_min, lambda_max=params.lambda_max)


def _pressure_pairing_functional(space, params, state):
    """Free-velocity vector of (p, div v) recovered from the momentum rows:
    (p, div v) = (g_f, v) - 2 nu (D(u), D(v)) - N(u)[u, v] - G (u.t, v.t)
                 - (phi, v.n); exact at the discrete solution."""
    u_raw = state.u_raw(space)
    ue = u_raw.ravel()
    iu = assembly.expanded_index(space, "velocity")
    b = assembly.load_vector(space, params)[:space.offset_p]
    A = (assembly.strain_matrix(space, FLUID, expanded=True,
                                coefficient=2 * params.nu)
         + assembly.bjs_matrix(space, coefficient=params.G, expanded=True)
         + assembly.convection_matrix(space, u_raw, expanded=True))
    Cup = assembly.interface_coupling_matrix(space, expanded=True)
    fe = space.head_node_values(state.phi)
    return b - (A @ ue)[iu] - (Cup @ fe)[iu]


class CompensationReport:
    """Interface-transport compensation through the porous companion field."""

    _fields = ("t_fluid", "t_porous", "residual", "identity_defect",
               "sigma", "energy_aux", "wind_flux_defect")

    def __init__(self, **kw):
        for f in self._fields:
            setattr(self, f, kw.pop(f))
        if kw:
            raise TypeError(f"unexpected fields {sorted(kw)}")

    def to_dict(self):
        return {f: float(getattr(self, f)) for f in self._fields}


def compensation_residual(space, params, state=None, trace=None, wind=None,
                          sigma=None, aux=None):
    """How exactly the companion problem cancels the interface transport.

    The fluid-side term ``t_fluid = 1/2 int_Gamma |u_ph|^2 (w . n_f)``
    coincides with the skew convection term of the coupled solution tested
    with itself when the wind carries the solution trace (the default
    lifting does).  The porous-side term is the plain convection form of
    the companion solve tested with itself.  Their sum equals
    ``-1/2 (div w, |u_ph|^2)`` identically, so it vanishes to rounding for
    an exactly divergence-free wind, and the normalized residual
    ``|t_fluid + t_porous| / max(1, |t_fluid|)`` shrinks under refinement
    for the weakly divergence-free lifting wind.
    """
    if aux is None:
        aux = solve_auxiliary(space, params, state=state, trace=trace,
                              wind=wind, sigma=sigma)
    uph = space.aux_node_values(aux.coeffs)
    t_fluid = 0.5 * assembly.interface_uv_flux(space, uph, uph, aux.wind_raw)
    t_porous = assembly.convection_value(space, aux.wind_raw, uph, uph,
                                         POROUS, skew=False)
    residual = abs(t_fluid + t_porous) / max(1.0, abs(t_fluid))
    identity = abs(t_fluid + t_porous
                   + 0.5 * assembly.divdot_value(space, aux.wind_raw, uph, uph,
                                                 POROUS))
    return CompensationReport(
        t_fluid=t_fluid, t_porous=t_porous, residual=residual,
        identity_defect=identity, sigma=aux.sigma,
        energy_aux=aux.sigma * assembly.strain_energy(space, uph, POROUS),
        wind_flux_defect=(aux.lifting.flux_defect
                          if aux.lifting is not None else np.nan))


def aux_flux_agreement(space, aux):
    """Relative gap between the companion boundary pairing evaluated through
    the assembled matrix and through independent quadrature of its energy
    form; a direct check on the companion linear solve."""
    uph = space.aux_node_values(aux.coeffs)
    via_matrix = float(aux.coeffs @ (aux.matrix @ aux.coeffs))
    via_quadrature = (2 * aux.sigma * assembly.strain_energy(space, uph, POROUS)
                      + assembly.convection_value(space, aux.wind_raw, uph, uph,
                                                  POROUS, skew=False))
    return abs(via_matrix - via_quadrature) / max(1.0, abs(via_quadrature))


class InfSupResult:
    _fields = ("beta", "lambda_min", "velocity_dim", "pressure_dim", "h")

    def __init__(self, **kw):
        for f in self._fields:
            setattr(self, f, kw.pop(f))

    def to_dict(self):
        out = {f: float(getattr(self, f)) for f in self._fields}
        out["velocity_dim"] = int(self.velocity_dim)
        out["pressure_dim"] = int(self.pressure_dim)
        return out


def compute_inf_sup(space):
    """Discrete inf-sup constant of the velocity/pressure pairing.

    beta^2 is the smallest eigenvalue of the Schur pencil
    B A^-1 B^T q = lambda M q restricted to mean-free pressures, with A the
    velocity strain matrix, B the divergence pairing, and M the pressure
    mass matrix.  Dense eigensolve: intended for modest meshes.
    """
    A = assembly.strain_matrix(space, FLUID)
    B = assembly.divergence_matrix(space)
    M = assembly.pressure_mass_matrix(space)
    m = assembly.pressure_mean_vector(space)
    np_ = space.num_pressure_dofs
    # basis of the mean-free subspace: q_i - (m_i / m_0) q_0
    E = np.zeros((np_, np_ - 1))
    E[1:, :] = np.eye(np_ - 1)
    E[0, :] = -m[1:] / m[0]
    lu = splu(csc_matrix(A))
    Bt = B.toarray().T
    S = B @ lu.solve(Bt)
    SE = E.T @ S @ E
    ME = E.T @ (M @ E)
    lams = eigh(SE, ME, eigvals_only=True)
    lam_min = float(lams[0])
    return InfSupResult(beta=float(np.sqrt(max(lam_min, 0.0))),
                        lambda_min=lam_min,
                        velocity_dim=space.num_velocity_dofs,
                        pressure_dim=np_ - 1, h=space.mesh.h)


class UniquenessReport:
    _fields = ("uniqueness_number", "c_mult", "threshold", "energy_norm",
               "energy_distance", "relative_distance", "verdict",
               "iterations_zero_start", "iterations_random_start")

    def __init__(self, **kw):
        for f in self._fields:
            setattr(self, f, kw.pop(f))

    def to_dict(self):
        out = {}
        for f in self._fields:
            v = getattr(self, f)
            out[f] = v if isinstance(v, str) else (
                int(v) if f.startswith("iterations") else float(v))
        return out


def _energy_norm(space, params, du, dphi):
    u_raw = space.velocity_node_values(du)
    phi_raw = space.head_node_values(dphi)
    return float(np.sqrt(params.nu * assembly.strain_energy(space, u_raw, FLUID)
                         + assembly.darcy_energy(space, phi_raw, params)))


def check_uniqueness(space, params, c_mult=4.0, seed=0, config=None,
                     dirichlet=None, extra_loads=None):
    """Two-start uniqueness experiment.

    Solves once from the zero initial state and once from a seeded random
    state with unit velocity seminorm, and compares the solutions in the
    energy norm.  The small-data condition is
    ``uniqueness_number * c_mult < 1``; the verdict is "unique" when it
    holds and the solutions agree within 1e-8 relative, "violated" when it
    holds but they differ, "inconclusive" when the condition fails.
    """
    config = config or SolverConfig()
    num = uniqueness_number(space, params)
    s0 = solve_coupled(space, params, config, dirichlet=dirichlet,
                       extra_loads=extra_loads)

    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(space.num_total_dofs)
    u0, p0, f0 = space.split_state(x0)
    nrm = np.sqrt(assembly.strain_energy(
        space, space.velocity_node_values(u0), FLUID))
    if nrm > 0:
        u0 /= nrm
    s1 = solve_coupled(space, params, config, dirichlet=dirichlet,
                       initial_state=x0, extra_loads=extra_loads)

    dist = _energy_norm(space, params, s0.u - s1.u, s0.phi - s1.phi)
    size = max(_energy_norm(space, params, s0.u, s0.phi), 1e-30)
    rel = dist / size
    if num * c_mult >= 1.0:
        verdict = "inconclusive"
    elif rel <= 1e-8:
        verdict = "unique"
    else:
        verdict = "violated"
    return UniquenessReport(
        uniqueness_number=num, c_mult=c_mult, threshold=1.0 / c_mult,
        energy_norm=size, energy_distance=dist, relative_distance=rel,
        verdict=verdict, iterations_zero_start=s0.iterations,
        iterations_random_start=s1.iterations)
