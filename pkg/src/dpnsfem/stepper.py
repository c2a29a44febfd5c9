"""Multirate time integration: r conduit substeps per porous macro step.

Within macro step k the conduit system advances r small steps against
interface data frozen at the macro start, accumulating the running average
of its new velocities; the matrix Darcy system is independent of those
substeps and may run concurrently (fork-join, two workers); the
microfracture system closes the macro step using the completed average.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assembly import DarcyOperator, NsOperator, PhysParams
from .characteristics import trace_quadrature_values
from .fespace import FeSpaces, FieldHandle, build_spaces, l2_project
from .linalg import SolveFailed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    """Nested conduit/porous time grids: n_conduit = r * n_porous."""

    t_final: float
    n_conduit: int
    n_porous: int

    def __post_init__(self):
        if self.t_final <= 0.0:
            raise ValueError("t_final must be positive")
        if self.n_porous < 1 or self.n_conduit < 1:
            raise ValueError("step counts must be positive")
        if self.n_conduit % self.n_porous != 0:
            raise ValueError("time grids must nest: n_conduit = r * n_porous")

    @property
    def r(self) -> int:
        return self.n_conduit // self.n_porous

    @property
    def dt(self) -> float:
        return self.t_final / self.n_conduit

    @property
    def ds(self) -> float:
        return self.t_final / self.n_porous

    def conduit_time(self, n: int) -> float:
        return n * self.t_final / self.n_conduit


def nested_grid(t_final: float, dt_target: float, r: int) -> TimeGrid:
    """Round the conduit step count up to a multiple of r."""
    n = max(1, round(t_final / dt_target))
    n = int(math.ceil(n / r) * r)
    return TimeGrid(t_final, n, n // r)


@dataclass
class State:
    u_c: FieldHandle
    p_c: FieldHandle
    u_f: FieldHandle
    phi_f: FieldHandle
    u_m: FieldHandle
    phi_m: FieldHandle
    n: int = 0
    k: int = 0
    t: float = 0.0
    s_sum: np.ndarray | None = None
    s_count: int = 0
    diagnostics: dict = field(default_factory=dict)

    def fields(self):
        return (self.u_c, self.p_c, self.u_f, self.phi_f, self.u_m, self.phi_m)


def init_state(problem, grids: TimeGrid, spaces: FeSpaces) -> State:
    """All six fields L2-projected from the problem's initial data."""
    proj = {}
    for name, space in (("u_c", "conduit_velocity"), ("p_c", "conduit_pressure"),
                        ("u_f", "fracture_velocity"), ("phi_f", "fracture_pressure"),
                        ("u_m", "matrix_velocity"), ("phi_m", "matrix_pressure")):
        proj[name] = l2_project(spaces, problem.initial(name), space, t=0.0)
    return State(**proj)


class Simulation:
    """Owns the frozen step operators and the mutable state of one run."""

    def __init__(self, problem, grids: TimeGrid, spaces: FeSpaces,
                 workers: int = 1, pin_pressure: bool = False,
                 ns_method: str = "characteristic",
                 newton_tol: float = 1e-8, newton_max_iter: int = 25,
                 track_energy: bool = False):
        if workers not in (1, 2):
            raise ValueError("workers must be 1 or 2")
        if ns_method not in ("characteristic", "newton"):
            raise ValueError("unknown conduit solver method")
        self.problem = problem
        self.grids = grids
        self.spaces = spaces
        self.workers = workers
        self.ns_method = ns_method
        self.newton_tol = newton_tol
        self.newton_max_iter = newton_max_iter
        self.track_energy = track_energy

        params = problem.params
        t0 = time.perf_counter()
        self.ns_op = NsOperator(spaces, params, grids.dt, pin_pressure=pin_pressure)
        self.mat_op = DarcyOperator(spaces, params, grids.ds, "matrix")
        self.frac_op = DarcyOperator(spaces, params, grids.ds, "fracture")
        self.phase = {"setup": 0.0, "factorize": 0.0, "trace": 0.0,
                      "assemble": 0.0, "solve_conduit": 0.0, "solve_porous": 0.0}
        self.phase["setup"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        if ns_method == "characteristic":
            self.ns_op.frozen()
        self.mat_op.frozen()
        self.frac_op.frozen()
        self.phase["factorize"] = time.perf_counter() - t0

        self.state = init_state(problem, grids, spaces)
        self.state.s_sum = np.zeros(spaces.mini.n_velocity)
        self.history: list[dict] = []
        self._energy_acc = {"grad_u_c": 0.0, "u_f": 0.0, "u_m": 0.0}
        self._pool = ThreadPoolExecutor(max_workers=2) if workers == 2 else None

    # -- tasks ---------------------------------------------------------------

    def _conduit_task(self, u_c, phi_f_lag, u_f_lag, n0: int):
        """Run the r conduit substeps; returns final fields and the S sum."""
        g = self.grids
        mini = self.spaces.mini
        s_sum = np.zeros(mini.n_velocity)
        clamped = 0
        p_c = self.state.p_c
        for n in range(n0, n0 + g.r):
            t_next = g.conduit_time(n + 1)
            if self.ns_method == "characteristic":
                t0 = time.perf_counter()
                uhat, nc = trace_quadrature_values(self.spaces, u_c,
                                                   self.ns_op.qpts, g.dt)
                clamped += nc
                t1 = time.perf_counter()
                rhs = self.ns_op.assemble_rhs(self.problem, t_next, uhat,
                                              phi_f_lag, u_f_lag)
                vals = self.ns_op.dirichlet_values(self.problem, t_next)
                t2 = time.perf_counter()
                sol = self.ns_op.frozen().solve(rhs, vals)
                t3 = time.perf_counter()
                self.phase["trace"] += t1 - t0
                self.phase["assemble"] += t2 - t1
                self.phase["solve_conduit"] += t3 - t2
            else:
                sol, _ = newton_ns_baseline_step(
                    self.ns_op, self.problem, u_c, p_c, t_next,
                    phi_f_lag, u_f_lag, tol=self.newton_tol,
                    max_iter=self.newton_max_iter, phase=self.phase)
            nv = mini.n_velocity
            u_c = FieldHandle("conduit_velocity", sol[:nv], t_next)
            p_c = FieldHandle("conduit_pressure", sol[nv:], t_next)
            s_sum += u_c.coeffs
            if self.track_energy:
                from .postprocess import velocity_seminorm_sq
                self._energy_acc["grad_u_c"] += \
                    self.problem.params.nu * g.dt * velocity_seminorm_sq(
                        self.spaces, u_c.coeffs)
        return u_c, p_c, s_sum, clamped

    def _matrix_task(self, phi_m_old, phi_f_lag, t_next):
        t0 = time.perf_counter()
        rhs = self.mat_op.assemble_rhs(self.problem, t_next, phi_m_old, phi_f_lag)
        vals = self.mat_op.essential_values(self.problem, t_next)
        t1 = time.perf_counter()
        sol = self.mat_op.frozen().solve(rhs, vals)
        t2 = time.perf_counter()
        self.phase["assemble"] += t1 - t0
        self.phase["solve_porous"] += t2 - t1
        nu_d = self.spaces.darcy.n_u
        return (FieldHandle("matrix_velocity", sol[:nu_d], t_next),
                FieldHandle("matrix_pressure", sol[nu_d:], t_next))

    def _fracture_step(self, phi_f_old, phi_m_lag, s_avg, t_next):
        t0 = time.perf_counter()
        rhs = self.frac_op.assemble_rhs(self.problem, t_next, phi_f_old,
                                        phi_m_lag, s_avg=s_avg)
        vals = self.frac_op.essential_values(self.problem, t_next)
        t1 = time.perf_counter()
        sol = self.frac_op.frozen().solve(rhs, vals)
        t2 = time.perf_counter()
        self.phase["assemble"] += t1 - t0
        self.phase["solve_porous"] += t2 - t1
        nu_d = self.spaces.darcy.n_u
        return (FieldHandle("fracture_velocity", sol[:nu_d], t_next),
                FieldHandle("fracture_pressure", sol[nu_d:], t_next))

    # -- macro loop ------------------------------------------------------------

    def advance_macro_step(self) -> State:
        st = self.state
        g = self.grids
        n0 = st.k * g.r
        t_next = g.conduit_time(n0 + g.r)
        phi_f_lag, u_f_lag, phi_m_lag = st.phi_f, st.u_f, st.phi_m

        try:
            if self._pool is not None:
                fut_c = self._pool.submit(self._conduit_task, st.u_c,
                                          phi_f_lag, u_f_lag, n0)
                fut_m = self._pool.submit(self._matrix_task, st.phi_m,
                                          phi_f_lag, t_next)
                u_c, p_c, s_sum, clamped = fut_c.result()
                u_m, phi_m = fut_m.result()
            else:
                u_c, p_c, s_sum, clamped = self._conduit_task(
                    st.u_c, phi_f_lag, u_f_lag, n0)
                u_m, phi_m = self._matrix_task(st.phi_m, phi_f_lag, t_next)

            s_avg = s_sum / g.r
            u_f, phi_f = self._fracture_step(st.phi_f, phi_m_lag, s_avg, t_next)
        except SolveFailed as exc:
            raise SolveFailed(
                f"macro step {st.k} (t -> {t_next:.6g}) failed: {exc}",
                exc.residual) from exc

        st.u_c, st.p_c = u_c, p_c
        st.u_f, st.phi_f = u_f, phi_f
        st.u_m, st.phi_m = u_m, phi_m
        st.n = n0 + g.r
        st.k += 1
        st.t = t_next
        st.s_sum = np.zeros_like(st.s_sum)
        st.s_count = 0
        st.diagnostics["clamped_feet"] = st.diagnostics.get("clamped_feet", 0) + clamped

        record = {"k": st.k, "t": st.t, "clamped": clamped}
        if self.track_energy:
            from .postprocess import energy_monitor
            mon = energy_monitor(self.spaces, st, self.problem.params, g)
            self._energy_acc["u_f"] += 2 * self.problem.params.mu * g.ds \
                / (self.problem.params.rho * self.problem.params.k_f) * mon["u_f_sq"]
            self._energy_acc["u_m"] += 2 * self.problem.params.mu * g.ds \
                / (self.problem.params.rho * self.problem.params.k_m) * mon["u_m_sq"]
            mon.update({f"acc_{k}": v for k, v in self._energy_acc.items()})
            total = sum(v for v in mon.values())
            if not np.isfinite(total):
                raise SolveFailed(f"energy monitor not finite at macro step {st.k}")
            record["energy"] = mon
        self.history.append(record)
        log.debug("macro step %d: t=%.6g clamped=%d", st.k, st.t, clamped)
        return st

    def run(self, callbacks=()) -> State:
        for _ in range(self.grids.n_porous - self.state.k):
            self.advance_macro_step()
            for cb in callbacks:
                cb(self.state)
        if self._pool is not None:
            self._pool.shutdown()
        return self.state


def run(problem, grids: TimeGrid, spaces: FeSpaces, callbacks=(),
        **kwargs) -> tuple[State, list[dict]]:
    """Run the full multirate loop; returns final state and per-step records."""
    sim = Simulation(problem, grids, spaces, **kwargs)
    sim.run(callbacks)
    return sim.state, sim.history


def advance_macro_step(state: State, problem, grids: TimeGrid,
                       spaces: FeSpaces, **kwargs) -> State:
    """One macro step on a standalone state (operators rebuilt per call)."""
    sim = Simulation(problem, grids, spaces, **kwargs)
    sim.state = state
    return sim.advance_macro_step()


# -- Newton baseline ---------------------------------------------------------


class NewtonFailed(SolveFailed):
    def __init__(self, residuals):
        super().__init__(f"Newton did not converge: residuals {residuals}")
        self.residuals = residuals


def _newton_quadrature(op: NsOperator):
    if not hasattr(op, "_newton_cache"):
        from .quadrature import make_quadrature
        mini = op.spaces.mini
        rule = make_quadrature(8)
        tris = op.spaces.mesh.triangles[mini.tri_ids]
        pts = np.einsum("qk,nkc->nqc", rule.points, op.spaces.mesh.vertices[tris])
        w = 2.0 * mini.area[:, None] * rule.weights[None, :]
        from .fespace import mini_values
        bas = mini_values(rule.points)
        elems = np.arange(mini.n_tri)
        lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)
        grads = mini.basis_gradients(elems[:, None], lam)
        op._newton_cache = (rule, pts, w, bas, grads)
    return op._newton_cache


def _convection_matrices(op: NsOperator, vel: np.ndarray, jacobian: bool):
    """C holds ((u.grad) phi_j, phi_i); D holds the cross blocks
    (phi_j d u_c / d x_c', phi_i) of the Newton linearization."""
    from .linalg import TripletBuilder

    mini = op.spaces.mini
    rule, pts, w, bas, grads = _newton_quadrature(op)
    elems = np.arange(mini.n_tri)
    lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)
    u = mini.velocity_at(vel, elems[:, None], lam)
    adv = np.einsum("nqc,nqjc->nqj", u, grads)
    cloc = np.einsum("nq,nqj,qi->nij", w, adv, bas)
    vd = mini.elem_vdofs
    rows = np.repeat(vd, 4, axis=1).ravel()
    cols = np.tile(vd, (1, 4)).ravel()
    tb = TripletBuilder(op.n_dofs, op.n_dofs)
    for comp in range(2):
        off = comp * mini.n_scalar
        tb.add(rows + off, cols + off, cloc.ravel())
    C = tb.compress().to_scipy()
    if not jacobian:
        return C, None
    gradu = mini.velocity_gradient_at(vel, elems[:, None], lam)
    tb = TripletBuilder(op.n_dofs, op.n_dofs)
    for ci in range(2):
        for cj in range(2):
            dloc = np.einsum("nq,qj,qi->nij", w * gradu[..., ci, cj], bas, bas)
            tb.add(rows + ci * mini.n_scalar, cols + cj * mini.n_scalar,
                   dloc.ravel())
    return C, tb.compress().to_scipy()


def newton_ns_baseline_step(op: NsOperator, problem, u_c_old: FieldHandle,
                            p_c_old: FieldHandle, t_next: float,
                            phi_f_lag: FieldHandle, u_f_lag: FieldHandle,
                            tol: float = 1e-8, max_iter: int = 25,
                            phase: dict | None = None):
    """Fully implicit conduit substep solved by Newton iteration.

    Same spaces and interface terms as the decoupled characteristic step,
    but with the convective term kept on the left and the plain
    backward-Euler difference quotient on the right.
    """
    if tol <= 0.0 or max_iter < 1:
        raise ValueError("tol must be positive and max_iter >= 1")
    import scipy.sparse as sp

    from .assembly import SparseMatrix, _eliminate
    from .linalg import LuSolver

    mini = op.spaces.mini
    rule, pts, w, bas, grads = _newton_quadrature(op)
    elems = np.arange(mini.n_tri)
    lam = np.broadcast_to(rule.points, (mini.n_tri,) + rule.points.shape)

    t0 = time.perf_counter()
    u_at = mini.velocity_at(u_c_old.coeffs, elems[:, None], lam)
    # step-1 rhs with the untransported old velocity: gives
    # (f_c, v) + (u_old/dt, v) + interface loads
    rhs = op.assemble_rhs(problem, t_next, u_at, phi_f_lag, u_f_lag,
                          quad=(pts, w, bas))

    cdofs = op.dirichlet_dofs
    cvals = op.dirichlet_values(problem, t_next)
    A0 = op.matrix.to_scipy()

    U = np.concatenate([u_c_old.coeffs, p_c_old.coeffs])
    if len(cdofs):
        U[cdofs] = cvals
    if phase is not None:
        phase["assemble"] += time.perf_counter() - t0

    residuals = []
    it = 0
    while True:
        t0 = time.perf_counter()
        C, _ = _convection_matrices(op, U[:mini.n_velocity], jacobian=False)
        F = (A0 + C) @ U - rhs
        if len(cdofs):
            F[cdofs] = 0.0
        res = float(np.linalg.norm(F))
        residuals.append(res)
        if phase is not None:
            phase["assemble"] += time.perf_counter() - t0
        if it > 0 and res <= tol:
            return U, it
        if it >= max_iter:
            raise NewtonFailed(residuals)
        t0 = time.perf_counter()
        _, D = _convection_matrices(op, U[:mini.n_velocity], jacobian=True)
        J = A0 + C + D
        if len(cdofs):
            J, _ = _eliminate(J.tocsr(), cdofs)
        t1 = time.perf_counter()
        delta = LuSolver(SparseMatrix(J.tocsr())).solve(-F)
        U = U + delta
        it += 1
        if phase is not None:
            phase["assemble"] += t1 - t0
            phase["solve_conduit"] += time.perf_counter() - t1
