"""Scenario execution: timed events, equilibrium search, objective metrics.

Integration scheme
------------------
The virtual-resistor bus algebra couples every branch current to itself
through R_N, which puts eigenvalues of magnitude ~2 R_N / L (order 1e7 1/s
on this system) into the electrical subsystem. A fully explicit fixed-step
method cannot hold the default 0.2 ms step against those parasitic modes,
so a step is taken as a Strang split:

    controllers: RK4 over h/2 with branch currents frozen
    electrical:  TR-BDF2 (L-stable, one complex LU) over h with controller
                 outputs frozen at the midpoint
    controllers: RK4 over h/2

The electrical block is exactly linear in the complex branch-current vector
(dz/dt = (M - j w_g) z + f), so the implicit stages are plain linear solves
and the parasitic modes are annihilated per step while the physical modes
keep second-order accuracy. Events snap to the step grid and are applied
between steps; runs are bit-deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .config import Scenario, SystemConfig
from .model import (
    ActivationFlags,
    Epoch,
    LiveConditions,
    NmgModel,
    controller_rates,
    full_rhs,
)

TWO_PI = 2.0 * math.pi

# TR-BDF2 with gamma = 2 - sqrt(2): both stages share (I - d*h*A).
_TR_GAMMA = 2.0 - math.sqrt(2.0)
_TR_D = _TR_GAMMA / 2.0
_TR_C1 = 1.0 / (_TR_GAMMA * (2.0 - _TR_GAMMA))
_TR_C0 = (1.0 - _TR_GAMMA) ** 2 / (_TR_GAMMA * (2.0 - _TR_GAMMA))


class NonFiniteState(Exception):
    """Integration produced NaN/Inf; message carries time and channel."""


class NotSettled(Exception):
    """Equilibrium search exhausted its horizon."""


class UnknownId(Exception):
    """An event referenced an id that does not exist."""


class SyncNotReady(Exception):
    """Hard breaker closure attempted outside synchronization tolerance."""


class EmptyWindow(Exception):
    """Metrics window contains no trace samples."""


@dataclass
class Trace:
    """Decimated run record: labeled state snapshots plus derived channels."""

    times: np.ndarray
    states: np.ndarray  # (n_samples, n_state)
    labels: list
    channels: dict  # column name -> array
    column_order: list
    events_applied: list = field(default_factory=list)  # (t, description)

    def window(self, t0: float, t1: float) -> np.ndarray:
        mask = (self.times > t0) & (self.times < t1)
        if not mask.any():
            raise EmptyWindow(f"no samples in ({t0}, {t1})")
        return np.nonzero(mask)[0]

    def last_in_window(self, t0: float, t1: float) -> int:
        return int(self.window(t0, t1)[-1])

    def to_csv(self, path):
        cols = self.column_order
        rows = len(self.times)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            data = [self.channels[c] for c in cols]
            for r in range(rows):
                fh.write(",".join(f"{col[r]:.9g}" for col in data) + "\n")


class Engine:
    """Owns the mutable run state of one simulation."""

    def __init__(self, model: NmgModel, flags: ActivationFlags, dt: float):
        self.model = model
        self.dt = dt
        self.live = model.initial_conditions(flags)
        self.epoch = model.build_epoch(self.live)
        self.warnings: list = []

    # ---------------- events -------------------------------------------------

    def apply_event(self, x: np.ndarray, kind: str, params: dict, t: float):
        """Mutate live conditions (and, for detach events, controller states
        of the detached unit). Returns a short description string."""
        m = self.model
        live = self.live
        if kind == "activate":
            level = params["level"]
            setattr(live.flags, level.lower(), True)
            desc = f"activate {level}"
        elif kind == "scale_load":
            lid = params["load"]
            if lid not in live.load_scale:
                raise UnknownId(f"unknown load {lid!r}")
            live.load_scale[lid] = float(params["factor"])
            desc = f"scale {lid} -> {params['factor']}"
        elif kind == "comm_link":
            layer = params["layer"]
            a, b = params["edge"]
            up = bool(params.get("up", False))
            if layer == "nmg":
                graph = m.cfg.nmg_comm
                links = live.nmg_links
            else:
                try:
                    graph = m.cfg.mg(layer).comm
                except KeyError:
                    raise UnknownId(f"unknown comm layer {layer!r}") from None
                links = live.mg_links[layer]
            try:
                graph.node_index(a), graph.node_index(b)
            except KeyError:
                raise UnknownId(f"unknown comm nodes {a!r}-{b!r}") from None
            if graph.adjacency[graph.node_index(a), graph.node_index(b)] == 0.0 and \
               graph.adjacency[graph.node_index(b), graph.node_index(a)] == 0.0:
                raise UnknownId(f"no link {a!r}-{b!r} in layer {layer!r}")
            links[frozenset((a, b))] = up
            desc = f"link {a}-{b} {'up' if up else 'down'} ({layer})"
        elif kind == "breaker":
            bid = params["id"]
            if bid not in m.breaker_branch:
                raise UnknownId(f"unknown breaker {bid!r}")
            closed = bool(params.get("closed", True))
            if closed:
                if params.get("with_sync", False):
                    live.sync_armed[bid] = True
                    desc = f"arm sync close {bid}"
                else:
                    if not self.sync_ready(x, bid):
                        raise SyncNotReady(
                            f"breaker {bid!r}: sides outside synchronization "
                            f"tolerance; use with_sync"
                        )
                    live.breaker_closed[bid] = True
                    desc = f"close {bid}"
            else:
                live.breaker_closed[bid] = False
                live.sync_armed.pop(bid, None)
                self._zero_detached_states(x, bid)
                desc = f"open {bid}"
        elif kind == "set_reference":
            target = params["target"]
            if target == "f_sys_hz":
                live.f_sys_ref = float(params["value"])
            elif target == "v_crit_pu":
                live.v_crit_ref = float(params["value"])
            else:
                raise UnknownId(f"unknown reference {target!r}")
            desc = f"{target} = {params['value']}"
        else:
            raise UnknownId(f"unknown event kind {kind!r}")

        self.epoch = m.build_epoch(live)
        self._tree_warnings(t)
        return desc

    def _zero_detached_states(self, x: np.ndarray, breaker: str):
        """Secondary/quaternary corrections of a detached unit restart from
        zero; doing the reset at detach keeps reconnection continuous."""
        m = self.model
        row = m.breaker_branch[breaker]
        if row < m.n_dg:
            x[m.ix_Om[row]] = 0.0
            x[m.ix_lam[row]] = 0.0
            x[m.ix_h[row]] = 0.0
        else:
            k = int(np.nonzero(m.mg_pcc_branch == row)[0][0])
            x[m.ix_Omk[k]] = 0.0
            x[m.ix_lamk[k]] = 0.0
            x[m.ix_hk[k]] = 0.0

    def _tree_warnings(self, t: float):
        for mg_id, ok in self.epoch.mg_trees.items():
            if not ok:
                self.warnings.append(
                    (t, f"{mg_id}: no pinned spanning tree in comm graph")
                )
        if not self.epoch.nmg_tree:
            self.warnings.append((t, "NMG layer: no pinned spanning tree"))

    # ---------------- synchronization check ----------------------------------

    def sync_ready(self, x: np.ndarray, breaker: str) -> bool:
        """Strict check of |df|, |dV| and |dphase| across an open breaker."""
        m = self.model
        cfg = m.cfg
        row = m.breaker_branch[breaker]
        if self.epoch.br_closed[row]:
            return True
        meas = self.epoch.measurements(x)
        i_z, v_z, *_ = meas
        omega = m.omega_n - m.dg_dp * x[m.ix_P] + x[m.ix_Om]
        omega_g = omega[m.anchor]
        if row < m.n_dg:
            # DG breaker: source phasor vs its bus voltage
            e_pu = 1.0 - m.dg_dq[row] * x[m.ix_Q[row]] + x[m.ix_lam[row]] + x[m.ix_h[row]]
            v_bus = v_z[m.dg_bus[row]]
            dv = abs(e_pu - abs(v_bus) / m.dg_vbase[row])
            dphase = _wrap_angle(x[m.ix_delta[row]] - np.angle(v_bus))
            df = abs(omega[row] - omega_g) / TWO_PI
        else:
            k = int(np.nonzero(m.mg_pcc_branch == row)[0][0])
            island_dgs = np.nonzero((m.dg_mg == k) & self.epoch.dg_connected)[0]
            remote_dgs = np.nonzero((m.dg_mg != k) & self.epoch.dg_connected)[0]
            df = abs(
                omega[island_dgs].mean() - omega[remote_dgs].mean()
            ) / TWO_PI
            v_isl = v_z[m.mg_pcc_bus[k]]
            v_rem = v_z[m.br_to[row]]
            dv = abs(abs(v_isl) / m.mg_pcc_base[k] - abs(v_rem) / m.bus_base[m.br_to[row]])
            dphase = _wrap_angle(np.angle(v_isl) - np.angle(v_rem))
        return (
            df < cfg.sync_df_max
            and dv < cfg.sync_dv_max
            and abs(dphase) < cfg.sync_dphase_max
        )

    def _service_armed_syncs(self, x: np.ndarray, t: float, log: list):
        for bid in list(self.live.sync_armed):
            if self.sync_ready(x, bid):
                self.live.sync_armed.pop(bid)
                self.live.breaker_closed[bid] = True
                self.epoch = self.model.build_epoch(self.live)
                log.append((t, f"sync close {bid}"))

    # ---------------- one split step ------------------------------------------

    def step(self, x: np.ndarray, t: float) -> np.ndarray:
        m = self.model
        h = self.dt
        x = self._controller_half(x, t, 0.5 * h)
        x = self._electrical_full(x, h)
        x = self._controller_half(x, t + 0.5 * h, 0.5 * h)
        if not np.all(np.isfinite(x)):
            bad = int(np.nonzero(~np.isfinite(x))[0][0])
            raise NonFiniteState(
                f"non-finite state at t={t + h:.6f}s, channel {m.idx.labels[bad]}"
            )
        return x

    def _controller_half(self, x: np.ndarray, t: float, h: float) -> np.ndarray:
        """RK4 on the controller states with branch currents frozen."""
        meas = self.epoch.measurements(x)

        def rates(xs: np.ndarray) -> np.ndarray:
            dx = np.zeros_like(xs)
            controller_rates(self.model, self.epoch, xs, meas, dx)
            return dx

        k1 = rates(x)
        k2 = rates(x + 0.5 * h * k1)
        k3 = rates(x + 0.5 * h * k2)
        k4 = rates(x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def _electrical_full(self, x: np.ndarray, h: float) -> np.ndarray:
        """TR-BDF2 on dz/dt = (M - j w_g) z + f with frozen midpoint inputs."""
        m = self.model
        dx_tmp = np.zeros_like(x)
        meas = self.epoch.measurements(x)
        out = controller_rates(m, self.epoch, x, meas, dx_tmp)
        a = self.epoch.M - 1j * out.omega_g * np.eye(m.n_br)
        f = self.epoch.forcing(out.e_z)
        z0 = x[m.ix_brD] + 1j * x[m.ix_brQ]

        lhs = np.eye(m.n_br) - (_TR_D * h) * a
        lu = scipy.linalg.lu_factor(lhs, check_finite=False)
        rhs1 = z0 + (_TR_D * h) * (a @ z0 + 2.0 * f)
        zg = scipy.linalg.lu_solve(lu, rhs1, check_finite=False)
        rhs2 = _TR_C1 * zg - _TR_C0 * z0 + (_TR_D * h) * f
        z1 = scipy.linalg.lu_solve(lu, rhs2, check_finite=False)

        out_x = x.copy()
        out_x[m.ix_brD] = z1.real
        out_x[m.ix_brQ] = z1.imag
        return out_x


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------- derived channels / trace ------------------------------------


def _channel_names(model: NmgModel) -> list:
    names = ["t", "f_sys_Hz", "V_c_pu"]
    for mid in model.mg_ids:
        names.append(f"P_PCC{_tail(mid)}_kW")
    for mid in model.mg_ids:
        names.append(f"Q_PCC{_tail(mid)}_kvar")
    for did in model.dg_ids:
        names.append(f"P_{_tail(did)}_kW")
    for did in model.dg_ids:
        names.append(f"Q_{_tail(did)}_kvar")
    names += [
        "metric_f_err_Hz",
        "metric_vc_err_pu",
        "metric_p_pcc_spread",
        "metric_q_pcc_spread",
        "metric_p_dg_spread",
        "metric_q_dg_spread",
    ]
    return names


def _tail(ident: str) -> str:
    digits = "".join(ch for ch in ident if ch.isdigit())
    return digits if digits else ident


def _spread(values: np.ndarray) -> float:
    """(max - min) / |mean|, the pairwise-deviation metric of a ratio set."""
    if values.size < 2:
        return 0.0
    mean = np.mean(values)
    denom = max(abs(mean), 1e-12)
    return float((np.max(values) - np.min(values)) / denom)


def derived_row(model: NmgModel, epoch: Epoch, x: np.ndarray, t: float,
                live: LiveConditions) -> list:
    m = model
    meas = epoch.measurements(x)
    v_c_pu = meas[5]
    omega_g = m.omega_n - m.dg_dp[m.anchor] * x[m.ix_P[m.anchor]] + x[m.ix_Om[m.anchor]]
    f_sys = omega_g / TWO_PI
    p_pcc = x[m.ix_Ppcc]
    q_pcc = x[m.ix_Qpcc]
    p_dg = x[m.ix_P]
    q_dg = x[m.ix_Q]

    mg_on = epoch.mg_connected
    dg_on = epoch.dg_connected
    p_ratio = p_pcc[mg_on] / m.mg_pcap[mg_on] if mg_on.any() else np.zeros(0)
    q_ratio = q_pcc[mg_on] / np.array([mg.droop.q_capacity for mg in m.cfg.mgs])[mg_on] \
        if mg_on.any() else np.zeros(0)
    p_dg_spread = 0.0
    q_dg_spread = 0.0
    for k in range(m.n_mg):
        sel = (m.dg_mg == k) & dg_on
        if sel.sum() >= 2:
            p_dg_spread = max(p_dg_spread, _spread(m.dg_dp[sel] * p_dg[sel]))
            q_dg_spread = max(q_dg_spread, _spread(m.dg_dq[sel] * q_dg[sel]))

    row = [t, f_sys, v_c_pu]
    row += list(p_pcc / 1e3) + list(q_pcc / 1e3)
    row += list(p_dg / 1e3) + list(q_dg / 1e3)
    row += [
        abs(f_sys - live.f_sys_ref),
        abs(v_c_pu - live.v_crit_ref),
        _spread(p_ratio),
        _spread(q_ratio),
        p_dg_spread,
        q_dg_spread,
    ]
    return row


# ---------------- public operations --------------------------------------------


def run(scenario: Scenario, x0: np.ndarray | None = None,
        model: NmgModel | None = None, settle: bool = True) -> Trace:
    """Execute a scenario and return its Trace.

    The initial state is the flat-start equilibrium under the levels active
    at t = 0 (unless `x0` is given). Events are snapped to the step grid and
    applied at step boundaries; the run is deterministic.
    """
    model = model or NmgModel(scenario.config)
    flags = ActivationFlags.from_levels(scenario.initial_levels())
    engine = Engine(model, flags, scenario.dt)

    if x0 is None:
        if settle:
            x = find_equilibrium(scenario.config, flags, model=model)
        else:
            x = model.flat_start()
    else:
        x = np.array(x0, dtype=float)

    n_steps = int(round(scenario.t_end / scenario.dt))
    events_by_step: dict = {}
    for ev in scenario.events:
        step_idx = int(round(ev.time / scenario.dt))
        step_idx = min(max(step_idx, 0), n_steps)
        events_by_step.setdefault(step_idx, []).append(ev)

    times, rows, snaps = [], [], []
    applied: list = []

    def record(t, x):
        times.append(t)
        rows.append(derived_row(model, engine.epoch, x, t, engine.live))
        snaps.append(x.copy())

    for step_idx in range(n_steps + 1):
        t = step_idx * scenario.dt
        for ev in events_by_step.get(step_idx, ()):
            desc = engine.apply_event(x, ev.kind, ev.params, t)
            applied.append((t, desc))
        engine._service_armed_syncs(x, t, applied)
        if step_idx % scenario.record_every == 0 or step_idx == n_steps:
            record(t, x)
        if step_idx == n_steps:
            break
        x = engine.step(x, t)

    names = _channel_names(model)
    data = np.asarray(rows)
    channels = {name: data[:, i] for i, name in enumerate(names)}
    return Trace(
        times=np.asarray(times),
        states=np.asarray(snaps),
        labels=model.idx.labels,
        channels=channels,
        column_order=names,
        events_applied=applied,
    )


def find_equilibrium(cfg: SystemConfig, flags: ActivationFlags,
                     model: NmgModel | None = None,
                     x0: np.ndarray | None = None,
                     max_horizon: float = 20.0,
                     rtol: float = 1e-10) -> np.ndarray:
    """Settle the system under fixed activation flags.

    Levels are brought up in commissioning order (primary droop, then
    DSC/TC, then DQC); each stage integrates from the previous stage's
    state until the scaled residual is small enough to hand over to a
    damped Gauss-Newton polish (least-squares steps handle the structurally
    singular directions: the frame-anchor angle and the conserved
    reactive-correction sums). Raises NotSettled if the total simulated
    horizon is exhausted first.
    """
    model = model or NmgModel(cfg)
    stages = [ActivationFlags()]
    if flags.dsc or flags.tc:
        stages.append(ActivationFlags(dsc=flags.dsc, tc=flags.tc))
    if flags.dqc:
        stages.append(ActivationFlags(dsc=flags.dsc, tc=flags.tc, dqc=True))

    x = model.flat_start() if x0 is None else np.array(x0, dtype=float)
    budget = [max_horizon]  # shared across stages
    for stage in stages:
        x = _settle_stage(cfg, model, stage, x, budget, rtol)
    return x


def _settle_stage(cfg, model, flags, x, budget, rtol):
    engine = Engine(model, flags, cfg.dt_default)
    active = model.active_mask(engine.live)
    rscale = model.rate_scale

    def residual_norm(x):
        r = full_rhs(model, engine.epoch, x)
        return np.max(np.abs(r[active]) / rscale[active])

    chunk = max(int(round(0.25 / engine.dt)), 1)
    t = 0.0
    while True:
        rn = residual_norm(x)
        if rn < 1e-8:
            return x
        if rn < 1e-1:
            x_try = _newton_polish(model, engine.epoch, x, active, rtol)
            rn_try = residual_norm(x_try)
            if rn_try < 1e-8:
                return x_try
            if rn_try < rn:
                x, rn = x_try, rn_try
        if budget[0] <= 0.0:
            raise NotSettled(f"residual {rn:.2e} with settling horizon exhausted")
        for _ in range(chunk):
            x = engine.step(x, t)
            t += engine.dt
        budget[0] -= chunk * engine.dt


def _degeneracy_constraints(model, epoch, idx_active):
    """Constraint rows pinning the structurally indeterminate directions.

    The assembled system is rank-deficient at any equilibrium: the frame
    anchor angle is a free constant, the reactive-sharing corrections h are
    only determined up to their (conserved) group sums on symmetric graphs,
    and the quaternary lambda_k/h_k pair enters every equation through its
    sum only. Pinning these at their current values makes the Gauss-Newton
    system well-posed without disturbing the reachable equilibrium."""
    m = model
    pos = {g: k for k, g in enumerate(idx_active)}
    rows = []

    def unit(i):
        v = np.zeros(len(idx_active))
        v[pos[i]] = 1.0
        return v

    if m.ix_delta[m.anchor] in pos:
        rows.append(unit(m.ix_delta[m.anchor]))
    if epoch.live.flags.dsc:
        for k in range(m.n_mg):
            sel = [m.ix_h[i] for i in range(m.n_dg) if m.dg_mg[i] == k]
            if all(i in pos for i in sel):
                v = np.zeros(len(idx_active))
                for i in sel:
                    v[pos[i]] = 1.0
                rows.append(v)
    if epoch.live.flags.dqc:
        v = np.zeros(len(idx_active))
        ok = True
        for k in range(m.n_mg):
            if m.ix_hk[k] not in pos:
                ok = False
                break
            v[pos[m.ix_hk[k]]] = 1.0
        if ok:
            rows.append(v)
        for k in range(m.n_mg):
            if m.ix_lamk[k] in pos and m.ix_hk[k] in pos:
                v = np.zeros(len(idx_active))
                v[pos[m.ix_lamk[k]]] = 1.0
                v[pos[m.ix_hk[k]]] = -1.0
                rows.append(v)
    return np.asarray(rows) if rows else np.zeros((0, len(idx_active)))


def _newton_polish(model, epoch, x, active, rtol, max_iter=60):
    """Levenberg-damped Gauss-Newton on the active subsystem.

    The Jacobian is column-scaled by the state scales and row-equilibrated;
    constraint rows pin the structurally indeterminate directions at their
    current values. The Levenberg parameter adapts so the genuinely weak
    directions (slow PI integrators) are traversed progressively."""
    idx_active = np.nonzero(active)[0]
    rscale = model.rate_scale[idx_active]
    xscale = model.idx.scale[idx_active]
    cons = _degeneracy_constraints(model, epoch, idx_active)

    def res(x):
        return full_rhs(model, epoch, x)[idx_active]

    def try_step(x, dy):
        x_try = x.copy()
        x_try[idx_active] += dy * xscale
        return x_try, res(x_try)

    r = res(x)
    n = len(idx_active)
    for _ in range(max_iter):
        if np.max(np.abs(r) / rscale) <= rtol:
            break
        jac = _numeric_jacobian_active(model, epoch, x, idx_active)
        j_col = jac * xscale[None, :]
        row_mag = np.maximum(np.max(np.abs(j_col), axis=1), 1e-300)
        j_eq = np.vstack([j_col / row_mag[:, None], cons * xscale[None, :]])
        b = np.concatenate([-r / row_mag, np.zeros(len(cons))])
        base = float(np.linalg.norm(r / rscale))
        improved = False

        # full Gauss-Newton step with backtracking
        dy_gn, *_ = np.linalg.lstsq(j_eq, b, rcond=1e-10)
        mag = np.max(np.abs(dy_gn))
        if mag > 1e4:
            dy_gn *= 1e4 / mag
        alpha = 1.0
        while alpha > 1e-3:
            x_try, r_try = try_step(x, alpha * dy_gn)
            if np.linalg.norm(r_try / rscale) < base:
                x, r, improved = x_try, r_try, True
                break
            alpha *= 0.5

        if not improved:
            # Levenberg fallback for the stiff-curvature region
            mu = 1e-3
            jtj = j_eq.T @ j_eq
            jtb = j_eq.T @ b
            for _ in range(10):
                try:
                    dy = np.linalg.solve(jtj + (mu * mu) * np.eye(n), jtb)
                except np.linalg.LinAlgError:  # pragma: no cover
                    break
                x_try, r_try = try_step(x, dy)
                if np.linalg.norm(r_try / rscale) < base:
                    x, r, improved = x_try, r_try, True
                    break
                mu *= 5.0
        if not improved:
            break
    return x


def _numeric_jacobian_active(model, epoch, x, idx_active):
    scale = model.idx.scale
    n = len(idx_active)
    jac = np.empty((n, n))
    for col, j in enumerate(idx_active):
        h = max(1e-6 * abs(x[j]), 1e-9 * scale[j])
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        rp = full_rhs(model, epoch, xp)[idx_active]
        rm = full_rhs(model, epoch, xm)[idx_active]
        jac[:, col] = (rp - rm) / (2.0 * h)
    return jac


def assemble_rhs(cfg: SystemConfig, x: np.ndarray, flags: ActivationFlags,
                 model: NmgModel | None = None,
                 live: LiveConditions | None = None) -> np.ndarray:
    """One-shot dx/dt evaluation under given flags/live conditions."""
    model = model or NmgModel(cfg)
    if live is None:
        live = model.initial_conditions(flags)
    epoch = model.build_epoch(live)
    return full_rhs(model, epoch, x)


def sharing_metrics(trace: Trace, window) -> dict:
    """Objective report over the final sample of [t0, t1]:
    (i) |f - f*|, (ii) |V_c - V_c*|, (iii) spread of the PCC power ratios,
    (iv) worst within-MG spread of the droop-weighted DG powers."""
    t0, t1 = window
    i = trace.last_in_window(t0, t1)
    ch = trace.channels
    return {
        "t": float(trace.times[i]),
        "f_err_hz": float(ch["metric_f_err_Hz"][i]),
        "vc_err_pu": float(ch["metric_vc_err_pu"][i]),
        "p_pcc_spread": float(ch["metric_p_pcc_spread"][i]),
        "q_pcc_spread": float(ch["metric_q_pcc_spread"][i]),
        "p_dg_spread": float(ch["metric_p_dg_spread"][i]),
        "q_dg_spread": float(ch["metric_q_dg_spread"][i]),
    }


def settling_time(trace: Trace, t_event: float, tol: dict,
                  horizon: float = 2.0) -> float:
    """Time after `t_event` at which all four objective metrics enter and
    stay inside tolerance until `t_event + horizon` (or trace end)."""
    t_stop = min(t_event + horizon, trace.times[-1])
    sel = (trace.times >= t_event) & (trace.times <= t_stop)
    idxs = np.nonzero(sel)[0]
    if idxs.size == 0:
        raise EmptyWindow(f"no samples after t={t_event}")
    ch = trace.channels
    ok = np.ones(idxs.size, dtype=bool)
    for key, limit in tol.items():
        ok &= ch[key][idxs] <= limit
    if not ok[-1]:
        return math.inf
    # last violation before the final settled stretch
    bad = np.nonzero(~ok)[0]
    if bad.size == 0:
        return 0.0
    return float(trace.times[idxs[bad[-1] + 1]] - t_event)


def power_balance(model: NmgModel, epoch: Epoch, x: np.ndarray) -> dict:
    """Generated vs consumed active power, losses included (branch I^2 R,
    virtual-resistor leakage, algebraic loads)."""
    m = model
    i_z = x[m.ix_brD] + 1j * x[m.ix_brQ]
    v_z = epoch.bus_voltages_z(i_z)
    e_pu = 1.0 - m.dg_dq * x[m.ix_Q] + x[m.ix_lam] + x[m.ix_h]
    e_z = e_pu * m.dg_vbase * np.exp(1j * x[m.ix_delta])
    p_gen = float(np.sum(1.5 * (e_z * np.conj(i_z[: m.n_dg])).real))

    # every sink is ultimately resistive: branch I^2 R covers lines,
    # transformers, couplings and dynamic loads; the bus conductances cover
    # the virtual-resistor leakage and algebraic loads
    p_branch_loss = float(np.sum(1.5 * m.br_r * np.abs(i_z) ** 2))
    p_rn = float(np.sum(1.5 * np.abs(v_z) ** 2 / m.bus_r_virtual))
    p_alg = 0.0
    for ld in m.alg_loads:
        scale = epoch.live.load_scale.get(ld.load_id, ld.scale)
        v = v_z[m.bus_index[ld.bus_id]]
        p_alg += 1.5 * abs(v) ** 2 * scale / ld.resistance
    return {
        "p_gen": p_gen,
        "p_consumed": p_branch_loss + p_rn + p_alg,
        "mismatch": p_gen - (p_branch_loss + p_rn + p_alg),
    }
