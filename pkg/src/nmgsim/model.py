"""Assembled nonlinear model of one NMG system.

Builds numpy-vectorized structures from a SystemConfig:

  * a labeled flat state vector (per-DG blocks in the order
    delta, P, Q, Omega, lambda, h, i_oD, i_oQ; then per-MG unit blocks
    P_pcc, Q_pcc, Omega, lambda, h, psi; the global psi; then transformer,
    line and dynamic-load DQ current pairs),
  * a unified branch table covering DG coupling branches, transformers,
    lines and dynamic loads, with the virtual-resistor bus algebra folded
    into one per-axis matrix M so that the electrical substate obeys
    dz/dt = (M - j*omega_g) z + forcing in complex D+jQ form,
  * the full right-hand side dx/dt = f(x) used by the equilibrium finder
    and the numerical linearization.

Mutable run-time aspects (breakers, load scales, comm link status,
activation flags, references) live in LiveConditions; everything derived
from them is cached in an Epoch and rebuilt only when an event fires.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import SystemConfig
from .control import pinned_consensus_rate
from .plant import transformer_equivalent

# Branch kinds in the unified table.
KIND_DG = 0
KIND_TRANSFORMER = 1
KIND_LINE = 2
KIND_LOAD = 3

# Self-discharge rate floor for branches isolated by an open breaker (1/s).
DETACHED_DECAY_MIN = 50.0


@dataclass
class ActivationFlags:
    dsc: bool = False
    tc: bool = False
    dqc: bool = False

    @classmethod
    def from_levels(cls, levels) -> "ActivationFlags":
        levels = set(levels)
        return cls(dsc="DSC" in levels, tc="TC" in levels, dqc="DQC" in levels)


class StateIndex:
    """Label <-> position map of the flat state vector."""

    def __init__(self, cfg: SystemConfig):
        self.labels: list[str] = []
        self.groups: list[tuple[str, str, str]] = []  # (layer, element, kind)
        self.scales: list[float] = []

        def add(label, layer, element, kind, scale):
            self.labels.append(label)
            self.groups.append((layer, element, kind))
            self.scales.append(scale)

        v_pu = 0.05  # typical per-unit correction scale
        self.dg_ids, self.mg_ids = [], []
        for mg in cfg.mgs:
            self.mg_ids.append(mg.mg_id)
            for dg in mg.dgs:
                self.dg_ids.append(dg.dg_id)
                base = cfg.level_bases[cfg.bus_levels[dg.bus]]
                i_scale = dg.droop.p_capacity / (1.5 * base)
                add(f"{dg.dg_id}.delta", "MG", dg.dg_id, "delta", 1.0)
                add(f"{dg.dg_id}.P", "MG", dg.dg_id, "P", dg.droop.p_capacity)
                add(f"{dg.dg_id}.Q", "MG", dg.dg_id, "Q", dg.droop.q_capacity)
                add(f"{dg.dg_id}.Omega", "MG", dg.dg_id, "Omega", 2 * math.pi)
                add(f"{dg.dg_id}.lambda", "MG", dg.dg_id, "lambda", v_pu)
                add(f"{dg.dg_id}.h", "MG", dg.dg_id, "h", v_pu)
                add(f"{dg.dg_id}.ioD", "MG", dg.dg_id, "ioD", i_scale)
                add(f"{dg.dg_id}.ioQ", "MG", dg.dg_id, "ioQ", i_scale)
        for mg in cfg.mgs:
            add(f"{mg.mg_id}.P_pcc", "NMG", mg.mg_id, "P_pcc", mg.droop.p_capacity)
            add(f"{mg.mg_id}.Q_pcc", "NMG", mg.mg_id, "Q_pcc", mg.droop.q_capacity)
            add(f"{mg.mg_id}.Omega", "NMG", mg.mg_id, "Omega", 2 * math.pi)
            add(f"{mg.mg_id}.lambda", "NMG", mg.mg_id, "lambda", v_pu)
            add(f"{mg.mg_id}.h", "NMG", mg.mg_id, "h", v_pu)
            add(f"{mg.mg_id}.psi", "NMG", mg.mg_id, "psi", 0.1)
        add("psi", "NMG", "critical", "psi", 0.1)

        i_mv = 100e3 / (1.5 * max(cfg.level_bases.values()))
        for spec, hv, lv, _ in cfg.transformers:
            base = cfg.level_bases[cfg.bus_levels[lv]]
            s = spec.rating_va / (10.0 * 1.5 * base)
            add(f"{spec.transformer_id}.iD", "network", spec.transformer_id, "iD", s)
            add(f"{spec.transformer_id}.iQ", "network", spec.transformer_id, "iQ", s)
        for ln in cfg.lines:
            base = cfg.level_bases[ln.voltage_level]
            s = max(i_mv, 100e3 / (1.5 * base))
            add(f"{ln.line_id}.iD", "network", ln.line_id, "iD", s)
            add(f"{ln.line_id}.iQ", "network", ln.line_id, "iQ", s)
        self.dyn_loads = [ld for ld in cfg.loads if ld.is_dynamic]
        for ld in self.dyn_loads:
            base = cfg.level_bases[cfg.bus_levels[ld.bus_id]]
            s = 100e3 / (1.5 * base)
            add(f"{ld.load_id}.iD", "network", ld.load_id, "iD", s)
            add(f"{ld.load_id}.iQ", "network", ld.load_id, "iQ", s)

        self.n = len(self.labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        self.scale = np.asarray(self.scales)

    def of(self, label: str) -> int:
        return self.index[label]

    def select(self, kind: str, layer: str | None = None) -> np.ndarray:
        return np.array(
            [
                i
                for i, (lay, _, k) in enumerate(self.groups)
                if k == kind and (layer is None or lay == layer)
            ],
            dtype=int,
        )


@dataclass
class LiveConditions:
    """Everything an event can change."""

    flags: ActivationFlags
    breaker_closed: dict  # breaker id -> bool
    load_scale: dict  # load id -> float
    mg_links: dict  # mg_id -> {frozenset edge -> bool}
    nmg_links: dict  # {frozenset edge -> bool}
    f_sys_ref: float  # Hz
    v_crit_ref: float  # p.u.
    sync_armed: dict = field(default_factory=dict)  # breaker id -> True

    def copy(self) -> "LiveConditions":
        return LiveConditions(
            flags=replace(self.flags),
            breaker_closed=dict(self.breaker_closed),
            load_scale=dict(self.load_scale),
            mg_links={k: dict(v) for k, v in self.mg_links.items()},
            nmg_links=dict(self.nmg_links),
            f_sys_ref=self.f_sys_ref,
            v_crit_ref=self.v_crit_ref,
            sync_armed=dict(self.sync_armed),
        )


class NmgModel:
    """Immutable per-config data plus the RHS machinery."""

    def __init__(self, cfg: SystemConfig):
        self.cfg = cfg
        self.idx = StateIndex(cfg)
        self.omega_n = cfg.omega_n
        self.omega_c = cfg.omega_c
        self.omega_c_pcc_p = cfg.omega_c_pcc_p
        self.omega_c_pcc_q = cfg.omega_c_pcc_q

        # --- bus table ---------------------------------------------------
        self.bus_ids = [b for b, _ in cfg.buses]
        self.bus_index = {b: i for i, b in enumerate(self.bus_ids)}
        self.n_bus = len(self.bus_ids)
        self.bus_base = np.array(
            [cfg.level_bases[cfg.bus_levels[b]] for b in self.bus_ids]
        )
        ref_base = min(cfg.level_bases.values())
        self.bus_r_virtual = cfg.r_virtual * (self.bus_base / ref_base) ** 2

        # --- DG arrays ---------------------------------------------------
        dgs = cfg.dg_list
        self.n_dg = len(dgs)
        self.dg_ids = [d.dg_id for d in dgs]
        self.dg_mg = np.array(
            [self.idx.mg_ids.index(d.mg_id) for d in dgs], dtype=int
        )
        self.dg_bus = np.array([self.bus_index[d.bus] for d in dgs], dtype=int)
        self.dg_dp = np.array([d.droop.d_p for d in dgs])
        self.dg_dq = np.array([d.droop.d_q for d in dgs])
        self.dg_pcap = np.array([d.droop.p_capacity for d in dgs])
        self.dg_qcap = np.array([d.droop.q_capacity for d in dgs])
        self.dg_vbase = self.bus_base[self.dg_bus]
        self.dg_breaker = [d.breaker for d in dgs]

        # --- MG arrays ---------------------------------------------------
        self.n_mg = len(cfg.mgs)
        self.mg_ids = self.idx.mg_ids
        self.mg_dp = np.array([m.droop.d_p for m in cfg.mgs])
        self.mg_dq = np.array([m.droop.d_q for m in cfg.mgs])
        self.mg_pcap = np.array([m.droop.p_capacity for m in cfg.mgs])
        self.mg_pcc_bus = np.array(
            [self.bus_index[m.pcc_bus] for m in cfg.mgs], dtype=int
        )
        self.mg_pcc_base = self.bus_base[self.mg_pcc_bus]
        self.crit_bus = self.bus_index[cfg.critical_bus]
        self.crit_base = self.bus_base[self.crit_bus]

        # --- unified branch table -----------------------------------------
        # order: DG branches (state slots inside DG blocks), transformers,
        # lines, dynamic loads -- matching StateIndex.
        kinds, from_bus, to_bus, res, ind, ratio, br_ids = [], [], [], [], [], [], []
        for d in dgs:
            kinds.append(KIND_DG)
            from_bus.append(-1)
            to_bus.append(self.bus_index[d.bus])
            res.append(cfg.coupling_r)
            ind.append(cfg.coupling_l)
            ratio.append(1.0)
            br_ids.append(d.dg_id)
        self.tr_breaker = {}
        for spec, hv, lv, breaker in cfg.transformers:
            r, x = transformer_equivalent(spec, "LV")
            kinds.append(KIND_TRANSFORMER)
            from_bus.append(self.bus_index[lv])
            to_bus.append(self.bus_index[hv])
            res.append(r)
            ind.append(x / self.omega_n)
            ratio.append(spec.ratio)
            br_ids.append(spec.transformer_id)
            self.tr_breaker[spec.transformer_id] = breaker
        for ln in cfg.lines:
            kinds.append(KIND_LINE)
            from_bus.append(self.bus_index[ln.from_bus])
            to_bus.append(self.bus_index[ln.to_bus])
            res.append(ln.resistance)
            ind.append(ln.inductance)
            ratio.append(1.0)
            br_ids.append(ln.line_id)
        self.dyn_load_ids = []
        for ld in self.idx.dyn_loads:
            kinds.append(KIND_LOAD)
            from_bus.append(self.bus_index[ld.bus_id])
            to_bus.append(-1)
            res.append(ld.resistance)
            ind.append(ld.inductance)
            ratio.append(1.0)
            br_ids.append(ld.load_id)
            self.dyn_load_ids.append(ld.load_id)
        self.br_kind = np.array(kinds, dtype=int)
        self.br_from = np.array(from_bus, dtype=int)
        self.br_to = np.array(to_bus, dtype=int)
        self.br_r = np.array(res)
        self.br_l = np.array(ind)
        self.br_ratio = np.array(ratio)
        self.br_ids = br_ids
        self.n_br = len(br_ids)

        self.alg_loads = [ld for ld in cfg.loads if not ld.is_dynamic]

        # PCC measurement branch per MG (transformer or line id).
        self.mg_pcc_branch = np.array(
            [br_ids.index(m.pcc_branch) for m in cfg.mgs], dtype=int
        )
        # Breaker id -> branch row (DG branches and transformers only).
        self.breaker_branch = {}
        for i, d in enumerate(dgs):
            self.breaker_branch[d.breaker] = i
        for spec, *_ in cfg.transformers:
            row = br_ids.index(spec.transformer_id)
            self.breaker_branch[self.tr_breaker[spec.transformer_id]] = row

        # --- state sub-index shortcuts -------------------------------------
        ix = self.idx
        self.ix_delta = ix.select("delta")
        self.ix_P = ix.select("P", "MG")
        self.ix_Q = ix.select("Q", "MG")
        self.ix_Om = ix.select("Omega", "MG")
        self.ix_lam = ix.select("lambda", "MG")
        self.ix_h = ix.select("h", "MG")
        self.ix_Ppcc = ix.select("P_pcc")
        self.ix_Qpcc = ix.select("Q_pcc")
        self.ix_Omk = ix.select("Omega", "NMG")
        self.ix_lamk = ix.select("lambda", "NMG")
        self.ix_hk = ix.select("h", "NMG")
        self.ix_psik = ix.select("psi", "NMG")[:-1]
        self.ix_psi = ix.of("psi")
        # branch current positions, ordered like the branch table
        d_pos, q_pos = [], []
        for b in br_ids:
            if b in self.dg_ids:
                d_pos.append(ix.of(f"{b}.ioD"))
                q_pos.append(ix.of(f"{b}.ioQ"))
            else:
                d_pos.append(ix.of(f"{b}.iD"))
                q_pos.append(ix.of(f"{b}.iQ"))
        self.ix_brD = np.array(d_pos, dtype=int)
        self.ix_brQ = np.array(q_pos, dtype=int)

        self.anchor = 0  # frame rotates with the first DG of the first MG

        # Characteristic rate per state channel (1/s); residuals of dx/dt are
        # judged against scale * rate, which is what the stiff electrical rows
        # make attainable in double precision.
        rate = np.full(ix.n, cfg.omega_c)
        rate[self.ix_delta] = self.omega_n
        rate[self.ix_Om] = 4.0 * cfg.dsc_gains.c_omega
        rate[self.ix_lam] = 4.0 * cfg.dsc_gains.c_v
        rate[self.ix_h] = 4.0 * cfg.dsc_gains.c_q
        rate[self.ix_Omk] = 4.0 * cfg.dqc_gains.c_omega
        rate[self.ix_lamk] = 4.0 * cfg.dqc_gains.c_v
        rate[self.ix_hk] = 4.0 * cfg.dqc_gains.c_q
        rate[self.ix_psik] = 1.0
        rate[self.ix_psi] = 1.0
        r_touch = np.maximum(
            self.bus_r_virtual[np.maximum(self.br_from, 0)],
            self.bus_r_virtual[np.maximum(self.br_to, 0)],
        )
        br_rate = (self.br_r + 2.0 * r_touch) / self.br_l + self.omega_n
        rate[self.ix_brD] = br_rate
        rate[self.ix_brQ] = br_rate
        self.rate_scale = ix.scale * rate

    # -- live conditions ----------------------------------------------------

    def initial_conditions(self, flags: ActivationFlags) -> LiveConditions:
        breakers = {b: True for b in self.breaker_branch}
        return LiveConditions(
            flags=flags,
            breaker_closed=breakers,
            load_scale={ld.load_id: ld.scale for ld in self.cfg.loads},
            mg_links={m.mg_id: {} for m in self.cfg.mgs},
            nmg_links={},
            f_sys_ref=self.cfg.f_sys_ref,
            v_crit_ref=self.cfg.v_crit_ref,
        )

    # -- epoch (event-derived caches) ----------------------------------------

    def build_epoch(self, live: LiveConditions) -> "Epoch":
        return Epoch(self, live)

    # -- state helpers --------------------------------------------------------

    def flat_start(self) -> np.ndarray:
        return np.zeros(self.idx.n)

    def active_mask(self, live: LiveConditions) -> np.ndarray:
        """States whose derivatives are not frozen by activation flags."""
        mask = np.ones(self.idx.n, dtype=bool)
        if not live.flags.dsc:
            for sel in (self.ix_Om, self.ix_lam, self.ix_h, self.ix_psik):
                mask[sel] = False
        if not live.flags.dqc:
            for sel in (self.ix_Omk, self.ix_lamk, self.ix_hk):
                mask[sel] = False
            mask[self.ix_psi] = False
        return mask


class Epoch:
    """Caches derived from LiveConditions; rebuilt when an event fires."""

    def __init__(self, model: NmgModel, live: LiveConditions):
        self.model = model
        self.live = live
        m = model

        # branch status and load scaling
        self.br_closed = np.ones(m.n_br, dtype=bool)
        for breaker, row in m.breaker_branch.items():
            self.br_closed[row] = live.breaker_closed.get(breaker, True)
        self.br_scale = np.ones(m.n_br)
        for i, bid in enumerate(m.br_ids):
            if m.br_kind[i] == KIND_LOAD:
                self.br_scale[i] = live.load_scale.get(bid, 1.0)

        self.dg_connected = self.br_closed[: m.n_dg].copy()
        self.mg_connected = self.br_closed[m.mg_pcc_branch].copy()

        # per-bus conductance: virtual resistor plus algebraic loads
        g = 1.0 / m.bus_r_virtual.copy()
        for ld in m.alg_loads:
            g[m.bus_index[ld.bus_id]] += live.load_scale.get(ld.load_id, ld.scale) / ld.resistance
        self.bus_g = g

        # live communication matrices
        adj_blocks = np.zeros((m.n_dg, m.n_dg))
        pin = np.zeros(m.n_dg)
        offset = 0
        self.mg_trees = {}
        for k, mg in enumerate(m.cfg.mgs):
            nk = len(mg.dgs)
            graph = mg.comm
            saved = dict(graph.link_status)
            graph.link_status = dict(live.mg_links[mg.mg_id])
            mask = self.dg_connected[offset : offset + nk]
            adj_blocks[offset : offset + nk, offset : offset + nk] = graph.live_adjacency(mask)
            pin[offset : offset + nk] = graph.live_pinning(mask)
            from .control import has_pinned_spanning_tree

            self.mg_trees[mg.mg_id] = has_pinned_spanning_tree(graph, mask)
            graph.link_status = saved
            offset += nk
        self.dsc_adj = adj_blocks
        self.dsc_pin = pin

        graph = m.cfg.nmg_comm
        saved = dict(graph.link_status)
        graph.link_status = dict(live.nmg_links)
        self.dqc_adj = graph.live_adjacency(self.mg_connected)
        self.dqc_pin = graph.live_pinning(self.mg_connected)
        from .control import has_pinned_spanning_tree

        self.nmg_tree = has_pinned_spanning_tree(graph, self.mg_connected)
        graph.link_status = saved

        self._build_electrical()

    def _build_electrical(self):
        """Per-axis electrical matrix M with bus algebra folded in.

        With z = i_D + j*i_Q per branch: dz/dt = (M - j*omega_g I) z + f,
        where f is E/L on DG branch rows. M = diag(1/L) K diag(1/g) S
        - diag(R/L); S maps branch currents to bus injections, K maps bus
        voltages to branch drive voltages.
        """
        m = self.model
        n_br, n_bus = m.n_br, m.n_bus
        S = np.zeros((n_bus, n_br))
        K = np.zeros((n_br, n_bus))
        for b in range(n_br):
            if not self.br_closed[b]:
                continue
            kind = m.br_kind[b]
            f, t, n = m.br_from[b], m.br_to[b], m.br_ratio[b]
            if kind == KIND_DG:
                S[t, b] += 1.0
                K[b, t] -= 1.0
            elif kind == KIND_TRANSFORMER:
                S[f, b] -= 1.0
                S[t, b] += 1.0 / n
                K[b, f] += 1.0
                K[b, t] -= 1.0 / n
            elif kind == KIND_LINE:
                S[f, b] -= 1.0
                S[t, b] += 1.0
                K[b, f] += 1.0
                K[b, t] -= 1.0
            else:  # load
                S[f, b] -= 1.0
                K[b, f] += self.br_scale[b]
        self.S = S
        self.K = K
        inv_l = 1.0 / m.br_l
        M = (K / self.bus_g[None, :] @ S) * inv_l[:, None]
        M[np.arange(m.n_br), np.arange(m.n_br)] -= m.br_r * inv_l
        # isolated branches self-discharge toward zero current
        for b in np.nonzero(~self.br_closed)[0]:
            M[b, :] = 0.0
            M[b, b] = -max(m.br_r[b] * inv_l[b], DETACHED_DECAY_MIN)
        self.M = M
        self.forcing_gain = np.where(
            (m.br_kind == KIND_DG) & self.br_closed, inv_l, 0.0
        )

    def forcing(self, e_z: np.ndarray) -> np.ndarray:
        """Per-branch complex forcing from the DG source voltages."""
        f = np.zeros(self.model.n_br, dtype=complex)
        f[: self.model.n_dg] = self.forcing_gain[: self.model.n_dg] * e_z
        return f

    # -- measurements ---------------------------------------------------------

    def bus_voltages_z(self, i_z: np.ndarray) -> np.ndarray:
        """Complex per-bus voltages from complex branch currents."""
        return (self.S @ i_z) / self.bus_g

    def measurements(self, x: np.ndarray):
        """Everything the controllers read from the electrical subsystem."""
        m = self.model
        i_z = x[m.ix_brD] + 1j * x[m.ix_brQ]
        v_z = self.bus_voltages_z(i_z)
        i_dg = i_z[: m.n_dg]
        i_pcc = i_z[m.mg_pcc_branch]
        v_pcc = v_z[m.mg_pcc_bus]
        s_pcc = 1.5 * v_pcc * np.conj(i_pcc)
        v_pcc_pu = np.abs(v_pcc) / m.mg_pcc_base
        v_c_pu = abs(v_z[m.crit_bus]) / m.crit_base
        return i_z, v_z, i_dg, s_pcc, v_pcc_pu, v_c_pu


class ControllerOutputs:
    """Intermediate controller quantities shared by RHS paths."""

    __slots__ = ("omega_dg", "omega_g", "e_z", "omega_mg", "v_pcc_ref", "v_f_star")


def controller_rates(model: NmgModel, epoch: Epoch, x: np.ndarray, meas,
                     dx: np.ndarray) -> ControllerOutputs:
    """Fill controller-state derivatives into dx and return the outputs
    needed by the electrical side (source voltages, frame frequency)."""
    m = model
    live = epoch.live
    flags = live.flags
    i_z, v_z, i_dg, s_pcc, v_pcc_pu, v_c_pu = meas

    delta = x[m.ix_delta]
    P = x[m.ix_P]
    Q = x[m.ix_Q]
    Om = x[m.ix_Om]
    lam = x[m.ix_lam]
    h = x[m.ix_h]
    P_pcc = x[m.ix_Ppcc]
    Q_pcc = x[m.ix_Qpcc]
    Omk = x[m.ix_Omk]
    lamk = x[m.ix_lamk]
    hk = x[m.ix_hk]
    psik = x[m.ix_psik]
    psi = x[m.ix_psi]

    out = ControllerOutputs()

    # --- primary droop outputs -------------------------------------------
    omega = m.omega_n - m.dg_dp * P + Om
    # active synchronization of detached DGs with an armed reconnection
    for breaker in live.sync_armed:
        row = m.breaker_branch[breaker]
        if row < m.n_dg and not epoch.dg_connected[row]:
            theta_bus = np.angle(v_z[m.dg_bus[row]])
            omega[row] = omega[row] + m.cfg.sync_gain * math.sin(theta_bus - delta[row])
    out.omega_dg = omega
    omega_g = omega[m.anchor]
    out.omega_g = omega_g

    e_pu = 1.0 - m.dg_dq * Q + lam + h
    e_abs = e_pu * m.dg_vbase
    e_z = e_abs * np.exp(1j * delta)
    out.e_z = e_z

    # --- measurements into the droop filters ------------------------------
    s_dg = 1.5 * e_z * np.conj(i_dg)
    dx[m.ix_delta] = omega - omega_g
    dx[m.ix_P] = m.omega_c * (s_dg.real - P)
    dx[m.ix_Q] = m.omega_c * (s_dg.imag - Q)
    dx[m.ix_Ppcc] = m.omega_c_pcc_p * (s_pcc.real - P_pcc)
    dx[m.ix_Qpcc] = m.omega_c_pcc_q * (s_pcc.imag - Q_pcc)

    # --- NMG layer ---------------------------------------------------------
    v_crit_ref = live.v_crit_ref
    if flags.dqc:
        err_c = v_crit_ref - v_c_pu
        v_f_star = 1.0 + m.cfg.critical_pi.k_p * err_c + m.cfg.critical_pi.k_i * psi
        dx[m.ix_psi] = err_c
    else:
        v_f_star = 1.0
        dx[m.ix_psi] = 0.0
    out.v_f_star = v_f_star

    omega_sys_ref = 2.0 * math.pi * live.f_sys_ref
    if flags.tc:
        omega_mg = m.omega_n - m.mg_dp * P_pcc + Omk
        v_pcc_ref = 1.0 - m.mg_dq * Q_pcc + lamk + hk
    else:
        omega_mg = np.full(m.n_mg, m.omega_n)
        v_pcc_ref = np.ones(m.n_mg)
    # detached MGs fall back to islanded references
    detached = ~epoch.mg_connected
    if detached.any():
        omega_mg = np.where(detached, m.omega_n, omega_mg)
        v_pcc_ref = np.where(detached, 1.0, v_pcc_ref)
        for breaker in live.sync_armed:
            row = m.breaker_branch[breaker]
            if row >= m.n_dg:
                k = int(np.nonzero(m.mg_pcc_branch == row)[0][0])
                if not epoch.mg_connected[k]:
                    th_island = np.angle(v_z[m.mg_pcc_bus[k]])
                    th_remote = np.angle(v_z[m.br_to[row]])
                    omega_mg[k] += m.cfg.sync_gain * math.sin(th_remote - th_island)
    out.omega_mg = omega_mg
    out.v_pcc_ref = v_pcc_ref

    if flags.dqc:
        g = m.cfg.dqc_gains
        dx[m.ix_Omk] = pinned_consensus_rate(
            omega_mg, m.mg_dp * P_pcc, epoch.dqc_adj, epoch.dqc_pin,
            omega_sys_ref, g.c_omega, g.c_p,
        )
        dx[m.ix_lamk] = pinned_consensus_rate(
            v_pcc_pu, None, epoch.dqc_adj, epoch.dqc_pin, v_f_star, g.c_v, 0.0
        )
        dx[m.ix_hk] = pinned_consensus_rate(
            m.mg_dq * Q_pcc, None, epoch.dqc_adj, np.zeros(m.n_mg), 0.0, g.c_q, 0.0
        )
    else:
        dx[m.ix_Omk] = 0.0
        dx[m.ix_lamk] = 0.0
        dx[m.ix_hk] = 0.0

    # --- MG layer (DSC) ------------------------------------------------------
    if flags.dsc:
        gd = m.cfg.dsc_gains
        err_pcc = v_pcc_ref - v_pcc_pu
        v_fk_star = 1.0 + m.cfg.pcc_pi.k_p * err_pcc + m.cfg.pcc_pi.k_i * psik
        dx[m.ix_psik] = err_pcc
        v_f = 1.0 - m.dg_dq * Q + lam
        ref_omega = omega_mg[m.dg_mg]
        ref_vf = v_fk_star[m.dg_mg]
        dx[m.ix_Om] = pinned_consensus_rate(
            omega, m.dg_dp * P, epoch.dsc_adj, epoch.dsc_pin,
            ref_omega, gd.c_omega, gd.c_p,
        )
        dx[m.ix_lam] = pinned_consensus_rate(
            v_f, None, epoch.dsc_adj, epoch.dsc_pin, ref_vf, gd.c_v, 0.0
        )
        dx[m.ix_h] = pinned_consensus_rate(
            m.dg_dq * Q, None, epoch.dsc_adj, np.zeros(m.n_dg), 0.0, gd.c_q, 0.0
        )
    else:
        dx[m.ix_Om] = 0.0
        dx[m.ix_lam] = 0.0
        dx[m.ix_h] = 0.0
        dx[m.ix_psik] = 0.0

    return out


def full_rhs(model: NmgModel, epoch: Epoch, x: np.ndarray) -> np.ndarray:
    """dx/dt of the complete assembled system (bus algebra -> measurements
    -> quaternary -> tertiary -> secondary -> primary -> electrical)."""
    m = model
    dx = np.zeros_like(x)
    meas = epoch.measurements(x)
    out = controller_rates(m, epoch, x, meas, dx)
    i_z = meas[0]
    dz = epoch.M @ i_z - 1j * out.omega_g * i_z + epoch.forcing(out.e_z)
    dx[m.ix_brD] = dz.real
    dx[m.ix_brQ] = dz.imag
    return dx
