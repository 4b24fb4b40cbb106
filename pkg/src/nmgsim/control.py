"""The four control levels and the communication digraphs they run on.

Level map (bottom to top):
  PC  - per-DG droop, gives the angular frequency and the d-axis voltage
        reference of the controllable source.
  DSC - per-MG distributed secondary control: pinned consensus that tracks
        the tertiary frequency/voltage references and equalizes weighted
        active/reactive power between DGs.
  TC  - per-MG droop on the PCC power flow; generates the references the
        DSC tracks.
  DQC - NMG-wide distributed quaternary control, structurally the same
        consensus as the DSC but with MGs as nodes.

Voltage-like quantities entering the consensus and PI laws are expressed in
per-unit of the level voltage base; frequencies in rad/s; powers in W/var
with the droop gains premultiplied (D_P*P has rad/s units, D_Q*Q per-unit).
The DSC and DQC rate laws share one kernel (`pinned_consensus_rate`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DroopParams:
    """Droop coefficients and capacity of one droop-controlled unit.

    d_p: rad/s per W, d_q: per-unit volts per var (already referred to the
    level voltage base). p_capacity/q_capacity are the sharing weights
    (P_max/Q_max for DGs, spare capacity for MG units).
    """

    d_p: float
    d_q: float
    p_capacity: float
    q_capacity: float

    def __post_init__(self):
        if self.d_p <= 0.0 or self.d_q <= 0.0:
            raise ValueError("droop coefficients must be positive")


@dataclass
class ConsensusGains:
    """Consensus gains of one distributed level (Table III semantics)."""

    c_omega: float
    c_p: float
    c_v: float
    c_q: float

    def __post_init__(self):
        for name in ("c_omega", "c_p", "c_v", "c_q"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass
class PiGains:
    """PI gains of a voltage-restoration controller (per-unit error in,
    per-unit correction out)."""

    k_p: float
    k_i: float


@dataclass
class CommGraph:
    """Weighted digraph with pinning gains; link status is event-controlled.

    adjacency[i, j] = a_ij is the weight with which node i hears node j.
    link_status masks edges (both directions of a named pair go down
    together when a link fails).
    """

    node_ids: list
    adjacency: np.ndarray
    pinning: np.ndarray
    link_status: dict = field(default_factory=dict)  # frozenset({a,b}) -> bool

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=float)
        self.pinning = np.asarray(self.pinning, dtype=float)
        n = len(self.node_ids)
        if self.adjacency.shape != (n, n):
            raise ValueError("adjacency shape does not match node count")
        if np.any(np.diag(self.adjacency) != 0.0):
            raise ValueError("self-loops are not allowed")
        if np.any(self.adjacency < 0.0) or np.any(self.pinning < 0.0):
            raise ValueError("weights and pinning gains must be >= 0")
        self._index = {ident: i for i, ident in enumerate(self.node_ids)}

    def node_index(self, ident) -> int:
        return self._index[ident]

    def set_link(self, a, b, up: bool):
        """Mark the (bidirectional) link between nodes a and b up or down."""
        i, j = self.node_index(a), self.node_index(b)
        if self.adjacency[i, j] == 0.0 and self.adjacency[j, i] == 0.0:
            raise KeyError(f"no link between {a!r} and {b!r}")
        self.link_status[frozenset((a, b))] = up

    def live_adjacency(self, node_mask=None) -> np.ndarray:
        """Adjacency with failed links and masked-out nodes removed."""
        adj = self.adjacency.copy()
        for pair, up in self.link_status.items():
            if not up:
                a, b = tuple(pair)
                i, j = self.node_index(a), self.node_index(b)
                adj[i, j] = 0.0
                adj[j, i] = 0.0
        if node_mask is not None:
            keep = np.asarray(node_mask, dtype=bool)
            adj[~keep, :] = 0.0
            adj[:, ~keep] = 0.0
        return adj

    def live_pinning(self, node_mask=None) -> np.ndarray:
        g = self.pinning.copy()
        if node_mask is not None:
            g[~np.asarray(node_mask, dtype=bool)] = 0.0
        return g


def has_pinned_spanning_tree(graph: CommGraph, node_mask=None) -> bool:
    """True iff every (unmasked) node is reachable from a pinned node
    through links that are currently up.

    Edge direction follows information flow: node i hears node j when
    a_ij > 0, so reachability expands from the pinned set along a_ij.
    """
    adj = graph.live_adjacency(node_mask)
    g = graph.live_pinning(node_mask)
    n = len(graph.node_ids)
    keep = np.ones(n, dtype=bool) if node_mask is None else np.asarray(node_mask, bool)
    reached = (g > 0.0) & keep
    if not reached.any():
        return False
    frontier = list(np.nonzero(reached)[0])
    while frontier:
        j = frontier.pop()
        hears_j = np.nonzero(adj[:, j] > 0.0)[0]
        for i in hears_j:
            if keep[i] and not reached[i]:
                reached[i] = True
                frontier.append(i)
    return bool(np.all(reached[keep]))


def pinned_consensus_rate(values, weighted, adjacency, pinning, reference,
                          c_sync, c_share) -> np.ndarray:
    """Shared DSC/DQC rate kernel.

    rate_i = -c_sync  * [sum_j a_ij (x_i - x_j) + g_i (x_i - x_ref)]
             -c_share *  sum_j a_ij (w_i - w_j)

    where x = `values` (frequency or voltage) and w = `weighted` (droop-
    weighted power). Either gain vector may be scalar. Pass c_share = 0 or
    weighted = None for the voltage laws that carry no sharing term.
    """
    x = np.asarray(values, dtype=float)
    adj = np.asarray(adjacency, dtype=float)
    g = np.asarray(pinning, dtype=float)
    row = adj.sum(axis=1)
    neigh = row * x - adj @ x
    rate = -np.asarray(c_sync, dtype=float) * (neigh + g * (x - reference))
    if weighted is not None:
        w = np.asarray(weighted, dtype=float)
        rate = rate - np.asarray(c_share, dtype=float) * (row * w - adj @ w)
    return rate


def primary_outputs(p, q, omega_corr, lam, h, droop: DroopParams,
                    omega_n: float, v_n: float = 1.0):
    """PC droop outputs of one DG.

    Returns (omega, E_od, E_oq) with E_od = V_n - D_Q*Q + lambda + h aligned
    to the local d-axis and E_oq = 0. Corrections are zero while the DSC is
    inactive.
    """
    omega = omega_n - droop.d_p * p + omega_corr
    e_od = v_n - droop.d_q * q + lam + h
    return omega, e_od, 0.0


def dsc_freq_rhs(omega, weighted_p, adjacency, pinning, omega_ref,
                 gains: ConsensusGains) -> np.ndarray:
    """Secondary frequency-correction rates for the DGs of one MG."""
    return pinned_consensus_rate(
        omega, weighted_p, adjacency, pinning, omega_ref, gains.c_omega, gains.c_p
    )


def dsc_volt_rhs(v_f, adjacency, pinning, v_f_ref, c_v) -> np.ndarray:
    """Secondary voltage-correction rates; consensus runs on the V_f
    references (V_n - D_Q*Q + lambda), not on measured bus voltages."""
    return pinned_consensus_rate(v_f, None, adjacency, pinning, v_f_ref, c_v, 0.0)


def dsc_q_rhs(weighted_q, adjacency, c_q) -> np.ndarray:
    """Reactive-sharing correction rates; pure regulator sync, no pinning."""
    n = len(np.asarray(weighted_q))
    return pinned_consensus_rate(
        weighted_q, None, adjacency, np.zeros(n), 0.0, c_q, 0.0
    )


def pcc_pi(v_pcc_ref: float, v_pcc: float, psi: float, gains: PiGains,
           v_n: float = 1.0):
    """Per-MG PCC-voltage PI: returns (V_fk*, dpsi/dt), per-unit."""
    err = v_pcc_ref - v_pcc
    return v_n + gains.k_p * err + gains.k_i * psi, err


def tc_outputs(p_pcc, q_pcc, omega_corr, lam, h, droop: DroopParams,
               omega_n: float, v_n: float = 1.0):
    """TC droop on the PCC flow: (omega_MGk, V_PCCk*)."""
    omega = omega_n - droop.d_p * p_pcc + omega_corr
    v_ref = v_n - droop.d_q * q_pcc + lam + h
    return omega, v_ref


def dqc_freq_rhs(omega_mg, weighted_p, adjacency, pinning, omega_sys_ref,
                 gains: ConsensusGains) -> np.ndarray:
    """Quaternary frequency-correction rates; same kernel as the DSC."""
    return pinned_consensus_rate(
        omega_mg, weighted_p, adjacency, pinning, omega_sys_ref,
        gains.c_omega, gains.c_p,
    )


def dqc_volt_rhs(v_pcc, adjacency, pinning, v_f_ref, c_v) -> np.ndarray:
    """Quaternary voltage rates; consensus runs on measured PCC voltage
    magnitudes (per-unit), pinned to the critical-bus PI output."""
    return pinned_consensus_rate(v_pcc, None, adjacency, pinning, v_f_ref, c_v, 0.0)


def dqc_q_rhs(weighted_q, adjacency, c_q) -> np.ndarray:
    """Quaternary reactive-sharing rates on D_Qk * Q_PCCk."""
    n = len(np.asarray(weighted_q))
    return pinned_consensus_rate(
        weighted_q, None, adjacency, np.zeros(n), 0.0, c_q, 0.0
    )


def critical_pi(v_c_ref: float, v_c: float, psi: float, gains: PiGains,
                v_n: float = 1.0):
    """Critical-bus voltage PI: returns (V_f*, dpsi/dt), per-unit."""
    err = v_c_ref - v_c
    return v_n + gains.k_p * err + gains.k_i * psi, err
