"""Configuration documents: parsing, unit normalization and validation.

A system document is JSON with unit-suffixed keys (r_ohm, p_kw,
droop_p_hz_per_kw, ...). Everything is normalized once at load time into
simulator units: rad/s, W/var, SI ohm/henry per voltage level, and
per-unit voltage droops/gains. Scenario documents reference a system
document and carry the timed event list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control import CommGraph, ConsensusGains, DroopParams, PiGains
from .plant import DgElectrical, LineBranch, RlLoad, TransformerSpec

TWO_PI = 2.0 * math.pi

# Spread tolerance for the droop-consistency rule: D_P*P_max (and D_Q*Q_max)
# must agree across the units of a layer to within this fraction.
DROOP_CONSISTENCY_RTOL = 5e-3

FIXTURE_DIR = Path(__file__).parent / "fixtures"


class ParseError(Exception):
    """Malformed document; carries line/position when available."""


class ValidationError(Exception):
    """Fatal consistency error in a parsed document."""


def amplitude_base(kv_ll: float) -> float:
    """Phase-voltage amplitude base from a line-to-line rms kV rating."""
    return kv_ll * 1e3 * math.sqrt(2.0 / 3.0)


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise ValidationError(f"{where}: missing required key {key!r}")
    return d[key]


@dataclass
class DgConfig:
    dg_id: str
    bus: str
    mg_id: str
    droop: DroopParams  # d_p rad/s per W, d_q p.u. per var
    breaker: str


@dataclass
class MgConfig:
    mg_id: str
    pcc_bus: str
    pcc_branch: str  # branch id whose flow is the PCC flow (export positive)
    droop: DroopParams
    dgs: list
    comm: CommGraph


@dataclass
class SystemConfig:
    name: str
    f_nominal: float  # Hz
    omega_n: float  # rad/s
    level_bases: dict  # level -> amplitude volts
    buses: list  # (bus_id, level)
    bus_levels: dict
    lines: list  # LineBranch
    loads: list  # RlLoad
    transformers: list  # (TransformerSpec, hv_bus, lv_bus, breaker_id)
    mgs: list  # MgConfig
    nmg_comm: CommGraph
    dsc_gains: ConsensusGains
    dqc_gains: ConsensusGains
    pcc_pi: PiGains
    critical_pi: PiGains
    f_sys_ref: float  # Hz
    v_crit_ref: float  # p.u.
    critical_bus: str
    r_virtual: float  # ohm at the reference level
    omega_c: float  # rad/s DG power-measurement filter
    omega_c_pcc_p: float  # rad/s PCC active-power measurement filter
    omega_c_pcc_q: float  # rad/s PCC reactive-power measurement filter
    dt_default: float  # s
    coupling_r: float  # ohm
    coupling_l: float  # henry
    sync_df_max: float = 0.05  # Hz
    sync_dv_max: float = 0.02  # p.u.
    sync_dphase_max: float = math.radians(5.0)
    sync_gain: float = 6.0  # rad/s per rad of phase error
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def dg_list(self):
        return [dg for mg in self.mgs for dg in mg.dgs]

    def mg(self, mg_id: str) -> MgConfig:
        for m in self.mgs:
            if m.mg_id == mg_id:
                return m
        raise KeyError(mg_id)


def _load_json(path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    return doc


def _impedance_from_power(p_w: float, q_var: float, v_base: float):
    """Series (R, L-reactance) drawing P + jQ at the nominal level voltage."""
    s2 = p_w * p_w + q_var * q_var
    if s2 <= 0.0:
        raise ValidationError("load must draw nonzero power")
    vll2 = 1.5 * v_base * v_base
    return vll2 * p_w / s2, vll2 * q_var / s2


def _graph_from_doc(doc: dict, node_ids: list, where: str) -> CommGraph:
    adj = np.asarray(_req(doc, "adjacency", where), dtype=float)
    pin = np.asarray(_req(doc, "pinning", where), dtype=float)
    try:
        return CommGraph(node_ids=node_ids, adjacency=adj, pinning=pin)
    except ValueError as exc:
        raise ValidationError(f"{where}: {exc}")


def _gains_from_doc(doc: dict, where: str):
    cons = ConsensusGains(
        c_omega=float(_req(doc, "c_omega", where)),
        c_p=float(_req(doc, "c_p", where)),
        c_v=float(_req(doc, "c_v", where)),
        c_q=float(_req(doc, "c_q", where)),
    )
    pi = PiGains(k_p=float(_req(doc, "k_p", where)), k_i=float(_req(doc, "k_i", where)))
    return cons, pi


def parse_system(doc: dict, name: str = "") -> SystemConfig:
    """Normalize a parsed system document into simulator units."""
    f_n = float(doc.get("frequency_hz", 50.0))
    omega_n = TWO_PI * f_n

    bases_kv = _req(doc, "voltage_bases_kv", "document")
    level_bases = {lvl: amplitude_base(float(kv)) for lvl, kv in bases_kv.items()}

    buses = []
    bus_levels = {}
    for b in _req(doc, "buses", "document"):
        bid, lvl = _req(b, "id", "bus"), _req(b, "level", "bus")
        if lvl not in level_bases:
            raise ValidationError(f"bus {bid!r}: unknown voltage level {lvl!r}")
        buses.append((bid, lvl))
        bus_levels[bid] = lvl

    lines = []
    for ln in doc.get("lines", []):
        lid = _req(ln, "id", "line")
        r = float(ln.get("r_ohm", 0.0))
        if "x_ohm" in ln:
            el = float(ln["x_ohm"]) / omega_n
        elif "l_mh" in ln:
            el = float(ln["l_mh"]) * 1e-3
        else:
            raise ValidationError(f"line {lid!r}: needs x_ohm or l_mh")
        f_bus, t_bus = _req(ln, "from", f"line {lid}"), _req(ln, "to", f"line {lid}")
        for b in (f_bus, t_bus):
            if b not in bus_levels:
                raise ValidationError(f"line {lid!r}: unknown bus {b!r}")
        if bus_levels[f_bus] != bus_levels[t_bus]:
            raise ValidationError(
                f"line {lid!r}: endpoints span voltage levels "
                f"(use a transformer between levels)"
            )
        lines.append(
            LineBranch(lid, f_bus, t_bus, r, el, voltage_level=bus_levels[f_bus])
        )

    loads = []
    for ld in doc.get("loads", []):
        lid = _req(ld, "id", "load")
        bus = _req(ld, "bus", f"load {lid}")
        if bus not in bus_levels:
            raise ValidationError(f"load {lid!r}: unknown bus {bus!r}")
        if "p_kw" in ld:
            v_base = level_bases[bus_levels[bus]]
            r, x = _impedance_from_power(
                float(ld["p_kw"]) * 1e3, float(ld.get("q_kvar", 0.0)) * 1e3, v_base
            )
            el = x / omega_n
        else:
            r = float(_req(ld, "r_ohm", f"load {lid}"))
            if "x_ohm" in ld:
                el = float(ld["x_ohm"]) / omega_n
            else:
                el = float(ld.get("l_mh", 0.0)) * 1e-3
        loads.append(RlLoad(lid, bus, r, el, scale=float(ld.get("scale", 1.0))))

    transformers = []
    for tr in doc.get("transformers", []):
        tid = _req(tr, "id", "transformer")
        kv_pair = _req(tr, "ratio_kv", f"transformer {tid}")
        spec = TransformerSpec(
            transformer_id=tid,
            rating_va=float(_req(tr, "rating_mva", f"transformer {tid}")) * 1e6,
            u_k=float(_req(tr, "uk_pct", f"transformer {tid}")) / 100.0,
            r_k=float(_req(tr, "rk_pct", f"transformer {tid}")) / 100.0,
            hv_voltage=float(kv_pair[0]) * 1e3,
            lv_voltage=float(kv_pair[1]) * 1e3,
        )
        hv, lv = _req(tr, "hv_bus", f"transformer {tid}"), _req(tr, "lv_bus", f"transformer {tid}")
        for b in (hv, lv):
            if b not in bus_levels:
                raise ValidationError(f"transformer {tid!r}: unknown bus {b!r}")
        transformers.append((spec, hv, lv, tr.get("breaker", f"cb_{tid}")))

    sim = doc.get("simulation", {})
    coupling_r = float(sim.get("coupling_r_ohm", 0.05))
    coupling_l = float(sim.get("coupling_l_mh", 1.8)) * 1e-3

    mgs = []
    for mg in _req(doc, "mgs", "document"):
        mg_id = _req(mg, "id", "mg")
        pcc_bus = _req(mg, "pcc_bus", f"mg {mg_id}")
        if pcc_bus not in bus_levels:
            raise ValidationError(f"mg {mg_id!r}: unknown pcc bus {pcc_bus!r}")
        v_base = level_bases[bus_levels[pcc_bus]]
        droop = DroopParams(
            d_p=TWO_PI * float(_req(mg, "droop_p_hz_per_kw", f"mg {mg_id}")) / 1e3,
            d_q=float(_req(mg, "droop_q_kv_per_kvar", f"mg {mg_id}")) / v_base,
            p_capacity=float(_req(mg, "spare_p_kw", f"mg {mg_id}")) * 1e3,
            q_capacity=float(_req(mg, "spare_q_kvar", f"mg {mg_id}")) * 1e3,
        )
        dgs = []
        for dg in _req(mg, "dgs", f"mg {mg_id}"):
            dg_id = _req(dg, "id", "dg")
            bus = _req(dg, "bus", f"dg {dg_id}")
            if bus not in bus_levels:
                raise ValidationError(f"dg {dg_id!r}: unknown bus {bus!r}")
            dg_base = level_bases[bus_levels[bus]]
            dgs.append(
                DgConfig(
                    dg_id=dg_id,
                    bus=bus,
                    mg_id=mg_id,
                    droop=DroopParams(
                        d_p=TWO_PI * float(_req(dg, "droop_p_hz_per_kw", f"dg {dg_id}")) / 1e3,
                        d_q=float(_req(dg, "droop_q_kv_per_kvar", f"dg {dg_id}")) / dg_base,
                        p_capacity=float(_req(dg, "p_max_kw", f"dg {dg_id}")) * 1e3,
                        q_capacity=float(_req(dg, "q_max_kvar", f"dg {dg_id}")) * 1e3,
                    ),
                    breaker=dg.get("breaker", dg_id),
                )
            )
        comm = _graph_from_doc(
            _req(mg, "comm", f"mg {mg_id}"), [d.dg_id for d in dgs], f"mg {mg_id} comm"
        )
        mgs.append(
            MgConfig(
                mg_id=mg_id,
                pcc_bus=pcc_bus,
                pcc_branch=_req(mg, "pcc_branch", f"mg {mg_id}"),
                droop=droop,
                dgs=dgs,
                comm=comm,
            )
        )

    nmg_comm = _graph_from_doc(
        _req(doc, "nmg_comm", "document"), [m.mg_id for m in mgs], "nmg comm"
    )

    gains_doc = _req(doc, "gains", "document")
    dsc_gains, pcc_pi_gains = _gains_from_doc(_req(gains_doc, "dsc", "gains"), "gains.dsc")
    dqc_gains, crit_pi_gains = _gains_from_doc(_req(gains_doc, "dqc", "gains"), "gains.dqc")

    refs = _req(doc, "references", "document")
    sync = doc.get("sync", {})

    return SystemConfig(
        name=doc.get("name", name),
        f_nominal=f_n,
        omega_n=omega_n,
        level_bases=level_bases,
        buses=buses,
        bus_levels=bus_levels,
        lines=lines,
        loads=loads,
        transformers=transformers,
        mgs=mgs,
        nmg_comm=nmg_comm,
        dsc_gains=dsc_gains,
        dqc_gains=dqc_gains,
        pcc_pi=pcc_pi_gains,
        critical_pi=crit_pi_gains,
        f_sys_ref=float(refs.get("f_sys_hz", f_n)),
        v_crit_ref=float(refs.get("v_crit_pu", 1.0)),
        critical_bus=_req(refs, "critical_bus", "references"),
        r_virtual=float(sim.get("r_virtual_ohm", 1000.0)),
        omega_c=float(sim.get("power_filter_rad_s", 31.4159)),
        omega_c_pcc_p=float(
            sim.get("pcc_p_filter_rad_s", sim.get("power_filter_rad_s", 31.4159))
        ),
        omega_c_pcc_q=float(sim.get("pcc_q_filter_rad_s", 314.159)),
        dt_default=float(sim.get("dt_s", 2e-4)),
        coupling_r=coupling_r,
        coupling_l=coupling_l,
        sync_df_max=float(sync.get("df_max_hz", 0.05)),
        sync_dv_max=float(sync.get("dv_max_pu", 0.02)),
        sync_dphase_max=math.radians(float(sync.get("dphase_max_deg", 5.0))),
        sync_gain=float(sync.get("k_sync_rad_s", 6.0)),
        raw=doc,
    )


def load_system(path) -> SystemConfig:
    return parse_system(_load_json(path), name=Path(path).stem)


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self):
        for e in self.errors:
            yield f"ERROR: {e}"
        for w in self.warnings:
            yield f"WARNING: {w}"


def validate_system(cfg: SystemConfig) -> ValidationReport:
    """Consistency checks beyond schema: droop consistency, spanning trees,
    frame anchor, critical-bus placement, connectivity."""
    from .control import has_pinned_spanning_tree

    rep = ValidationReport()

    # Droop-consistency: D_P * capacity identical across units of a layer.
    def check_layer(units, label):
        spans_p = np.array([u.d_p * u.p_capacity for u in units])
        spans_q = np.array([u.d_q * u.q_capacity for u in units])
        for spans, kind in ((spans_p, "frequency"), (spans_q, "voltage")):
            mid = np.median(spans)
            spread = np.max(np.abs(spans - mid)) / abs(mid) if mid else np.inf
            if spread > DROOP_CONSISTENCY_RTOL:
                rep.warnings.append(
                    f"{label}: {kind}-droop span spread {spread:.2%} exceeds "
                    f"{DROOP_CONSISTENCY_RTOL:.1%} (unequal droop*capacity products)"
                )

    for mg in cfg.mgs:
        check_layer([d.droop for d in mg.dgs], f"{mg.mg_id} DG layer")
        if not has_pinned_spanning_tree(mg.comm):
            rep.warnings.append(f"{mg.mg_id}: comm graph has no pinned spanning tree")
    check_layer([m.droop for m in cfg.mgs], "MG layer")
    if not has_pinned_spanning_tree(cfg.nmg_comm):
        rep.warnings.append("NMG comm graph has no pinned spanning tree")

    # Frame anchor: first DG of first MG must exist.
    if not cfg.mgs or not cfg.mgs[0].dgs:
        rep.errors.append("frame anchor missing: first MG must contain a DG")

    # Critical bus: must exist and sit on the highest voltage level present.
    if cfg.critical_bus not in cfg.bus_levels:
        rep.errors.append(f"critical bus {cfg.critical_bus!r} is not a bus")
    elif len(cfg.level_bases) > 1:
        top = max(cfg.level_bases, key=lambda lvl: cfg.level_bases[lvl])
        if cfg.bus_levels[cfg.critical_bus] != top:
            rep.errors.append(
                f"critical bus {cfg.critical_bus!r} is on level "
                f"{cfg.bus_levels[cfg.critical_bus]!r}, expected {top!r}"
            )

    # PCC branch ids must resolve to a transformer or line.
    branch_ids = {ln.line_id for ln in cfg.lines}
    branch_ids |= {spec.transformer_id for spec, *_ in cfg.transformers}
    for mg in cfg.mgs:
        if mg.pcc_branch not in branch_ids:
            rep.errors.append(f"{mg.mg_id}: pcc branch {mg.pcc_branch!r} not found")

    # Unique ids.
    ids = [b for b, _ in cfg.buses]
    ids += [ln.line_id for ln in cfg.lines] + [ld.load_id for ld in cfg.loads]
    ids += [d.dg_id for d in cfg.dg_list] + [m.mg_id for m in cfg.mgs]
    seen, dup = set(), set()
    for i in ids:
        (dup if i in seen else seen).add(i)
    if dup:
        rep.errors.append(f"duplicate element ids: {sorted(dup)}")

    if cfg.r_virtual <= 0.0:
        rep.errors.append("virtual resistance must be positive")
    if cfg.dt_default <= 0.0:
        rep.errors.append("default time step must be positive")
    return rep


LEVELS = ("DSC", "TC", "DQC")


@dataclass
class Event:
    """One timed scenario event."""

    time: float
    kind: str  # activate | scale_load | comm_link | breaker | set_reference
    params: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    config: SystemConfig
    t_end: float
    dt: float
    events: list  # [Event], time-sorted
    record_every: int = 5

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValidationError("scenario dt must be positive")
        if self.t_end < 0.0:
            raise ValidationError("scenario t_end must be >= 0")
        self.events = sorted(self.events, key=lambda e: e.time)

    def initial_levels(self):
        """Control levels active from t = 0 (activation events at t <= 0)."""
        active = set()
        for ev in self.events:
            if ev.kind == "activate" and ev.time <= 0.0:
                active.add(ev.params["level"])
        return active


def parse_scenario(doc: dict, cfg: SystemConfig, name: str = "") -> Scenario:
    events = []
    for ev in doc.get("events", []):
        kind = _req(ev, "kind", "event")
        t = float(_req(ev, "t_s", "event"))
        params = {k: v for k, v in ev.items() if k not in ("kind", "t_s")}
        if kind == "activate" and _req(ev, "level", "activate event") not in LEVELS:
            raise ValidationError(f"unknown control level {ev['level']!r}")
        events.append(Event(time=t, kind=kind, params=params))

    scen = Scenario(
        name=doc.get("name", name),
        config=cfg,
        t_end=float(_req(doc, "t_end_s", "scenario")),
        dt=float(doc.get("dt_s", cfg.dt_default)),
        events=events,
        record_every=int(doc.get("record_every", 5)),
    )
    _validate_scenario(scen)
    return scen


def _validate_scenario(scen: Scenario):
    cfg = scen.config
    load_ids = {ld.load_id for ld in cfg.loads}
    breaker_ids = {dg.breaker for dg in cfg.dg_list}
    breaker_ids |= {br for *_, br in cfg.transformers}
    graph_ids = {"nmg"} | {m.mg_id for m in cfg.mgs}
    anchor_breaker = cfg.mgs[0].dgs[0].breaker if cfg.mgs and cfg.mgs[0].dgs else None

    act_times = {}
    for ev in scen.events:
        if ev.kind == "activate":
            act_times[ev.params["level"]] = ev.time
        elif ev.kind == "scale_load":
            if _req(ev.params, "load", "scale_load") not in load_ids:
                raise ValidationError(f"scale_load: unknown load {ev.params['load']!r}")
        elif ev.kind == "comm_link":
            if _req(ev.params, "layer", "comm_link") not in graph_ids:
                raise ValidationError(f"comm_link: unknown layer {ev.params['layer']!r}")
        elif ev.kind == "breaker":
            bid = _req(ev.params, "id", "breaker")
            if bid not in breaker_ids:
                raise ValidationError(f"breaker: unknown id {bid!r}")
            if bid == anchor_breaker and not ev.params.get("closed", True):
                raise ValidationError(
                    "the frame-anchor DG cannot be disconnected (common frame "
                    "rotates with the first DG of the first MG)"
                )
        elif ev.kind == "set_reference":
            if _req(ev.params, "target", "set_reference") not in ("f_sys_hz", "v_crit_pu"):
                raise ValidationError(f"unknown reference {ev.params['target']!r}")
        elif ev.kind != "activate":
            raise ValidationError(f"unknown event kind {ev.kind!r}")

    dqc_t = act_times.get("DQC")
    if dqc_t is not None:
        for lvl in ("DSC", "TC"):
            if lvl in act_times and act_times[lvl] > dqc_t:
                raise ValidationError(
                    f"activation order violated: {lvl} at {act_times[lvl]} "
                    f"after DQC at {dqc_t}"
                )


def load_scenario(path, cfg: SystemConfig | None = None) -> Scenario:
    doc = _load_json(path)
    if cfg is None:
        ref = _req(doc, "config", "scenario")
        cfg_path = Path(path).parent / ref
        if not cfg_path.exists():
            cfg_path = FIXTURE_DIR / ref
        cfg = load_system(cfg_path)
    return parse_scenario(doc, cfg, name=Path(path).stem)


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / name
