"""Scenario configuration: schema, YAML loading and validation.

A scenario file has sections name/seed/horizon_ms/topology/sessions/
adversaries/constants.  Links are declared once and expanded into both
directions.  Validation errors name the offending field and its domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import yaml

from .ids import IdsConfig
from .qos import MonitorConfig
from .reputation import DomainError, ReputationParams

BEHAVIOR_TAMPER = "TAMPER"
BEHAVIOR_REPLAY = "REPLAY"
BEHAVIOR_REORDER = "REORDER"
BEHAVIOR_DROP = "DROP"
BEHAVIOR_JITTER = "JITTER"
BEHAVIOR_FLOOD = "FLOOD"
BEHAVIOR_LIE_VOTES = "LIE_VOTES"
BEHAVIORS = (BEHAVIOR_TAMPER, BEHAVIOR_REPLAY, BEHAVIOR_REORDER, BEHAVIOR_DROP,
             BEHAVIOR_JITTER, BEHAVIOR_FLOOD, BEHAVIOR_LIE_VOTES)


class ConfigError(ValueError):
    """Scenario config violates the schema; message names the field."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass(frozen=True)
class LinkSpec:
    """One directed link of the overlay."""

    src: str
    dst: str
    delay_ms: float = 5.0
    jitter_ms: float = 0.0
    loss: float = 0.0
    capacity_pps: float = 10000.0
    media: bool = True  # False: control-plane only edge (votes, no voice path)


@dataclass
class Topology:
    nodes: List[str]
    links: List[LinkSpec]

    def neighbors(self, node: str, media_only: bool = False) -> List[str]:
        out = []
        for link in self.links:
            if link.src == node and (link.media or not media_only):
                out.append(link.dst)
        order = {n: i for i, n in enumerate(self.nodes)}
        return sorted(set(out), key=lambda n: order[n])

    def link(self, src: str, dst: str) -> Optional[LinkSpec]:
        for link in self.links:
            if link.src == src and link.dst == dst:
                return link
        return None


@dataclass
class SessionSpec:
    id: int
    src: str
    dst: str
    start_ms: float = 0.0
    end_ms: float = 60000.0
    cadence_ms: float = 20.0
    reroute_enabled: bool = True


@dataclass
class AdversarySpec:
    node: str
    behavior: str
    start_ms: float
    end_ms: float
    params: Dict[str, object] = field(default_factory=dict)


@dataclass
class CovertConfig:
    qim_step: int = 64
    bits_per_frame: int = 16
    window_frames: int = 10      # frames per integrity window
    qos_redundancy: int = 3      # copies of each monitoring record


@dataclass
class ScenarioConfig:
    name: str
    seed: int
    horizon_ms: float
    topology: Topology
    sessions: List[SessionSpec]
    adversaries: List[AdversarySpec] = field(default_factory=list)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    reputation: ReputationParams = field(default_factory=ReputationParams)
    ids: IdsConfig = field(default_factory=IdsConfig)
    covert: CovertConfig = field(default_factory=CovertConfig)
    description: str = ""
    trace_packets: bool = True


# --- loading ------------------------------------------------------------------

def _require(data: dict, key: str, path: str):
    if key not in data:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return data[key]


def _known_keys(data: dict, allowed: Sequence[str], path: str):
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")


def _build_links(entries: List[dict]) -> List[LinkSpec]:
    links: List[LinkSpec] = []
    for i, entry in enumerate(entries):
        path = f"topology.links[{i}]"
        _known_keys(entry, ("a", "b", "delay_ms", "jitter_ms", "loss", "capacity_pps",
                            "media"), path)
        a = _require(entry, "a", path)
        b = _require(entry, "b", path)
        kwargs = dict(
            delay_ms=float(entry.get("delay_ms", 5.0)),
            jitter_ms=float(entry.get("jitter_ms", 0.0)),
            loss=float(entry.get("loss", 0.0)),
            capacity_pps=float(entry.get("capacity_pps", 10000.0)),
            media=bool(entry.get("media", True)),
        )
        links.append(LinkSpec(src=a, dst=b, **kwargs))
        links.append(LinkSpec(src=b, dst=a, **kwargs))
    return links


_MONITOR_KEYS = ("dt_ms", "window_len", "mode", "delta_avg", "delta_std", "count_bytes")
_REPUTATION_KEYS = ("alpha", "beta", "gamma", "ir_floor", "overlap_min", "corr_min",
                    "low_overlap_ir_cap", "psr_accept", "ssr_accept", "vote_stale_epochs",
                    "share_budget_bytes")
_IDS_KEYS = ("k", "m_consec", "learn_len", "sigma_min", "all_nodes")
_COVERT_KEYS = ("qim_step", "bits_per_frame", "window_frames", "qos_redundancy")


def _section(data: dict, key: str, cls, allowed: Sequence[str], path: str):
    body = data.get(key, {}) or {}
    _known_keys(body, allowed, path)
    try:
        return cls(**body)
    except (TypeError, ValueError, DomainError) as exc:
        raise ConfigError(path, str(exc)) from exc


def from_dict(data: dict) -> ScenarioConfig:
    _known_keys(data, ("name", "description", "seed", "horizon_ms", "topology",
                       "sessions", "adversaries", "constants", "trace_packets"), "")
    name = str(_require(data, "name", ""))
    seed = _require(data, "seed", "")
    horizon = float(_require(data, "horizon_ms", ""))

    topo_data = _require(data, "topology", "")
    _known_keys(topo_data, ("nodes", "links"), "topology")
    nodes = list(_require(topo_data, "nodes", "topology"))
    links = _build_links(list(_require(topo_data, "links", "topology")))
    topology = Topology(nodes=nodes, links=links)

    sessions = []
    for i, entry in enumerate(data.get("sessions", []) or []):
        path = f"sessions[{i}]"
        _known_keys(entry, ("id", "src", "dst", "start_ms", "end_ms", "cadence_ms",
                            "reroute_enabled"), path)
        sessions.append(SessionSpec(
            id=int(_require(entry, "id", path)),
            src=str(_require(entry, "src", path)),
            dst=str(_require(entry, "dst", path)),
            start_ms=float(entry.get("start_ms", 0.0)),
            end_ms=float(entry.get("end_ms", horizon)),
            cadence_ms=float(entry.get("cadence_ms", 20.0)),
            reroute_enabled=bool(entry.get("reroute_enabled", True)),
        ))

    adversaries = []
    for i, entry in enumerate(data.get("adversaries", []) or []):
        path = f"adversaries[{i}]"
        _known_keys(entry, ("node", "behavior", "start_ms", "end_ms", "params"), path)
        adversaries.append(AdversarySpec(
            node=str(_require(entry, "node", path)),
            behavior=str(_require(entry, "behavior", path)),
            start_ms=float(entry.get("start_ms", 0.0)),
            end_ms=float(entry.get("end_ms", horizon)),
            params=dict(entry.get("params", {}) or {}),
        ))

    constants = data.get("constants", {}) or {}
    _known_keys(constants, ("monitor", "reputation", "ids", "covert"), "constants")
    monitor = _section(constants, "monitor", MonitorConfig, _MONITOR_KEYS, "constants.monitor")
    reputation = _section(constants, "reputation", ReputationParams, _REPUTATION_KEYS,
                          "constants.reputation")
    ids_cfg = _section(constants, "ids", IdsConfig, _IDS_KEYS, "constants.ids")
    covert = _section(constants, "covert", CovertConfig, _COVERT_KEYS, "constants.covert")

    cfg = ScenarioConfig(
        name=name, seed=int(seed), horizon_ms=horizon, topology=topology,
        sessions=sessions, adversaries=adversaries, monitor=monitor,
        reputation=reputation, ids=ids_cfg, covert=covert,
        description=str(data.get("description", "")),
        trace_packets=bool(data.get("trace_packets", True)),
    )
    validate(cfg)
    return cfg


def load_scenario(path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError("<document>", "scenario file must hold a mapping")
    return from_dict(data)


# --- validation ---------------------------------------------------------------

def _reachable(topology: Topology, src: str, dst: str, excluded: frozenset = frozenset()) -> bool:
    if src == dst:
        return True
    seen = {src}
    frontier = [src]
    while frontier:
        node = frontier.pop()
        for nxt in topology.neighbors(node, media_only=True):
            if nxt in seen or nxt in excluded:
                continue
            if nxt == dst:
                return True
            seen.add(nxt)
            frontier.append(nxt)
    return False


def validate(cfg: ScenarioConfig):
    """Full schema check; raises ConfigError naming the first offending field."""
    if cfg.seed < 0:
        raise ConfigError("seed", f"{cfg.seed} must be >= 0")
    if cfg.horizon_ms <= 0:
        raise ConfigError("horizon_ms", f"{cfg.horizon_ms} must be > 0")

    nodes = cfg.topology.nodes
    if not nodes:
        raise ConfigError("topology.nodes", "at least one node required")
    if len(set(nodes)) != len(nodes):
        raise ConfigError("topology.nodes", "node names must be unique")
    if len(nodes) > 256:
        raise ConfigError("topology.nodes", "at most 256 nodes (1-byte subject ids)")
    node_set = set(nodes)
    for i, link in enumerate(cfg.topology.links):
        path = f"topology.links[{i}]"
        if link.src not in node_set or link.dst not in node_set:
            raise ConfigError(path, f"unknown endpoint {link.src!r} or {link.dst!r}")
        if not 0.0 <= link.loss <= 1.0:
            raise ConfigError(f"{path}.loss", f"{link.loss} outside [0,1]")
        if link.delay_ms < 0 or link.jitter_ms < 0:
            raise ConfigError(f"{path}.delay_ms", "delays must be >= 0")
        if link.capacity_pps <= 0:
            raise ConfigError(f"{path}.capacity_pps", f"{link.capacity_pps} must be > 0")

    mon = cfg.monitor
    if mon.dt_ms <= 0:
        raise ConfigError("constants.monitor.dt_ms", f"{mon.dt_ms} must be > 0")
    if mon.window_len < 1:
        raise ConfigError("constants.monitor.window_len", f"{mon.window_len} must be >= 1")
    if mon.mode not in ("moving", "jumping"):
        raise ConfigError("constants.monitor.mode", f"{mon.mode!r} not moving|jumping")
    if not 0.0 < mon.delta_avg < 1.0:
        raise ConfigError("constants.monitor.delta_avg", f"{mon.delta_avg} outside (0,1)")
    if mon.delta_std <= 0.0:
        raise ConfigError("constants.monitor.delta_std", f"{mon.delta_std} must be > 0")

    rep = cfg.reputation
    if not 0.0 < rep.alpha < 1.0:
        raise ConfigError("constants.reputation.alpha", f"{rep.alpha} outside (0,1)")
    if not 0.0 < rep.beta <= 1.0:
        raise ConfigError("constants.reputation.beta", f"{rep.beta} outside (0,1]")
    if not 0.0 < rep.gamma <= 1.0:
        raise ConfigError("constants.reputation.gamma", f"{rep.gamma} outside (0,1]")
    if not 0.0 < rep.ir_floor < 1.0:
        raise ConfigError("constants.reputation.ir_floor", f"{rep.ir_floor} outside (0,1)")
    if rep.overlap_min < 1:
        raise ConfigError("constants.reputation.overlap_min", "must be >= 1")

    ids_cfg = cfg.ids
    if ids_cfg.k <= 0:
        raise ConfigError("constants.ids.k", f"{ids_cfg.k} must be > 0")
    if ids_cfg.m_consec < 1:
        raise ConfigError("constants.ids.m_consec", "must be >= 1")
    if ids_cfg.learn_len < 1:
        raise ConfigError("constants.ids.learn_len", "must be >= 1")
    if ids_cfg.sigma_min <= 0:
        raise ConfigError("constants.ids.sigma_min", "must be > 0")

    cov = cfg.covert
    if cov.qim_step <= 0 or cov.qim_step % 2:
        raise ConfigError("constants.covert.qim_step", f"{cov.qim_step} must be positive and even")
    if not 8 <= cov.bits_per_frame <= 160:
        raise ConfigError("constants.covert.bits_per_frame",
                          f"{cov.bits_per_frame} outside [8,160]")
    if cov.window_frames < 1:
        raise ConfigError("constants.covert.window_frames", "must be >= 1")
    if cov.qos_redundancy < 1:
        raise ConfigError("constants.covert.qos_redundancy", "must be >= 1")

    seen_ids = set()
    for i, sess in enumerate(cfg.sessions):
        path = f"sessions[{i}]"
        if sess.id in seen_ids:
            raise ConfigError(f"{path}.id", f"duplicate session id {sess.id}")
        seen_ids.add(sess.id)
        if sess.src not in node_set or sess.dst not in node_set:
            raise ConfigError(path, f"unknown endpoint {sess.src!r} or {sess.dst!r}")
        if sess.src == sess.dst:
            raise ConfigError(path, "source and destination must differ")
        if not 0 <= sess.start_ms < sess.end_ms <= cfg.horizon_ms:
            raise ConfigError(f"{path}.start_ms",
                              "need 0 <= start_ms < end_ms <= horizon_ms")
        if sess.cadence_ms <= 0:
            raise ConfigError(f"{path}.cadence_ms", "must be > 0")
        if abs(mon.dt_ms / sess.cadence_ms - round(mon.dt_ms / sess.cadence_ms)) > 1e-9:
            raise ConfigError(f"{path}.cadence_ms",
                              f"{sess.cadence_ms} must divide monitor dt {mon.dt_ms} evenly")
        if mon.dt_ms / sess.cadence_ms < 5:
            raise ConfigError(f"{path}.cadence_ms",
                              "fewer than 5 expected packets per averaging interval")
        if not _reachable(cfg.topology, sess.src, sess.dst):
            raise ConfigError(path, f"no media path between {sess.src!r} and {sess.dst!r}")

    for i, adv in enumerate(cfg.adversaries):
        path = f"adversaries[{i}]"
        if adv.node not in node_set:
            raise ConfigError(f"{path}.node", f"unknown node {adv.node!r}")
        if adv.behavior not in BEHAVIORS:
            raise ConfigError(f"{path}.behavior",
                              f"{adv.behavior!r} not one of {', '.join(BEHAVIORS)}")
        if not 0 <= adv.start_ms < adv.end_ms <= cfg.horizon_ms:
            raise ConfigError(f"{path}.start_ms",
                              "active interval must lie within the scenario horizon")
        p = adv.params
        if adv.behavior == BEHAVIOR_TAMPER and not 0.0 < float(p.get("rate", 1.0)) <= 1.0:
            raise ConfigError(f"{path}.params.rate", "tamper rate outside (0,1]")
        if adv.behavior == BEHAVIOR_DROP and not 0.0 < float(p.get("loss", 0.0)) <= 1.0:
            raise ConfigError(f"{path}.params.loss", "extra loss outside (0,1]")
        if adv.behavior == BEHAVIOR_JITTER and float(p.get("std_ms", 0.0)) <= 0:
            raise ConfigError(f"{path}.params.std_ms", "jitter std must be > 0")
        if adv.behavior == BEHAVIOR_REPLAY and float(p.get("window_ms", 0.0)) <= 0:
            raise ConfigError(f"{path}.params.window_ms", "replay window must be > 0")
        if adv.behavior == BEHAVIOR_REORDER and int(p.get("depth", 0)) < 2:
            raise ConfigError(f"{path}.params.depth", "reorder depth must be >= 2")
        if adv.behavior == BEHAVIOR_FLOOD:
            if float(p.get("rate_pps", 0.0)) <= 0:
                raise ConfigError(f"{path}.params.rate_pps", "flood rate must be > 0")
            targets = p.get("targets", [])
            if not targets:
                raise ConfigError(f"{path}.params.targets", "flood needs at least one target")
            for t in targets:
                if t not in node_set:
                    raise ConfigError(f"{path}.params.targets", f"unknown target {t!r}")
                if not _reachable(cfg.topology, adv.node, t):
                    raise ConfigError(f"{path}.params.targets",
                                      f"no path from {adv.node!r} to {t!r}")
