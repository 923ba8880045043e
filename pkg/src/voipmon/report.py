"""Run outputs: per-module CSV logs, packet trace and a summary JSON.

Everything is rendered deterministically (fixed column order, fixed float
formatting, sorted JSON keys), so identical (config, seed) pairs produce
byte-identical files and digests.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional

from .packet import trace_line
from .qos import QosVerdict, MonitoringRecord
from .reputation import PSR, SSR, Action
from .security import SecVerdict


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _csv(header: List[str], rows: List[tuple]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


class RunReport:
    """Accumulates log rows during a run and renders them to files."""

    QOS_HEADER = ["node", "flow", "interval", "avg_q", "std_q", "psr_ok",
                  "rel_avg_drop", "rel_std_increase"]
    SEC_HEADER = ["node", "session", "window", "ssr_ok", "cause"]
    REP_HEADER = ["epoch", "node", "subject", "context", "oe", "sr", "cr", "pr", "action"]
    ALARM_HEADER = ["node", "interval", "metric", "value", "threshold",
                    "attack_type", "suspected"]

    def __init__(self, cfg):
        self.cfg = cfg
        self.qos_rows: List[tuple] = []
        self.sec_rows: List[tuple] = []
        self.rep_rows: List[tuple] = []
        self.alarm_rows: List[tuple] = []
        self.trace_rows: List[dict] = []
        self.counters: Dict[str, int] = defaultdict(int)
        self.counters["zero_bandwidth_violations"] = 0
        self.counters["budget_violations"] = 0
        self._flow_counters: Dict[int, Dict[str, int]] = defaultdict(lambda: defaultdict(int))
        self._per_second: Dict[int, Dict[int, int]] = defaultdict(lambda: defaultdict(int))
        self._sessions: Dict[int, dict] = {}
        self._attack_reports: Dict[str, List[dict]] = defaultdict(list)
        self.summary: dict = {}

    # -- intake -----------------------------------------------------------------

    def note_session(self, sess, path: List[str]):
        self._sessions[sess.id] = {
            "initial_path": list(path),
            "reroutes": [],
            "actions": [],
            "first_psr_false": None,
            "first_ssr_false": None,
        }

    def qos_row(self, node: str, flow: int, verdict: QosVerdict, own: MonitoringRecord):
        self.qos_rows.append((node, flow, verdict.interval, own.avg_q, own.std_q,
                              verdict.psr_ok, verdict.rel_avg_drop, verdict.rel_std_increase))

    def sec_row(self, node: str, session: int, verdict: SecVerdict):
        self.sec_rows.append((node, session, verdict.window, verdict.ssr_ok, verdict.cause))

    def rep_row(self, epoch: int, node: str, subject: str, ctx: str, scores, action: str):
        self.rep_rows.append((epoch, node, subject, ctx, scores.oe, scores.sr,
                              scores.cr, scores.pr, action))

    def alarm_row(self, node: str, alarm, attack_type: str, suspected: str):
        self.alarm_rows.append((node, alarm.interval, alarm.metric, alarm.value,
                                alarm.threshold, attack_type, suspected))

    def trace(self, record: dict):
        if self.cfg.trace_packets:
            self.trace_rows.append(record)

    def flow_counter(self, fid: int, key: str):
        self._flow_counters[fid][key] += 1

    def delivered_second(self, fid: int, second: int):
        self._per_second[fid][second] += 1

    def first_psr_false(self, session: int, node: str, interval: int, t_ms: float):
        meta = self._sessions.get(session)
        if meta is not None and meta["first_psr_false"] is None:
            meta["first_psr_false"] = {"node": node, "interval": interval,
                                       "t_ms": round(t_ms, 3)}

    def first_ssr_false(self, session: int, node: str, window: int, t_ms: float):
        meta = self._sessions.get(session)
        if meta is not None and meta["first_ssr_false"] is None:
            meta["first_ssr_false"] = {"node": node, "window": window,
                                       "t_ms": round(t_ms, 3)}

    def action(self, session: int, epoch: int, t_ms: float, action: Action):
        self._sessions[session]["actions"].append(
            {"epoch": epoch, "t_ms": round(t_ms, 3), "action": action.value})

    def reroute(self, session: int, epoch: int, t_ms: float, trigger: Action,
                old: List[str], new: Optional[List[str]], flagged: bool):
        self._sessions[session]["reroutes"].append({
            "epoch": epoch, "t_ms": round(t_ms, 3), "trigger": trigger.value,
            "old_path": list(old), "new_path": list(new) if new else None,
            "no_alternative": flagged,
        })

    def attack_report(self, node: str, report, t_ms: float):
        self._attack_reports[node].append({
            "attack_type": report.attack_type,
            "flows": list(report.flows),
            "suspected": report.suspected,
            "first_interval": report.first_interval,
            "t_ms": round(t_ms, 3),
        })

    # -- summary ------------------------------------------------------------------

    def finalize(self, sim):
        sessions = {}
        for sid in sorted(self._sessions):
            meta = dict(self._sessions[sid])
            flows = {}
            for direction in (0, 1):
                fid = sid * 2 + direction
                c = self._flow_counters.get(fid, {})
                injected = c.get("injected", 0)
                delivered = c.get("delivered", 0)
                flows[str(fid)] = {
                    "direction": "fwd" if direction == 0 else "rev",
                    "injected": injected,
                    "delivered": delivered,
                    "delivered_fraction": (delivered / injected) if injected else 0.0,
                    "dropped_loss": c.get("dropped_loss", 0),
                    "dropped_congestion": c.get("dropped_congestion", 0),
                    "dropped_adversary": c.get("dropped_adversary", 0),
                    "delivered_per_second": {
                        str(sec): n for sec, n in sorted(self._per_second.get(fid, {}).items())
                    },
                }
            meta["flows"] = flows
            meta["final_path"] = list(sim.session_paths[sid])
            meta["terminated"] = sid in sim.session_terminated
            sessions[str(sid)] = meta

        nodes = {}
        for name in sim.topology.nodes:
            node = sim.nodes[name]
            nodes[name] = {
                "first_alarm": node.first_alarm,
                "attack_reports": self._attack_reports.get(name, []),
                "isolated": sorted(node.isolated),
            }

        reputation_final = {}
        for name in sim.topology.nodes:
            store = sim.nodes[name].store
            per_ctx = {}
            for ctx in (PSR, SSR):
                per_ctx[ctx] = {
                    subject: {
                        "oe": round(store.oe(ctx, subject), 9),
                        "sr": round(store._scores[(ctx, subject)].sr, 9)
                        if (ctx, subject) in store._scores else None,
                        "pr": round(store.pr(ctx, subject), 9),
                        "ir": round(store.ir(ctx, subject), 9),
                    }
                    for subject in store.subjects(ctx)
                }
            reputation_final[name] = per_ctx

        self.summary = {
            "scenario": self.cfg.name,
            "seed": self.cfg.seed,
            "horizon_ms": self.cfg.horizon_ms,
            "sessions": sessions,
            "nodes": nodes,
            "reputation_final": reputation_final,
            "counters": {k: self.counters[k] for k in sorted(self.counters)},
        }

    # -- rendering -------------------------------------------------------------------

    def render_files(self) -> Dict[str, str]:
        return {
            "report.json": json.dumps(self.summary, indent=2, sort_keys=True) + "\n",
            "qos_log.csv": _csv(self.QOS_HEADER, self.qos_rows),
            "security_log.csv": _csv(self.SEC_HEADER, self.sec_rows),
            "reputation_log.csv": _csv(self.REP_HEADER, self.rep_rows),
            "alarm_log.csv": _csv(self.ALARM_HEADER, self.alarm_rows),
            "packet_trace.jsonl": "".join(trace_line(r) + "\n" for r in self.trace_rows),
        }

    def write(self, outdir) -> List[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, content in sorted(self.render_files().items()):
            path = out / name
            path.write_text(content, encoding="utf-8")
            paths.append(path)
        return paths

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, content in sorted(self.render_files().items()):
            h.update(name.encode())
            h.update(b"\x00")
            h.update(content.encode())
        return h.hexdigest()
