"""Deterministic discrete-event P2P VoIP overlay.

Nodes exchange voice packets over links with loss/delay/jitter/capacity,
while the monitoring layer rides the covert channels: per-interval QoS
records, per-window integrity tokens, per-epoch reputation shares.  Adversary
hooks run at the owning node before forwarding.  One seed, one config, one
byte-identical set of reports.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from . import ids as ids_mod
from . import reputation as rep_mod
from .config import (BEHAVIOR_DROP, BEHAVIOR_FLOOD, BEHAVIOR_JITTER, BEHAVIOR_LIE_VOTES,
                     BEHAVIOR_REORDER, BEHAVIOR_REPLAY, BEHAVIOR_TAMPER, AdversarySpec,
                     ConfigError, LinkSpec, ScenarioConfig, SessionSpec, Topology)
from .covert import CovertChannel, MsgType, QimParams, RepShareAssembler
from .ids import FlowIntervalStat, IntrusionDetector
from .packet import SimPacket, VoiceFrame, make_voice_packet, silence_frame, trace_record, with_meta
from .qos import AlignmentError, MonitoringRecord, NotReadyError, StatRing, compare
from .report import RunReport
from .reputation import PSR, SSR, Action, ReputationStore, decide_action, dequantize_unit
from .security import IntegrityToken, SecVerdict, SessionKeys, token_generate, token_verify

FLOOD_FLOW_BASE = 9000
REPLAY_STALE_GAP = 64  # seqs older than max_seq - gap are treated as replays


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def derive_key(master: int, label: str) -> bytes:
    return hashlib.sha256(f"{master}|key|{label}".encode()).digest()[:16]


class _Link:
    """Directed link with loss, jitter and a token-bucket capacity model.

    Admitted packets arrive at now + delay + N(0, jitter), truncated at zero
    extra delay; packets beyond the bucket rate are congestion drops.
    """

    def __init__(self, spec: LinkSpec, rng: random.Random):
        self.spec = spec
        self.rng = rng
        self.burst = max(2.0, spec.capacity_pps * 0.1)
        self.tokens = self.burst
        self.last_refill = 0.0

    def admit(self, now: float) -> bool:
        elapsed = max(0.0, now - self.last_refill)
        self.tokens = min(self.burst, self.tokens + elapsed * self.spec.capacity_pps / 1000.0)
        self.last_refill = now
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False

    def lost(self) -> bool:
        return self.spec.loss > 0.0 and self.rng.random() < self.spec.loss

    def transit(self) -> float:
        offset = self.spec.delay_ms
        if self.spec.jitter_ms > 0.0:
            offset += self.rng.gauss(0.0, self.spec.jitter_ms)
        return max(0.0, offset)


@dataclass
class _TxFlow:
    """Sender-side state of one media direction."""

    fid: int
    session: SessionSpec
    src: str
    dst: str
    channel: CovertChannel
    ring: StatRing
    next_seq: int = 0
    qos_queue: deque = field(default_factory=deque)
    rep_queue: deque = field(default_factory=deque)
    tokens: Dict[int, bytes] = field(default_factory=dict)
    frame_cache: Dict[int, VoiceFrame] = field(default_factory=dict)
    window_bits: Dict[int, int] = field(default_factory=dict)


@dataclass
class _RxFlow:
    """Receiver-side state of one media direction at one node."""

    fid: int
    ring: StatRing
    upstream: str = ""
    max_seq: int = -1
    frames: Dict[int, VoiceFrame] = field(default_factory=dict)
    sender_records: Dict[int, MonitoringRecord] = field(default_factory=dict)
    pending_records: Dict[int, MonitoringRecord] = field(default_factory=dict)
    compared: Set[int] = field(default_factory=set)
    token_frags: Dict[int, Dict[int, bytes]] = field(default_factory=dict)
    tokens: Dict[int, IntegrityToken] = field(default_factory=dict)
    next_verify: int = 0
    verified: Dict[int, SecVerdict] = field(default_factory=dict)
    replay_suspects: int = 0
    share_rx: RepShareAssembler = field(default_factory=RepShareAssembler)


class _IntervalAcc:
    """Per-node, per-interval traffic accounting feeding the IDS."""

    def __init__(self):
        self.packets = 0
        self.bytes = 0
        self.unknown = 0
        self.hash_failures = 0
        self.flow_counts: Dict[int, int] = defaultdict(int)
        self.flow_upstream: Dict[int, str] = {}
        self.flow_known: Dict[int, bool] = {}
        self.flow_hash_failures: Dict[int, int] = defaultdict(int)

    def account(self, fid: int, upstream: str, known: bool, nbytes: int):
        self.packets += 1
        self.bytes += nbytes
        if not known:
            self.unknown += 1
        self.flow_counts[fid] += 1
        self.flow_upstream[fid] = upstream
        self.flow_known[fid] = known

    def hash_failure(self, fid: int):
        self.hash_failures += 1
        self.flow_hash_failures[fid] += 1
        self.flow_known.setdefault(fid, True)

    def snapshot(self) -> Tuple[Dict[str, float], List[FlowIntervalStat]]:
        values = {
            ids_mod.METRIC_PACKET_RATE: float(self.packets),
            ids_mod.METRIC_BYTE_RATE: float(self.bytes),
            ids_mod.METRIC_UNKNOWN_RATE: float(self.unknown),
            ids_mod.METRIC_HASH_FAIL: float(self.hash_failures),
        }
        stats = [
            FlowIntervalStat(flow=fid, count=self.flow_counts.get(fid, 0),
                             upstream=self.flow_upstream.get(fid, ""),
                             session_known=self.flow_known.get(fid, True),
                             hash_failures=self.flow_hash_failures.get(fid, 0))
            for fid in sorted(set(self.flow_counts) | set(self.flow_hash_failures))
        ]
        return values, stats


class _Node:
    def __init__(self, name: str, cfg: ScenarioConfig):
        self.name = name
        self.store = ReputationStore(owner=name, params=cfg.reputation)
        self.detector = IntrusionDetector(cfg.ids)
        self.isolated: Set[str] = set()
        self.rx: Dict[int, _RxFlow] = {}
        self.fwd: Dict[int, str] = {}
        self.acc = _IntervalAcc()
        self.adversaries: List[Tuple[int, AdversarySpec]] = []
        # epoch-scoped evidence buffers
        self.subj_psr: Dict[str, List[bool]] = defaultdict(list)
        self.subj_ssr: Dict[str, List[bool]] = defaultdict(list)
        self.flow_psr: Dict[int, List[bool]] = defaultdict(list)
        self.flow_ssr: Dict[int, List[bool]] = defaultdict(list)
        self.ids_flagged: Set[str] = set()
        self.reports: List[ids_mod.AttackReport] = []
        self.first_alarm: Optional[dict] = None
        # adversary runtime state
        self.replay_buffers: Dict[int, deque] = defaultdict(deque)
        self.replay_cursor: Dict[int, int] = defaultdict(int)
        self.reorder_hold: List[SimPacket] = []

    def active_behaviors(self, now: float) -> List[Tuple[int, AdversarySpec]]:
        return [(i, a) for i, a in self.adversaries if a.start_ms <= now < a.end_ms]

    def has_behavior(self, now: float, behavior: str) -> bool:
        return any(a.behavior == behavior for _, a in self.active_behaviors(now))


class SimulationError(RuntimeError):
    pass


class Simulation:
    """One scenario run.  Build, call run(), collect the RunReport."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.topology = cfg.topology
        self.now = 0.0
        self._heap: List[tuple] = []
        self._evseq = 0
        self.node_order = {n: i for i, n in enumerate(cfg.topology.nodes)}
        self.nodes: Dict[str, _Node] = {n: _Node(n, cfg) for n in cfg.topology.nodes}
        for i, adv in enumerate(cfg.adversaries):
            self.nodes[adv.node].adversaries.append((i, adv))
        self.links: Dict[Tuple[str, str], _Link] = {}
        for spec in cfg.topology.links:
            rng = random.Random(derive_seed(cfg.seed, f"link:{spec.src}->{spec.dst}"))
            self.links[(spec.src, spec.dst)] = _Link(spec, rng)

        self.report = RunReport(cfg)
        self.sessions: Dict[int, SessionSpec] = {s.id: s for s in cfg.sessions}
        self.session_paths: Dict[int, List[str]] = {}
        self.session_terminated: Set[int] = set()
        self.session_keys: Dict[int, SessionKeys] = {}
        self.session_qim: Dict[int, QimParams] = {}
        self.rx_channels: Dict[int, CovertChannel] = {}
        self.tx_flows: Dict[int, _TxFlow] = {}
        self.flow_session: Dict[int, SessionSpec] = {}
        self.known_flows: Set[int] = set()

        frame_samples = 160
        for sess in cfg.sessions:
            path = self._bfs_path(sess.src, sess.dst)
            if path is None:
                raise ConfigError(f"sessions[{sess.id}]", "endpoints are disconnected")
            self.session_paths[sess.id] = path
            key = derive_key(cfg.seed, f"session:{sess.id}")
            keys = SessionKeys(session_id=sess.id, group_key=key)
            qim = QimParams.keyed(key, frame_samples=frame_samples,
                                  bits_per_frame=cfg.covert.bits_per_frame,
                                  step=cfg.covert.qim_step)
            self.session_keys[sess.id] = keys
            self.session_qim[sess.id] = qim
            self.rx_channels[sess.id] = CovertChannel(key, qim=qim)
            for direction, (a, b) in enumerate(((sess.src, sess.dst), (sess.dst, sess.src))):
                fid = sess.id * 2 + direction
                self.tx_flows[fid] = _TxFlow(
                    fid=fid, session=sess, src=a, dst=b,
                    channel=CovertChannel(key, qim=qim),
                    ring=StatRing(cfg.monitor, start_ms=sess.start_ms))
                self.flow_session[fid] = sess
                self.known_flows.add(fid)
            self._install_path(sess, path)
            self.report.note_session(sess, path)

        self._adv_rngs: Dict[int, random.Random] = {}
        self._flood_routes: Dict[int, List[List[str]]] = {}
        for i, adv in enumerate(cfg.adversaries):
            self._adv_rngs[i] = random.Random(derive_seed(cfg.seed, f"adversary:{i}:{adv.behavior}"))
            if adv.behavior == BEHAVIOR_FLOOD:
                routes = []
                for target in adv.params.get("targets", []):
                    route = self._bfs_path(adv.node, str(target))
                    routes.append(route)
                self._flood_routes[i] = routes

        self._frame_samples = frame_samples
        self._silence = silence_frame()
        self._wf = cfg.covert.window_frames

    # -- scheduling ------------------------------------------------------------

    def _schedule(self, t: float, fn, *args):
        heapq.heappush(self._heap, (t, self._evseq, fn, args))
        self._evseq += 1

    def run(self) -> RunReport:
        cfg = self.cfg
        dt = cfg.monitor.dt_ms
        epoch_ms = cfg.monitor.dt_ms * cfg.monitor.window_len
        n_ticks = int(cfg.horizon_ms // dt)
        for n in range(n_ticks):
            self._schedule((n + 1) * dt, self._tick, n)
        n_epochs = int(cfg.horizon_ms // epoch_ms)
        for e in range(1, n_epochs + 1):
            self._schedule(e * epoch_ms, self._epoch, e, epoch_ms)
        for sess in cfg.sessions:
            for direction in (0, 1):
                self._schedule(sess.start_ms, self._send_frame, sess.id * 2 + direction)
        for i, adv in enumerate(cfg.adversaries):
            if adv.behavior == BEHAVIOR_FLOOD:
                self._schedule(adv.start_ms, self._flood_emit, i, 0)

        horizon = cfg.horizon_ms
        while self._heap:
            t, _, fn, args = self._heap[0]
            if t > horizon:
                break
            heapq.heappop(self._heap)
            self.now = t
            fn(*args)
        self.now = horizon
        self._finalize()
        return self.report

    # -- routing -----------------------------------------------------------------

    def _bfs_path(self, src: str, dst: str,
                  excluded: frozenset = frozenset()) -> Optional[List[str]]:
        if src == dst:
            return [src]
        parent = {src: None}
        queue = deque([src])
        while queue:
            node = queue.popleft()
            for nxt in self.topology.neighbors(node, media_only=True):
                if nxt in parent or nxt in excluded:
                    continue
                parent[nxt] = node
                if nxt == dst:
                    path = [dst]
                    while parent[path[-1]] is not None:
                        path.append(parent[path[-1]])
                    return list(reversed(path))
                queue.append(nxt)
        return None

    def _greedy_path(self, owner: _Node, src: str, dst: str) -> Optional[List[str]]:
        """Hop-by-hop path via reputation ranking, avoiding isolated nodes."""
        isolated = frozenset(owner.isolated - {src, dst})
        path = [src]
        visited = {src}
        cur = src
        while cur != dst:
            candidates = {}
            for cand in self.topology.neighbors(cur, media_only=True):
                if cand in visited or cand in isolated:
                    continue
                blocked = frozenset((visited | isolated) - {cand})
                if self._bfs_path(cand, dst, excluded=blocked) is None:
                    continue
                candidates[cand] = owner.store.routing_score(cand)
            if not candidates:
                return None
            cur = rep_mod.recommend_next_hop(candidates)
            visited.add(cur)
            path.append(cur)
        return path

    def _install_path(self, sess: SessionSpec, path: List[str]):
        for i in range(len(path) - 1):
            self.nodes[path[i]].fwd[sess.id * 2] = path[i + 1]
        rev = list(reversed(path))
        for i in range(len(rev) - 1):
            self.nodes[rev[i]].fwd[sess.id * 2 + 1] = rev[i + 1]

    # -- media sending -------------------------------------------------------------

    def _covert_message(self, tx: _TxFlow, seq: int) -> Tuple[int, int, bytes]:
        """Pick what this packet carries: SEC fragments own the first two
        packets of each window, monitoring records fill the rest."""
        wf = self._wf
        window, offset = divmod(seq, wf)
        if offset in (0, 1) and window >= 1 and (window - 1) in tx.tokens:
            tag = tx.tokens[window - 1]
            chunk = tag[0:2] if offset == 0 else tag[2:4]
            return MsgType.SEC, (window - 1) % 256, chunk
        if tx.qos_queue:
            return tx.qos_queue.popleft()
        if tx.rep_queue:
            return tx.rep_queue.popleft()
        return MsgType.KEEPALIVE, tx.channel.next_seq(MsgType.KEEPALIVE), b""

    def _send_frame(self, fid: int):
        tx = self.tx_flows[fid]
        sess = tx.session
        if sess.id in self.session_terminated:
            return
        now = self.now
        if now >= sess.end_ms or now >= self.cfg.horizon_ms:
            return
        seq = tx.next_seq
        tx.next_seq += 1
        msg_type, msg_seq, payload = self._covert_message(tx, seq)
        packet = make_voice_packet(fid, seq, self._silence, now, origin=tx.src)
        before = packet.byte_length()
        packet = tx.channel.send_measurement(packet, msg_type, payload, seq=msg_seq)
        if packet.byte_length() != before:
            self.report.counters["zero_bandwidth_violations"] += 1

        window = seq // self._wf
        tx.window_bits[window] = tx.window_bits.get(window, 0) + 8 * len(payload)
        tx.frame_cache[seq] = packet.payload
        if seq % self._wf == self._wf - 1:
            self._close_tx_window(tx, window)

        tx.ring.observe(now)
        self.report.counters["legit_injected"] += 1
        self.report.flow_counter(fid, "injected")
        nxt = self.nodes[tx.src].fwd.get(fid)
        if nxt is None:
            self.report.counters["legit_dropped_no_route"] += 1
        else:
            self._link_send(tx.src, nxt, packet)
        nxt_time = now + sess.cadence_ms
        if nxt_time < min(sess.end_ms, self.cfg.horizon_ms):
            self._schedule(nxt_time, self._send_frame, fid)

    def _close_tx_window(self, tx: _TxFlow, window: int):
        wf = self._wf
        first = window * wf
        frames = [tx.frame_cache.get(first + i) for i in range(wf)]
        if all(f is not None for f in frames):
            token = token_generate(frames, window, self.session_keys[tx.session.id],
                                   self.session_qim[tx.session.id], first, window_frames=wf)
            tx.tokens[window] = token.to_bytes()
        budget = wf * self.cfg.covert.bits_per_frame
        if tx.window_bits.get(window, 0) > budget:
            self.report.counters["budget_violations"] += 1
        for s in list(tx.frame_cache):
            if s < first:
                del tx.frame_cache[s]
        for w in list(tx.tokens):
            if w < window - 2:
                del tx.tokens[w]

    # -- link + adversaries ---------------------------------------------------------

    def _link_send(self, src: str, dst: str, packet: SimPacket, extra_delay: float = 0.0):
        link = self.links.get((src, dst))
        legit = packet.meta.flow in self.known_flows
        if link is None:
            self._count_drop(packet, legit, "no_link", src)
            return
        if not link.admit(self.now):
            self._count_drop(packet, legit, "congestion", src)
            return
        if link.lost():
            self._count_drop(packet, legit, "loss", src)
            return
        packet = with_meta(packet, prev_hop=src)
        self._schedule(self.now + extra_delay + link.transit(), self._arrive, dst, packet)

    def _count_drop(self, packet: SimPacket, legit: bool, reason: str, where: str):
        if legit:
            self.report.counters[f"legit_dropped_{reason}"] += 1
            self.report.flow_counter(packet.meta.flow, f"dropped_{reason}")
            self.report.trace(trace_record(packet, status=f"dropped_{reason}", node=where,
                                           t=round(self.now, 3)))
        else:
            self.report.counters["adv_dropped"] += 1

    def _apply_adversaries(self, node: _Node, packet: SimPacket) -> Tuple[Optional[SimPacket], float]:
        """Run the node's active behaviors over a forwarded packet.

        Returns (packet or None if consumed, extra delay).  Replay buffers
        fill while the behavior is dormant and substitute stale traffic while
        active.
        """
        now = self.now
        extra = 0.0
        for i, adv in enumerate(node.adversaries):
            rng = self._adv_rngs[self.cfg.adversaries.index(adv)]
            active = adv.start_ms <= now < adv.end_ms
            if adv.behavior == BEHAVIOR_REPLAY:
                fid = packet.meta.flow
                buf = node.replay_buffers[fid]
                if not active:
                    window = float(adv.params.get("window_ms", 2000.0))
                    buf.append(packet)
                    while buf and buf[0].meta.send_time < now - window:
                        buf.popleft()
                elif buf:
                    self.report.counters["legit_dropped_adversary"] += 1
                    self.report.flow_counter(fid, "dropped_adversary")
                    self.report.trace(trace_record(packet, status="dropped_adversary",
                                                   node=node.name, t=round(now, 3)))
                    cursor = node.replay_cursor[fid]
                    node.replay_cursor[fid] = cursor + 1
                    stale = buf[cursor % len(buf)]
                    packet = with_meta(stale, replayed=True)
                continue
            if not active:
                continue
            if adv.behavior == BEHAVIOR_DROP:
                if rng.random() < float(adv.params.get("loss", 0.0)):
                    self.report.counters["legit_dropped_adversary"] += 1
                    self.report.flow_counter(packet.meta.flow, "dropped_adversary")
                    self.report.trace(trace_record(packet, status="dropped_adversary",
                                                   node=node.name, t=round(now, 3)))
                    return None, extra
            elif adv.behavior == BEHAVIOR_TAMPER:
                if rng.random() < float(adv.params.get("rate", 1.0)):
                    packet = self._tamper(packet, rng, int(adv.params.get("samples", 8)))
            elif adv.behavior == BEHAVIOR_JITTER:
                extra += max(0.0, rng.gauss(0.0, float(adv.params.get("std_ms", 10.0))))
        return packet, extra

    @staticmethod
    def _tamper(packet: SimPacket, rng: random.Random, n_samples: int) -> SimPacket:
        samples = list(packet.payload.samples)
        for pos in rng.sample(range(len(samples)), min(n_samples, len(samples))):
            samples[pos] = samples[pos] + 4096 if samples[pos] < 0 else samples[pos] - 4096
        frame = replace(packet.payload, samples=tuple(samples))
        return with_meta(replace(packet, payload=frame), tampered=True)

    # -- arrival ----------------------------------------------------------------------

    def _arrive(self, name: str, packet: SimPacket):
        node = self.nodes[name]
        now = self.now
        fid = packet.meta.flow
        known = fid in self.known_flows
        node.acc.account(fid, packet.meta.prev_hop, known, packet.byte_length())

        if not known:
            route = packet.meta.route
            if route and name != route[-1]:
                idx = route.index(name)
                self._link_send(name, route[idx + 1], packet)
            else:
                self.report.counters["adv_delivered"] += 1
            return

        sess = self.flow_session[fid]
        rx = node.rx.get(fid)
        if rx is None:
            rx = _RxFlow(fid=fid, ring=StatRing(self.cfg.monitor, start_ms=sess.start_ms))
            node.rx[fid] = rx
        rx.upstream = packet.meta.prev_hop
        rx.ring.observe(now)

        result = self.rx_channels[sess.id].receive(packet)
        if result is not None:
            self._dispatch_covert(node, rx, sess, packet, *result)

        seq = packet.rtp_seq
        if rx.max_seq - seq > REPLAY_STALE_GAP:
            rx.replay_suspects += 1
        else:
            rx.frames[seq] = packet.payload
            rx.max_seq = max(rx.max_seq, seq)

        tx = self.tx_flows[fid]
        if name == tx.dst:
            if packet.meta.replayed:
                self.report.counters["replayed_delivered"] += 1
            else:
                self.report.counters["legit_delivered"] += 1
                self.report.flow_counter(fid, "delivered")
                self.report.delivered_second(fid, int(now // 1000.0))
            if self.cfg.trace_packets:
                self.report.trace(trace_record(packet, status="delivered", node=name,
                                               recv_time=round(now, 3)))
        else:
            nxt = node.fwd.get(fid)
            if nxt is None:
                self._count_drop(packet, True, "no_route", name)
                return
            out, extra = self._apply_adversaries(node, packet)
            if out is not None:
                self._link_send(name, nxt, out, extra_delay=extra)

    # -- covert dispatch -----------------------------------------------------------------

    def _dispatch_covert(self, node: _Node, rx: _RxFlow, sess: SessionSpec,
                         packet: SimPacket, word, payload: bytes):
        tx = self.tx_flows[rx.fid]
        endpoint = node.name == tx.dst
        if word.msg_type == MsgType.QOS and endpoint and len(payload) == 2:
            current = int(self.now // self.cfg.monitor.dt_ms)
            interval = current - ((current - word.seq) % 256)
            if interval < 0 or current - interval > self.cfg.monitor.window_len:
                return  # stale beyond one observation window
            if interval in rx.sender_records:
                return  # redundant copy
            record = MonitoringRecord.from_bytes(payload, interval)
            rx.sender_records[interval] = record
            self._try_compare(node, rx, record)
        elif word.msg_type == MsgType.SEC and len(payload) == 2:
            wf = self._wf
            window, offset = divmod(packet.rtp_seq, wf)
            token_window = window - 1
            if offset not in (0, 1) or token_window < 0:
                return
            if token_window % 256 != word.seq or token_window < rx.next_verify:
                return
            frags = rx.token_frags.setdefault(token_window, {})
            frags[offset] = payload
            if 0 in frags and 1 in frags:
                rx.tokens[token_window] = IntegrityToken.from_bytes(
                    frags[0] + frags[1], token_window)
                del rx.token_frags[token_window]
                self._verify_ready(node, rx, sess)
        elif word.msg_type == MsgType.REP_SHARE and payload:
            data = rx.share_rx.feed(word.seq, packet.rtp_seq, payload)
            if data is not None:
                self._apply_share_bytes(node, packet.meta.origin, data)

    def _apply_share_bytes(self, node: _Node, voter: str, data: bytes):
        index_subject = dict(enumerate(self.topology.nodes))
        payload = rep_mod.SharePayload.decode(data, index_subject, epoch=self._epoch_index())
        votes = {r.subject: dequantize_unit(r.sr_q) for r in payload.records}
        node.store.record_votes(payload.context, voter, votes, payload.epoch)

    def _epoch_index(self) -> int:
        epoch_ms = self.cfg.monitor.dt_ms * self.cfg.monitor.window_len
        return int(self.now // epoch_ms)

    def _try_compare(self, node: _Node, rx: _RxFlow, record: MonitoringRecord):
        last = rx.ring.last_completed
        if last is None or last < record.interval:
            rx.pending_records[record.interval] = record
            return
        self._run_compare(node, rx, record)

    def _run_compare(self, node: _Node, rx: _RxFlow, record: MonitoringRecord):
        if record.interval in rx.compared:
            return
        try:
            own = rx.ring.summarize(record.interval)
        except (AlignmentError, NotReadyError):
            return
        verdict = compare(record, own, self.cfg.monitor)
        rx.compared.add(record.interval)
        node.subj_psr[rx.upstream].append(verdict.psr_ok)
        node.flow_psr[rx.fid].append(verdict.psr_ok)
        self.report.qos_row(node.name, rx.fid, verdict, own)
        if not verdict.psr_ok:
            self.report.first_psr_false(self.flow_session[rx.fid].id, node.name,
                                        verdict.interval, self.now)

    # -- window verification ----------------------------------------------------------------

    def _verify_ready(self, node: _Node, rx: _RxFlow, sess: SessionSpec):
        """Verify consecutive windows whose token and frames are in."""
        wf = self._wf
        while rx.next_verify in rx.tokens:
            window = rx.next_verify
            first = window * wf
            if any(first + i not in rx.frames for i in range(wf)):
                break  # wait for stragglers until the deadline pass
            self._verify_window(node, rx, sess, window)

    def _verify_window(self, node: _Node, rx: _RxFlow, sess: SessionSpec, window: int):
        wf = self._wf
        first = window * wf
        frames = [rx.frames.get(first + i) for i in range(wf)]
        verdict = token_verify(frames, window, self.session_keys[sess.id],
                               self.session_qim[sess.id], first,
                               rx.tokens.get(window), window_frames=wf)
        rx.verified[window] = verdict
        rx.next_verify = window + 1
        node.subj_ssr[rx.upstream].append(verdict.ssr_ok)
        tx = self.tx_flows[rx.fid]
        if node.name == tx.dst:
            node.flow_ssr[rx.fid].append(verdict.ssr_ok)
        if not verdict.ssr_ok:
            node.acc.hash_failure(rx.fid)
            self.report.first_ssr_false(sess.id, node.name, window, self.now)
        self.report.sec_row(node.name, sess.id, verdict)
        rx.tokens.pop(window, None)
        rx.token_frags.pop(window, None)
        for s in list(rx.frames):
            if s < first + wf:
                del rx.frames[s]

    def _verify_deadlines(self, node: _Node):
        """Force a verdict for every window two windows past its close."""
        wf = self._wf
        for rx in node.rx.values():
            sess = self.flow_session[rx.fid]
            window_ms = wf * sess.cadence_ms
            deadline = int((self.now - sess.start_ms) // window_ms) - 2
            while rx.next_verify <= deadline:
                self._verify_window(node, rx, sess, rx.next_verify)

    # -- interval tick ----------------------------------------------------------------------

    def _tick(self, interval: int):
        now = self.now
        dt = self.cfg.monitor.dt_ms
        jumping = self.cfg.monitor.mode == "jumping"
        for fid in sorted(self.tx_flows):
            tx = self.tx_flows[fid]
            if tx.session.start_ms > now or tx.session.id in self.session_terminated:
                continue
            tx.ring.advance_to(now)
            if jumping and (interval + 1) % self.cfg.monitor.window_len:
                continue
            try:
                record = tx.ring.summarize()
            except NotReadyError:
                continue
            payload = record.to_bytes()
            if record.interval % 256 != record.interval % 256:  # pragma: no cover
                continue
            for _ in range(self.cfg.covert.qos_redundancy):
                tx.qos_queue.append((MsgType.QOS, record.interval % 256, payload))

        for name in self.topology.nodes:
            node = self.nodes[name]
            for fid in sorted(node.rx):
                rx = node.rx[fid]
                rx.ring.advance_to(now)
                for interval_idx in sorted(list(rx.pending_records)):
                    last = rx.ring.last_completed
                    if last is not None and last >= interval_idx:
                        self._run_compare(node, rx, rx.pending_records.pop(interval_idx))
            self._verify_deadlines(node)
            self._ids_interval(node, interval)

    def _ids_interval(self, node: _Node, interval: int):
        values, flow_stats = node.acc.snapshot()
        node.acc = _IntervalAcc()
        if not self.cfg.ids.all_nodes and not self._is_endpoint(node.name):
            return
        reports = node.detector.feed(interval, values, flow_stats)
        alarms = getattr(node.detector, "last_alarms", []) if not node.detector.learning else []
        if alarms:
            if node.first_alarm is None:
                node.first_alarm = {"interval": interval, "t_ms": round(self.now, 3),
                                    "metrics": sorted(a.metric for a in alarms)}
            for alarm in alarms:
                rep = self._report_for_metric(alarm.metric, reports)
                self.report.alarm_row(node.name, alarm,
                                      rep.attack_type if rep else "",
                                      rep.suspected if rep else "")
        node.detector.last_alarms = []
        for rep in reports:
            node.reports.append(rep)
            node.ids_flagged.add(rep.suspected)
            self.report.attack_report(node.name, rep, self.now)

    @staticmethod
    def _report_for_metric(metric: str, reports: Sequence[ids_mod.AttackReport]):
        for rep in reports:
            if metric == ids_mod.METRIC_HASH_FAIL:
                if rep.attack_type == ids_mod.ATTACK_INTEGRITY:
                    return rep
            elif rep.attack_type in (ids_mod.ATTACK_FLOOD, ids_mod.ATTACK_UNKNOWN_SESSION):
                return rep
        return reports[0] if reports else None

    def _is_endpoint(self, name: str) -> bool:
        return any(name in (s.src, s.dst) for s in self.cfg.sessions)

    # -- epoch ------------------------------------------------------------------------------

    def _epoch(self, epoch: int, epoch_ms: float):
        neighborhoods = {n: tuple(self.topology.neighbors(n)) for n in self.topology.nodes}
        for name in self.topology.nodes:
            node = self.nodes[name]
            subjects = sorted(set(node.subj_psr) | set(node.subj_ssr) | node.ids_flagged)
            for subject in subjects:
                if not subject:
                    continue
                psr_bits = node.subj_psr.get(subject)
                if psr_bits:
                    node.store.update_own_experience(
                        PSR, subject, sum(psr_bits) / len(psr_bits), epoch)
                if subject in node.ids_flagged:
                    node.store.update_own_experience(SSR, subject, 0.0, epoch)
                else:
                    ssr_bits = node.subj_ssr.get(subject)
                    if ssr_bits:
                        node.store.update_own_experience(
                            SSR, subject, sum(ssr_bits) / len(ssr_bits), epoch)
            scores = {}
            for ctx in (PSR, SSR):
                scores[ctx] = node.store.close_epoch(ctx, epoch, neighborhoods)

            action = self._session_actions(node, epoch)
            for ctx in (PSR, SSR):
                for subject in sorted(scores[ctx]):
                    s = scores[ctx][subject]
                    self.report.rep_row(epoch, name, subject, ctx, s, action)
            self._share(node, epoch)
            node.subj_psr.clear()
            node.subj_ssr.clear()
            node.flow_psr.clear()
            node.flow_ssr.clear()
            node.ids_flagged.clear()

    def _session_actions(self, node: _Node, epoch: int) -> str:
        decided = ""
        p = self.cfg.reputation
        for sess in self.cfg.sessions:
            if sess.src != node.name or sess.id in self.session_terminated:
                continue
            rev_fid = sess.id * 2 + 1
            psr_bits = node.flow_psr.get(rev_fid, [])
            ssr_bits = node.flow_ssr.get(rev_fid, [])
            if not psr_bits and not ssr_bits:
                continue
            psr_ok = (sum(psr_bits) / len(psr_bits) >= p.psr_accept) if psr_bits else True
            ssr_ok = (sum(ssr_bits) / len(ssr_bits) >= p.ssr_accept) if ssr_bits else True
            action = decide_action(psr_ok, ssr_ok)
            self.report.action(sess.id, epoch, self.now, action)
            decided = action.value
            if action is Action.MONITOR or not sess.reroute_enabled:
                continue
            if action is Action.REESTABLISH_AND_ISOLATE:
                suspects = {s for s, bits in node.subj_ssr.items()
                            if bits and sum(bits) / len(bits) < p.ssr_accept}
                suspects |= node.ids_flagged
                node.isolated |= suspects - {sess.src, sess.dst, ""}
            self._reroute(sess, action, epoch)
        return decided

    def _reroute(self, sess: SessionSpec, trigger: Action, epoch: int):
        owner = self.nodes[sess.src]
        old = self.session_paths[sess.id]
        new = self._greedy_path(owner, sess.src, sess.dst)
        if new is None:
            self.session_terminated.add(sess.id)
            self.report.reroute(sess.id, epoch, self.now, trigger, old, None, flagged=True)
            return
        flagged = new == old
        self.session_paths[sess.id] = new
        self._install_path(sess, new)
        self.report.reroute(sess.id, epoch, self.now, trigger, old, new, flagged=flagged)

    def _share(self, node: _Node, epoch: int):
        lying = node.has_behavior(self.now, BEHAVIOR_LIE_VOTES)
        for ctx in (PSR, SSR):
            payload = node.store.share_payload(ctx, epoch)
            if payload is None or not payload.records:
                continue
            if lying:
                records = tuple(
                    replace(r, sr_q=rep_mod.quantize_unit(1.0 - dequantize_unit(r.sr_q)))
                    for r in payload.records)
                payload = replace(payload, records=records)
            for neighbor in self.topology.neighbors(node.name, media_only=False):
                self._schedule(self.now + 1.0, self._deliver_share, neighbor,
                               node.name, payload)

    def _deliver_share(self, name: str, voter: str, payload: rep_mod.SharePayload):
        node = self.nodes[name]
        votes = {r.subject: dequantize_unit(r.sr_q) for r in payload.records
                 if r.subject != name}
        if votes:
            node.store.record_votes(payload.context, voter, votes, payload.epoch)

    # -- flood adversary ---------------------------------------------------------------------

    def _flood_emit(self, adv_index: int, emitted: int):
        adv = self.cfg.adversaries[adv_index]
        if self.now >= adv.end_ms or self.now >= self.cfg.horizon_ms:
            return
        rng = self._adv_rngs[adv_index]
        routes = self._flood_routes[adv_index]
        route = routes[emitted % len(routes)]
        fid = FLOOD_FLOW_BASE + adv_index * 10 + emitted % len(routes)
        packet = make_voice_packet(fid, emitted, self._silence, self.now, origin=adv.node)
        packet = replace(packet,
                         ip_tos=rng.getrandbits(8), ip_id=rng.getrandbits(16),
                         ip_flags_reserved=rng.getrandbits(1),
                         udp_checksum=rng.getrandbits(16))
        packet = with_meta(packet, route=tuple(route))
        self.report.counters["adv_injected"] += 1
        self._link_send(adv.node, route[1], packet)
        period = 1000.0 / float(adv.params["rate_pps"])
        self._schedule(self.now + period, self._flood_emit, adv_index, emitted + 1)

    # -- finalization --------------------------------------------------------------------------

    def _finalize(self):
        in_flight = 0
        for t, _, fn, args in self._heap:
            if fn == self._arrive and args[1].meta.flow in self.known_flows \
                    and not args[1].meta.replayed:
                in_flight += 1
        self.report.counters["legit_in_flight"] = in_flight
        replay_suspects = sum(rx.replay_suspects for node in self.nodes.values()
                              for rx in node.rx.values())
        self.report.counters["replay_suspects"] = replay_suspects
        self.report.finalize(self)
