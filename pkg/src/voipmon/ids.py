"""Anomaly-based intrusion detection with a behaviour model.

Each node learns per-metric mean/std over an attack-free learning period,
freezes the model, and afterwards raises an alarm when a metric exceeds
mu + k*sigma for m_consec consecutive intervals.  Alarms are grouped into
attack reports that name the offending flows and the upstream neighbor that
delivered them, which is what the reputation layer acts on.
"""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

METRIC_PACKET_RATE = "packet_rate"
METRIC_BYTE_RATE = "byte_rate"
METRIC_UNKNOWN_RATE = "unknown_session_rate"
METRIC_HASH_FAIL = "hash_failure_rate"
METRICS = (METRIC_PACKET_RATE, METRIC_BYTE_RATE, METRIC_UNKNOWN_RATE, METRIC_HASH_FAIL)

ATTACK_FLOOD = "FLOOD"
ATTACK_UNKNOWN_SESSION = "UNKNOWN_SESSION"
ATTACK_INTEGRITY = "INTEGRITY_ANOMALY"


class NotReadyError(RuntimeError):
    """Model queried before the learning period completed."""


@dataclass
class IdsConfig:
    k: float = 3.0           # threshold multiplier
    m_consec: int = 2        # consecutive excursions before an alarm
    learn_len: int = 20      # learning intervals
    sigma_min: float = 1.0   # std floor against zero-variance baselines
    all_nodes: bool = True   # False restricts detectors to edge (endpoint) nodes


@dataclass
class BehaviourModel:
    """Frozen per-metric baseline learned from attack-free traffic."""

    mu: Dict[str, float]
    sigma: Dict[str, float]

    def threshold(self, metric: str, k: float) -> float:
        return self.mu[metric] + k * self.sigma[metric]


def learn(samples_by_metric: Mapping[str, Sequence[float]], cfg: IdsConfig) -> BehaviourModel:
    """Build the frozen model; needs learn_len samples per metric."""
    mu: Dict[str, float] = {}
    sigma: Dict[str, float] = {}
    for metric in METRICS:
        samples = samples_by_metric.get(metric, ())
        if len(samples) < cfg.learn_len:
            raise NotReadyError(
                f"{metric}: {len(samples)} samples, need {cfg.learn_len} to learn")
        mu[metric] = statistics.fmean(samples)
        sigma[metric] = max(cfg.sigma_min, statistics.pstdev(samples))
    return BehaviourModel(mu=mu, sigma=sigma)


@dataclass(frozen=True)
class Alarm:
    interval: int
    metric: str
    value: float
    threshold: float


@dataclass(frozen=True)
class FlowIntervalStat:
    """Per-flow accounting of one interval, as seen by one node."""

    flow: int
    count: int
    upstream: str
    session_known: bool
    hash_failures: int = 0


@dataclass(frozen=True)
class AttackReport:
    attack_type: str
    flows: Tuple[int, ...]
    suspected: str
    first_interval: int
    metrics: Dict[str, float] = field(default_factory=dict)


def detect(model: BehaviourModel, values: Mapping[str, float], interval: int,
           consec: Dict[str, int], cfg: IdsConfig) -> List[Alarm]:
    """Threshold check with a persistence rule.

    consec carries the per-metric run lengths between calls; same inputs and
    counter state always give the same alarms.
    """
    alarms: List[Alarm] = []
    for metric in METRICS:
        value = values.get(metric, 0.0)
        threshold = model.threshold(metric, cfg.k)
        if value > threshold:
            consec[metric] = consec.get(metric, 0) + 1
            if consec[metric] >= cfg.m_consec:
                alarms.append(Alarm(interval=interval, metric=metric,
                                    value=value, threshold=threshold))
        else:
            consec[metric] = 0
    return alarms


def characterize(alarms: Sequence[Alarm],
                 recent_flows: Sequence[Sequence[FlowIntervalStat]]) -> List[AttackReport]:
    """Group alarmed traffic into one report per attack type.

    Unknown-session traffic is attributed to the upstream neighbor that
    delivered most of it.  Rate alarms with neither unknown flows nor hash
    failures in the window describe legitimate load shifts and produce no
    report (rerouted sessions land here); throughput degradation is the QoS
    monitor's job.
    """
    if not alarms:
        return []
    first_interval = min(a.interval for a in alarms)
    metrics_snapshot = {a.metric: a.value for a in alarms}
    alarmed = {a.metric for a in alarms}
    rate_alarm = bool(alarmed & {METRIC_PACKET_RATE, METRIC_BYTE_RATE})
    unknown_alarm = METRIC_UNKNOWN_RATE in alarmed
    hash_alarm = METRIC_HASH_FAIL in alarmed

    unknown_flows: Dict[int, int] = defaultdict(int)
    unknown_upstream: Dict[str, int] = defaultdict(int)
    failed_flows: Dict[int, int] = defaultdict(int)
    failed_upstream: Dict[str, int] = defaultdict(int)
    for interval_stats in recent_flows:
        for st in interval_stats:
            if not st.session_known:
                unknown_flows[st.flow] += st.count
                unknown_upstream[st.upstream] += st.count
            if st.hash_failures:
                failed_flows[st.flow] += st.hash_failures
                failed_upstream[st.upstream] += st.hash_failures

    def top(counter: Dict[str, int]) -> str:
        return min(counter, key=lambda k: (-counter[k], k))

    reports: List[AttackReport] = []
    if unknown_alarm and unknown_flows:
        attack = ATTACK_FLOOD if rate_alarm else ATTACK_UNKNOWN_SESSION
        reports.append(AttackReport(
            attack_type=attack, flows=tuple(sorted(unknown_flows)),
            suspected=top(unknown_upstream), first_interval=first_interval,
            metrics=metrics_snapshot))
    if hash_alarm and failed_flows:
        reports.append(AttackReport(
            attack_type=ATTACK_INTEGRITY, flows=tuple(sorted(failed_flows)),
            suspected=top(failed_upstream), first_interval=first_interval,
            metrics=metrics_snapshot))
    return reports


class IntrusionDetector:
    """Per-node detector: buffers the learning period, then watches intervals."""

    def __init__(self, cfg: Optional[IdsConfig] = None):
        self.cfg = cfg or IdsConfig()
        self.model: Optional[BehaviourModel] = None
        self._learning: Dict[str, List[float]] = {m: [] for m in METRICS}
        self._consec: Dict[str, int] = {}
        self._recent_flows: List[Sequence[FlowIntervalStat]] = []

    @property
    def learning(self) -> bool:
        return self.model is None

    def feed(self, interval: int, values: Mapping[str, float],
             flow_stats: Sequence[FlowIntervalStat]) -> List[AttackReport]:
        """Account one closed interval; returns attack reports, possibly empty.

        No alarm can fire while the model is still learning.
        """
        self._recent_flows.append(tuple(flow_stats))
        if len(self._recent_flows) > self.cfg.m_consec + 1:
            self._recent_flows.pop(0)
        if self.model is None:
            for metric in METRICS:
                self._learning[metric].append(values.get(metric, 0.0))
            if len(self._learning[METRIC_PACKET_RATE]) >= self.cfg.learn_len:
                self.model = learn(self._learning, self.cfg)
            return []
        alarms = detect(self.model, values, interval, self._consec, self.cfg)
        self.last_alarms = alarms
        if not alarms:
            return []
        return characterize(alarms, self._recent_flows)
