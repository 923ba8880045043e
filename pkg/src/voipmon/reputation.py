"""Reputation management: evidence, weighted voting and next-hop ranking.

Each node keeps, per subject and per context (performance "psr" / security
"ssr"), an own-experience value OE updated as an exponential moving average of
its epoch observations.  Second-hand votes arrive from neighbors, get
validated by correlating each voter's history against the node's own
observations, and are blended into the service reputation

    SR = alpha * OE + (1 - alpha) * sum(IR_p * V_p) / sum(IR_p)

over the surviving voters p.  A voter's information reputation IR tracks how
well its past votes matched later own observations.  Trust in a subject's
neighborhood (CR) scales the subject's averaged recommendations by its IR,
and the routing metric is PR = SR * CR.
"""

from __future__ import annotations

import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

PSR = "psr"
SSR = "ssr"
CONTEXTS = (PSR, SSR)

NEUTRAL_OE = 0.5
NEUTRAL_IR = 0.5
NEUTRAL_PR = 0.25  # 0.5 * 0.5, prior for never-observed candidates


class DomainError(ValueError):
    """Observation or vote outside [0, 1], or a broken invariant."""


class RoutingError(ValueError):
    """Next-hop query without candidates."""


class Action(Enum):
    """Short-term reactions keyed by (QoS acceptable, hash verification ok)."""

    MONITOR = "monitor"
    REESTABLISH_AND_ISOLATE = "reestablish_and_isolate"
    SHARE_REPUTATION_REROUTE = "share_reputation_reroute"
    REESTABLISH_SESSION = "reestablish_session"


def decide_action(psr_ok: bool, ssr_ok: bool) -> Action:
    """Map the two per-epoch acceptability bits to a reaction."""
    if psr_ok and ssr_ok:
        return Action.MONITOR
    if psr_ok and not ssr_ok:
        return Action.REESTABLISH_AND_ISOLATE
    if not psr_ok and ssr_ok:
        return Action.SHARE_REPUTATION_REROUTE
    return Action.REESTABLISH_SESSION


@dataclass
class ReputationParams:
    alpha: float = 0.5        # own-experience weight in SR
    beta: float = 0.3         # OE smoothing rate
    gamma: float = 0.1        # IR learning rate
    ir_floor: float = 0.01    # epsilon, IR never drops below
    overlap_min: int = 5      # K: epochs of overlap needed to correlate a voter
    corr_min: float = 0.0     # votes below this correlation are excluded
    low_overlap_ir_cap: float = 0.5
    psr_accept: float = 0.99  # epoch observation needed to call PSR acceptable
    ssr_accept: float = 0.99
    vote_stale_epochs: int = 2
    share_budget_bytes: int = 30

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must be in (0,1), got {self.alpha}")
        if not 0.0 < self.beta <= 1.0:
            raise DomainError(f"beta must be in (0,1], got {self.beta}")
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must be in (0,1], got {self.gamma}")
        if not 0.0 < self.ir_floor < 1.0:
            raise DomainError(f"ir_floor must be in (0,1), got {self.ir_floor}")


@dataclass(frozen=True)
class EvidenceRecord:
    subject: str
    epoch: int
    psr_obs: Optional[float] = None
    ssr_obs: Optional[float] = None
    source: str = "own"  # own | vote:<voter>
    ids_flags: Tuple[str, ...] = ()


@dataclass(frozen=True)
class SubjectScores:
    oe: float
    sr: float
    cr: float
    pr: float


# --- pure evaluation helpers -------------------------------------------------

def evaluate_sr(alpha: float, oe: float,
                votes: Mapping[str, float], ir_by_voter: Mapping[str, float]) -> float:
    """Service reputation as the alpha-blend of OE and the IR-weighted votes.

    With no eligible voters the weighted term collapses onto own experience,
    i.e. SR == OE.
    """
    if not votes:
        return oe
    num = 0.0
    den = 0.0
    for voter in sorted(votes):
        ir = ir_by_voter[voter]
        if ir <= 0.0:
            raise DomainError(f"voter {voter} has non-positive IR {ir}")
        v = votes[voter]
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"vote {v} from {voter} outside [0,1]")
        num += ir * v
        den += ir
    return alpha * oe + (1.0 - alpha) * num / den


def cumulative_reputation(ir_subject: float,
                          neighbor_votes: Mapping[str, float]) -> Tuple[float, bool]:
    """CR = IR(subject) * mean of the subject's votes about its own neighbors.

    Returns (value, neutral_flag); the flag marks the degenerate case of an
    empty neighborhood, where the mean is replaced by the neutral 0.5.
    """
    if ir_subject <= 0.0:
        raise DomainError(f"subject IR must be positive, got {ir_subject}")
    if not neighbor_votes:
        return ir_subject * 0.5, True
    mean = sum(neighbor_votes.values()) / len(neighbor_votes)
    return ir_subject * mean, False


def path_reputation(sr: float, cr: float) -> float:
    return sr * cr


def recommend_next_hop(pr_by_candidate: Mapping[str, float]) -> str:
    """argmax of PR; ties break toward the smallest node id."""
    if not pr_by_candidate:
        raise RoutingError("no next-hop candidates")
    best = None
    best_pr = -1.0
    for node in sorted(pr_by_candidate):
        pr = pr_by_candidate[node]
        if pr > best_pr:
            best, best_pr = node, pr
    return best


def quantize_unit(v: float) -> int:
    """[0,1] -> byte, round half-up with a float-representation guard."""
    clamped = min(1.0, max(0.0, v))
    return min(255, int(clamped * 255 + 0.5 + 1e-9))


def dequantize_unit(q: int) -> float:
    return q / 255.0


@dataclass(frozen=True)
class ShareRecord:
    subject: str
    sr_q: int
    ir_q: int


@dataclass(frozen=True)
class SharePayload:
    """One REP_SHARE message: voter's view of its subjects in one context."""

    context: str
    epoch: int
    records: Tuple[ShareRecord, ...]
    truncated: bool = False

    def encode(self, subject_index: Mapping[str, int]) -> bytes:
        """Wire form: header byte (ctx bit | count) then 3-byte records."""
        ctx_bit = 0x80 if self.context == SSR else 0x00
        out = bytearray([ctx_bit | (len(self.records) & 0x7F)])
        for rec in self.records:
            out.extend((subject_index[rec.subject] & 0xFF, rec.sr_q, rec.ir_q))
        return bytes(out)

    @classmethod
    def decode(cls, data: bytes, index_subject: Mapping[int, str], epoch: int) -> "SharePayload":
        context = SSR if data[0] & 0x80 else PSR
        count = data[0] & 0x7F
        records = []
        for i in range(count):
            base = 1 + 3 * i
            records.append(ShareRecord(subject=index_subject[data[base]],
                                       sr_q=data[base + 1], ir_q=data[base + 2]))
        return cls(context=context, epoch=epoch, records=tuple(records))


# --- stateful store -----------------------------------------------------------

class ReputationStore:
    """Evidence repository and reputation state of one evaluating node."""

    def __init__(self, owner: str, params: Optional[ReputationParams] = None):
        self.owner = owner
        self.params = params or ReputationParams()
        self._oe: Dict[Tuple[str, str], float] = {}
        self._ir: Dict[Tuple[str, str], float] = {}
        self._prev_sr: Dict[Tuple[str, str], float] = {}
        self._scores: Dict[Tuple[str, str], SubjectScores] = {}
        # own_hist[(ctx, subject)] -> list of (epoch, obs)
        self._own_hist: Dict[Tuple[str, str], List[Tuple[int, float]]] = defaultdict(list)
        # vote_hist[(ctx, voter)] -> list of (epoch, subject, value)
        self._vote_hist: Dict[Tuple[str, str], List[Tuple[int, str, float]]] = defaultdict(list)
        # latest received votes: votes[ctx][voter] -> {subject: value}, epoch-stamped
        self._votes: Dict[str, Dict[str, Tuple[int, Dict[str, float]]]] = {c: {} for c in CONTEXTS}
        self.evidence_log: List[EvidenceRecord] = []
        self.last_excluded: Dict[str, Set[str]] = {c: set() for c in CONTEXTS}
        self.last_capped: Dict[str, Set[str]] = {c: set() for c in CONTEXTS}

    # -- evidence intake

    def oe(self, ctx: str, subject: str) -> float:
        return self._oe.get((ctx, subject), NEUTRAL_OE)

    def ir(self, ctx: str, voter: str) -> float:
        return self._ir.get((ctx, voter), NEUTRAL_IR)

    def subjects(self, ctx: str) -> List[str]:
        return sorted({s for (c, s) in self._oe if c == ctx})

    def update_own_experience(self, ctx: str, subject: str, obs: float, epoch: int):
        """OE_n = beta*obs + (1-beta)*OE_{n-1}, starting from the 0.5 prior."""
        if not 0.0 <= obs <= 1.0:
            raise DomainError(f"observation {obs} outside [0,1]")
        beta = self.params.beta
        prev = self._oe.get((ctx, subject), NEUTRAL_OE)
        self._oe[(ctx, subject)] = beta * obs + (1.0 - beta) * prev
        self._own_hist[(ctx, subject)].append((epoch, obs))
        self.evidence_log.append(EvidenceRecord(
            subject=subject, epoch=epoch,
            psr_obs=obs if ctx == PSR else None,
            ssr_obs=obs if ctx == SSR else None))

    def record_votes(self, ctx: str, voter: str, votes: Mapping[str, float], epoch: int,
                     claimed_ir: Optional[Mapping[str, float]] = None):
        """Store a neighbor's shared reputation values as votes."""
        del claimed_ir  # informational only; the store trusts its own IR
        for subject in sorted(votes):
            v = votes[subject]
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"vote {v} outside [0,1]")
            self._vote_hist[(ctx, voter)].append((epoch, subject, v))
        self._votes[ctx][voter] = (epoch, dict(votes))

    def update_information_reputation(self, ctx: str, voter: str, vote: float, obs: float):
        """IR_n = clamp(IR_{n-1} + gamma*(1 - 2|V - obs|), floor, 1)."""
        if not 0.0 <= vote <= 1.0 or not 0.0 <= obs <= 1.0:
            raise DomainError("vote and observation must be in [0,1]")
        p = self.params
        prev = self._ir.get((ctx, voter), NEUTRAL_IR)
        nxt = prev + p.gamma * (1.0 - 2.0 * abs(vote - obs))
        self._ir[(ctx, voter)] = min(1.0, max(p.ir_floor, nxt))

    # -- vote validation

    def _overlap_series(self, ctx: str, voter: str) -> Tuple[List[float], List[float]]:
        """Paired (vote, own-obs) series over epochs/subjects both sides saw."""
        own = {}
        for (c, subject), hist in self._own_hist.items():
            if c != ctx:
                continue
            for epoch, obs in hist:
                own[(epoch, subject)] = obs
        votes: List[float] = []
        obs: List[float] = []
        for epoch, subject, v in self._vote_hist.get((ctx, voter), ()):
            key = (epoch, subject)
            if key in own:
                votes.append(v)
                obs.append(own[key])
        return votes, obs

    def validate_votes(self, ctx: str, epoch: int):
        """Split current votes into (eligible, excluded, low-overlap) voters.

        Voters whose vote series correlates below corr_min with own
        observations are dropped for this epoch; undefined correlations
        (either series constant) count as below threshold.  Voters with fewer
        than overlap_min paired points pass through, but their weight is
        capped at low_overlap_ir_cap when SR is evaluated.
        """
        p = self.params
        eligible: Dict[str, Dict[str, float]] = {}
        excluded: Set[str] = set()
        capped: Set[str] = set()
        for voter in sorted(self._votes[ctx]):
            stamp, votes = self._votes[ctx][voter]
            if epoch - stamp > p.vote_stale_epochs or not votes:
                continue
            vseries, oseries = self._overlap_series(ctx, voter)
            if len(vseries) < p.overlap_min:
                eligible[voter] = votes
                capped.add(voter)
                continue
            try:
                corr = statistics.correlation(vseries, oseries)
            except statistics.StatisticsError:
                corr = None
            if corr is None or corr < p.corr_min:
                excluded.add(voter)
                continue
            eligible[voter] = votes
        return eligible, excluded, capped

    # -- epoch evaluation

    def close_epoch(self, ctx: str, epoch: int,
                    neighborhoods: Mapping[str, Sequence[str]]) -> Dict[str, SubjectScores]:
        """Validate votes, refresh IR, and compute SR/CR/PR for every subject.

        neighborhoods maps each subject to its neighbor set as declared by the
        topology; the CR average runs over the subject's neighbors that are
        neither this node nor this node's own voters' duplicates.
        """
        p = self.params
        eligible, excluded, capped = self.validate_votes(ctx, epoch)

        # IR learns from every current vote about a subject we observed this epoch
        for voter in sorted(self._votes[ctx]):
            stamp, votes = self._votes[ctx][voter]
            if epoch - stamp > p.vote_stale_epochs:
                continue
            for subject in sorted(votes):
                hist = self._own_hist.get((ctx, subject), ())
                if hist and hist[-1][0] == epoch:
                    self.update_information_reputation(ctx, voter, votes[subject], hist[-1][1])

        scores: Dict[str, SubjectScores] = {}
        voted_subjects = {s for votes in eligible.values() for s in votes}
        for subject in sorted(set(self.subjects(ctx)) | voted_subjects):
            oe = self.oe(ctx, subject)
            votes_for_subject = {}
            ir_for_subject = {}
            for voter, votes in eligible.items():
                if voter == subject or subject not in votes:
                    continue
                votes_for_subject[voter] = votes[subject]
                ir = self.ir(ctx, voter)
                ir_for_subject[voter] = min(ir, p.low_overlap_ir_cap) if voter in capped else ir
            sr = evaluate_sr(p.alpha, oe, votes_for_subject, ir_for_subject)

            neighbor_votes = {}
            stamped = self._votes[ctx].get(subject)
            if stamped is not None and epoch - stamped[0] <= p.vote_stale_epochs:
                own_neighbors = set(neighborhoods.get(self.owner, ()))
                for peer, value in stamped[1].items():
                    if peer == self.owner or peer in own_neighbors:
                        continue
                    if peer in neighborhoods.get(subject, ()):
                        neighbor_votes[peer] = value
            cr, _neutral = cumulative_reputation(self.ir(ctx, subject), neighbor_votes)
            pr = path_reputation(sr, cr)
            self._prev_sr[(ctx, subject)] = self._scores.get((ctx, subject),
                                                             SubjectScores(oe, sr, cr, pr)).sr
            scores[subject] = SubjectScores(oe=oe, sr=sr, cr=cr, pr=pr)
            self._scores[(ctx, subject)] = scores[subject]
        self.last_excluded[ctx] = excluded
        self.last_capped[ctx] = capped
        return scores

    def pr(self, ctx: str, subject: str) -> float:
        scores = self._scores.get((ctx, subject))
        return scores.pr if scores is not None else NEUTRAL_PR

    def routing_score(self, subject: str) -> float:
        """Conservative next-hop metric: the worse of the two context PRs."""
        return min(self.pr(PSR, subject), self.pr(SSR, subject))

    # -- sharing

    def share_payload(self, ctx: str, epoch: int) -> Optional[SharePayload]:
        """Build this epoch's outgoing vote payload, budget-capped.

        When the payload would exceed the byte budget the subjects whose SR
        moved the most since last epoch are kept.
        """
        subjects = [s for s in self.subjects(ctx) if (ctx, s) in self._scores]
        if not subjects:
            return None
        budget_records = max(1, (self.params.share_budget_bytes - 1) // 3)
        deltas = []
        for s in subjects:
            sr = self._scores[(ctx, s)].sr
            delta = abs(sr - self._prev_sr.get((ctx, s), sr))
            deltas.append((-delta, s))
        deltas.sort()
        truncated = len(deltas) > budget_records
        keep = sorted(s for _, s in deltas[:budget_records])
        records = tuple(
            ShareRecord(subject=s, sr_q=quantize_unit(self._scores[(ctx, s)].sr),
                        ir_q=quantize_unit(self.ir(ctx, s)))
            for s in keep)
        return SharePayload(context=ctx, epoch=epoch, records=records, truncated=truncated)
