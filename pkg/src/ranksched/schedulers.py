"""Batch scheduling policies.

Every policy is "sort candidates, then greedily fill a batch" with two
degrees of freedom: the sort key and whether running requests compete with
waiting ones (preemptive) or stay pinned to the batch (non-preemptive).
The fill skips requests that do not fit in the KV budget and keeps going,
so one large request cannot block smaller ones behind it.

KV accounting: a request needs prompt_tokens + generated_tokens + 1 cells
to run its next step (preempted requests are restored by recomputation, so
the same formula applies on resume).  Even non-preemptive policies will
drop a running request when the budget no longer covers it; the engine
then treats that as a preemption.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .workload import Request, RequestState

NS_PER_S = 1_000_000_000


@dataclass(frozen=True)
class SchedulerConfig:
    """Knobs shared by all policies; MLFQ and ranking read their own fields."""

    max_batch: int = 256
    preemption: bool = True
    # Ranking policy starvation control: a request unscheduled this many
    # times in a row is promoted ahead of score order for priority_quantum
    # scheduled iterations.  threshold 0 disables promotion entirely.
    starvation_threshold: int = 100
    priority_quantum: int = 50
    # MLFQ: queue k allows base * growth**k seconds of service before the
    # request is demoted to queue k+1.
    mlfq_base_quantum: float = 16.0
    mlfq_growth: float = 2.0
    mlfq_num_queues: int = 8

    def __post_init__(self):
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.starvation_threshold < 0:
            raise ValueError("starvation_threshold must be >= 0")
        if self.priority_quantum < 1:
            raise ValueError("priority_quantum must be >= 1")
        if self.mlfq_base_quantum <= 0 or self.mlfq_growth < 1:
            raise ValueError("bad MLFQ quantum parameters")
        if self.mlfq_num_queues < 1:
            raise ValueError("mlfq_num_queues must be >= 1")


@dataclass
class BatchDecision:
    """One scheduling step: who runs, plus priority-state transitions."""

    run: list[int]
    promoted: list[int] = field(default_factory=list)
    demoted: list[int] = field(default_factory=list)


def _kv_need(r: Request) -> int:
    return r.prompt_tokens + r.generated_tokens + 1


class Policy:
    name = "base"
    preemptive = True
    needs_scores = False

    def __init__(self, config: SchedulerConfig):
        self.config = config

    def sort_key(self, r: Request):
        raise NotImplementedError

    def on_admit(self, r: Request) -> None:
        """Called once when the engine admits a request."""

    def record_execution(self, run: list[Request], iter_ns: int) -> list[int]:
        """Called after each executed iteration; returns demoted ids."""
        return []

    def _fill(self, ordered: list[Request], kv_budget: int) -> list[Request]:
        run: list[Request] = []
        kv_used = 0
        for r in ordered:
            if len(run) >= self.config.max_batch:
                break
            need = _kv_need(r)
            if kv_used + need <= kv_budget:
                run.append(r)
                kv_used += need
        return run

    def schedule(self, candidates: list[Request], kv_budget: int) -> BatchDecision:
        if self.preemptive and self.config.preemption:
            ordered = sorted(candidates, key=self.sort_key)
        else:
            pinned = sorted(
                (r for r in candidates if r.state == RequestState.RUNNING),
                key=self.sort_key)
            rest = sorted(
                (r for r in candidates if r.state != RequestState.RUNNING),
                key=self.sort_key)
            ordered = pinned + rest
        return BatchDecision(run=[r.id for r in self._fill(ordered, kv_budget)])


class FCFSPolicy(Policy):
    name = "fcfs"
    preemptive = False

    def sort_key(self, r):
        return (r.arrival_time, r.id)


class SJFPolicy(Policy):
    """Shortest job first on true total output length; non-preemptive."""

    name = "sjf"
    preemptive = False

    def sort_key(self, r):
        return (r.true_output_tokens, r.arrival_time, r.id)


class SRTFPolicy(Policy):
    """Shortest remaining processing time on true lengths; preemptive."""

    name = "srtf"

    def sort_key(self, r):
        return (r.remaining_tokens, r.arrival_time, r.id)


class MLFQPolicy(Policy):
    """Multi-level feedback queue over wall-clock service time.

    Requests start in queue 0 and are demoted one level each time their
    accumulated service at the current level exceeds that level's quantum.
    Lower levels run first; within a level, arrival order.
    """

    name = "mlfq"

    def __init__(self, config: SchedulerConfig):
        super().__init__(config)
        self._level: dict[int, int] = {}
        self._acc_ns: dict[int, int] = {}

    def quantum_ns(self, level: int) -> int:
        q = self.config.mlfq_base_quantum * self.config.mlfq_growth ** level
        return int(round(q * NS_PER_S))

    def on_admit(self, r):
        self._level[r.id] = 0
        self._acc_ns[r.id] = 0

    def sort_key(self, r):
        return (self._level.get(r.id, 0), r.arrival_time, r.id)

    def record_execution(self, run, iter_ns):
        demoted = []
        bottom = self.config.mlfq_num_queues - 1
        for r in run:
            lvl = self._level.get(r.id, 0)
            self._acc_ns[r.id] = self._acc_ns.get(r.id, 0) + iter_ns
            if lvl < bottom and self._acc_ns[r.id] >= self.quantum_ns(lvl):
                self._level[r.id] = lvl + 1
                self._acc_ns[r.id] = 0
                demoted.append(r.id)
        return demoted


class RankingPolicy(Policy):
    """Score-ordered scheduling with starvation promotion.

    Sort order, first difference wins:
      1. unscored requests (a warmup-based scorer has not seen enough
         tokens yet) go first, oldest arrival first;
      2. promoted requests go before ordinary ones;
      3. ascending effective score -- the scorer's output, minus tokens
         already generated when the score is in token units, so a partially
         served request competes with its *remaining* work;
      4. arrival time, then id.

    Promotion bookkeeping runs inside schedule(): every candidate left out
    of the batch gains a starvation count; hitting the threshold promotes
    it for priority_quantum scheduled iterations, after which it drops back
    to score order.
    """

    name = "ranking"
    needs_scores = True

    def __init__(self, config: SchedulerConfig, length_calibrated: bool):
        super().__init__(config)
        self.length_calibrated = length_calibrated

    def effective_score(self, r: Request) -> float:
        if r.score is None:
            return 0.0
        if self.length_calibrated:
            return r.score - r.generated_tokens
        return r.score

    def sort_key(self, r):
        return (
            0 if r.score is None else 1,
            0 if r.priority else 1,
            self.effective_score(r),
            r.arrival_time,
            r.id,
        )

    def schedule(self, candidates, kv_budget):
        decision = super().schedule(candidates, kv_budget)
        scheduled = set(decision.run)
        cfg = self.config
        for r in candidates:
            if r.id in scheduled:
                r.starvation_count = 0
                if r.priority:
                    r.quantum -= 1
            else:
                r.starvation_count += 1
        for r in candidates:
            if cfg.starvation_threshold > 0 and \
                    r.starvation_count >= cfg.starvation_threshold:
                r.priority = True
                r.quantum = cfg.priority_quantum
                r.starvation_count = 0
                decision.promoted.append(r.id)
            elif r.priority and r.quantum <= 0:
                r.priority = False
                decision.demoted.append(r.id)
        return decision


def make_policy(name: str, config: SchedulerConfig,
                length_calibrated: bool = True) -> Policy:
    name = name.lower()
    if name == "fcfs":
        return FCFSPolicy(config)
    if name == "sjf":
        return SJFPolicy(config)
    if name == "srtf":
        return SRTFPolicy(config)
    if name == "mlfq":
        return MLFQPolicy(config)
    if name == "ranking":
        return RankingPolicy(config, length_calibrated)
    raise ValueError(f"unknown policy {name!r}")
