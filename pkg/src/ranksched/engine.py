"""Discrete-event simulator for continuous-batching token generation.

Time is integer nanoseconds.  Each scheduling step runs one decode
iteration: every request in the chosen batch emits exactly one token, and
the step's duration is

    prefill cost for requests (re)entering the batch
      + one decode iteration (optionally a function of batch size)
      + length-predictor inference charged for newly scored requests.

Preempted requests release their KV cells and are restored by
recomputation: tokens already generated are kept (and their timestamps do
not change), but the prompt plus those tokens must be prefilled again when
the request re-enters a batch.

Every run can emit a self-contained event log; :func:`replay` re-executes
a log without the policy or scorer and verifies it reproduces the original
result bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

from .ranking import kendall_tau_b, latency_stats
from .schedulers import NS_PER_S, SchedulerConfig, make_policy
from .workload import LengthDist, Request, RequestState, Trace
from .workload import fixed_burst, generate_burst, generate_poisson, load_trace
from .workload import resample_lengths

RESULT_FORMAT = "ranksched-result"
EVENTS_FORMAT = "ranksched-events"
FORMAT_VERSION = 1

_UNLIMITED_KV = 1 << 62


@dataclass(frozen=True)
class CostModel:
    """Iteration timing in nanoseconds.

    decode_table, when given, maps batch size b to the decode cost of one
    iteration via decode_table[min(b, len) - 1]; otherwise decode_ns is a
    batch-size-independent constant.
    """

    decode_ns: int = 25_000_000
    prefill_ns_per_token: int = 40_000
    predictor_ns_per_request: int = 500_000
    decode_table: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.decode_ns <= 0:
            raise ValueError("decode_ns must be > 0")
        if self.prefill_ns_per_token < 0 or self.predictor_ns_per_request < 0:
            raise ValueError("cost components must be >= 0")
        if self.decode_table is not None:
            object.__setattr__(self, "decode_table", tuple(self.decode_table))
            if not self.decode_table or any(v <= 0 for v in self.decode_table):
                raise ValueError("decode_table entries must be > 0")

    def decode_cost(self, batch_size: int) -> int:
        if self.decode_table is not None:
            return self.decode_table[min(batch_size, len(self.decode_table)) - 1]
        return self.decode_ns

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["decode_table"] is not None:
            d["decode_table"] = list(d["decode_table"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        table = d.get("decode_table")
        return cls(d["decode_ns"], d["prefill_ns_per_token"],
                   d["predictor_ns_per_request"],
                   tuple(table) if table else None)


# "unit" makes one decode iteration cost exactly one second with free
# prefill, so latencies can be read off as token counts in hand examples.
COST_PRESETS = {
    "default": CostModel(),
    "fast": CostModel(decode_ns=1_000_000, prefill_ns_per_token=2_000,
                      predictor_ns_per_request=20_000),
    "unit": CostModel(decode_ns=NS_PER_S, prefill_ns_per_token=0,
                      predictor_ns_per_request=0),
}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _sha256(obj) -> str:
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


class ReplayError(RuntimeError):
    """Event log does not match the supplied trace/cost model, or is cut short."""


@dataclass
class _ReqTrack:
    """Latency bookkeeping for one request; O(1) memory."""

    arrival_ns: int
    first_token_ns: int | None = None
    last_event_ns: int = 0
    max_gap_ns: int = 0
    finish_ns: int | None = None
    n_preempted: int = 0

    def on_token(self, now_ns: int) -> None:
        gap = now_ns - self.last_event_ns
        if gap > self.max_gap_ns:
            self.max_gap_ns = gap
        if self.first_token_ns is None:
            self.first_token_ns = now_ns
        self.last_event_ns = now_ns


@dataclass
class SimResult:
    """Everything a run produced: config echo, metrics, per-request rows,
    and the step-by-step event records."""

    config: dict
    metrics: dict
    requests: list[dict]
    records: list[dict] = field(default_factory=list, repr=False)

    def digest(self) -> str:
        return _sha256({"metrics": self.metrics, "requests": self.requests})

    def to_json_obj(self) -> dict:
        return {
            "format": RESULT_FORMAT,
            "version": FORMAT_VERSION,
            "config": self.config,
            "metrics": self.metrics,
            "requests": self.requests,
            "result_digest": self.digest(),
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_obj(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    _CSV_COLS = ("id", "arrival_s", "prompt_tokens", "output_tokens", "status",
                 "first_token_s", "finish_s", "latency_s",
                 "per_token_latency_s", "max_wait_s", "n_preempted")

    def to_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self._CSV_COLS)
            for row in self.requests:
                w.writerow(["" if row[c] is None else row[c]
                            for c in self._CSV_COLS])

    def write_event_log(self, path: str) -> None:
        header = {
            "format": EVENTS_FORMAT,
            "version": FORMAT_VERSION,
            "config": self.config,
            "n_steps": len(self.records),
            "result_digest": self.digest(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_canonical(header) + "\n")
            for rec in self.records:
                fh.write(_canonical(rec) + "\n")


def _arrival_ns(r: Request) -> int:
    return int(round(r.arrival_time * NS_PER_S))


class _Sim:
    """Shared execution core for live runs and replays.

    A live run asks the policy for each batch; a replay applies recorded
    batches and verifies the arithmetic.  Both accumulate identical
    bookkeeping, which is what makes digest comparison meaningful.
    """

    def __init__(self, trace: Trace, cost: CostModel, kv_budget: int | None):
        self.trace = trace
        self.cost = cost
        self.kv_budget = _UNLIMITED_KV if kv_budget is None else int(kv_budget)
        if self.kv_budget < 1:
            raise ValueError("kv_budget must be >= 1")
        self.reqs = [r.fresh_copy() for r in trace]
        self.by_id = {r.id: r for r in self.reqs}
        self.now_ns = 0
        self.next_arrival = 0  # index into self.reqs
        self.alive: dict[int, Request] = {}
        self.track: dict[int, _ReqTrack] = {}
        self.dropped: set[int] = set()
        self.finished: list[int] = []
        self.records: list[dict] = []
        self.total_predictor_ns = 0
        self.total_prefill_ns = 0
        self.total_decode_ns = 0

    # -- admission ---------------------------------------------------------

    def pending(self) -> bool:
        return self.next_arrival < len(self.reqs)

    def jump_if_idle(self) -> None:
        if not self.alive and self.pending():
            arr = _arrival_ns(self.reqs[self.next_arrival])
            if arr > self.now_ns:
                self.now_ns = arr

    def admit_due(self) -> tuple[list[int], list[int]]:
        admitted, dropped = [], []
        while self.pending():
            r = self.reqs[self.next_arrival]
            if _arrival_ns(r) > self.now_ns:
                break
            self.next_arrival += 1
            if r.prompt_tokens + r.true_output_tokens > self.kv_budget:
                # Could never hold its full context; it would wedge the
                # batch forever, so refuse it up front.
                self.dropped.add(r.id)
                dropped.append(r.id)
                continue
            r.state = RequestState.WAITING
            self.alive[r.id] = r
            t = _ReqTrack(arrival_ns=_arrival_ns(r))
            t.last_event_ns = t.arrival_ns
            self.track[r.id] = t
            admitted.append(r.id)
        return admitted, dropped

    # -- one iteration -----------------------------------------------------

    def execute(self, run_ids: list[int], predictor_ns: int) -> dict:
        run = [self.alive[i] for i in run_ids]
        preempted = []
        for r in self.alive.values():
            if r.state == RequestState.RUNNING and r.id not in set(run_ids):
                r.state = RequestState.PREEMPTED
                self.track[r.id].n_preempted += 1
                preempted.append(r.id)

        prefill_ns = 0
        for r in run:
            if r.state != RequestState.RUNNING:
                prefill_ns += (r.prompt_tokens + r.generated_tokens) \
                    * self.cost.prefill_ns_per_token
                r.state = RequestState.RUNNING
        decode_ns = self.cost.decode_cost(len(run))
        iter_ns = prefill_ns + decode_ns + predictor_ns
        self.now_ns += iter_ns
        self.total_prefill_ns += prefill_ns
        self.total_decode_ns += decode_ns
        self.total_predictor_ns += predictor_ns

        finished = []
        for r in run:
            r.generated_tokens += 1
            self.track[r.id].on_token(self.now_ns)
            if r.generated_tokens >= r.true_output_tokens:
                r.state = RequestState.FINISHED
                self.track[r.id].finish_ns = self.now_ns
                del self.alive[r.id]
                self.finished.append(r.id)
                finished.append(r.id)
        return {
            "iter_ns": iter_ns,
            "preempted": preempted,
            "finished": finished,
            "predictor_ns": predictor_ns,
        }

    # -- results -----------------------------------------------------------

    def request_rows(self) -> list[dict]:
        rows = []
        for r in self.reqs:
            t = self.track.get(r.id)
            if r.id in self.dropped:
                status = "dropped"
            elif t is None:
                status = "unarrived"
            elif t.finish_ns is not None:
                status = "finished"
            else:
                status = "unfinished"
            row = {
                "id": r.id,
                "arrival_s": r.arrival_time,
                "prompt_tokens": r.prompt_tokens,
                "output_tokens": r.true_output_tokens,
                "status": status,
                "first_token_s": None,
                "finish_s": None,
                "latency_s": None,
                "per_token_latency_s": None,
                "max_wait_s": None,
                "n_preempted": t.n_preempted if t else 0,
            }
            if t and t.first_token_ns is not None:
                row["first_token_s"] = t.first_token_ns / NS_PER_S
                row["max_wait_s"] = t.max_gap_ns / NS_PER_S
            if t and t.finish_ns is not None:
                row["finish_s"] = t.finish_ns / NS_PER_S
                lat_ns = t.finish_ns - t.arrival_ns
                row["latency_s"] = lat_ns / NS_PER_S
                row["per_token_latency_s"] = \
                    lat_ns / r.true_output_tokens / NS_PER_S
            rows.append(row)
        return rows

    def metrics(self, rows: list[dict]) -> dict:
        done = [r for r in rows if r["status"] == "finished"]
        stats = latency_stats(
            [r["latency_s"] for r in done],
            [r["per_token_latency_s"] for r in done],
            [r["max_wait_s"] for r in done],
            makespan=self.now_ns / NS_PER_S,
        )
        if len(done) >= 2:
            tau = kendall_tau_b([r["first_token_s"] for r in done],
                                [r["output_tokens"] for r in done]).tau
        else:
            tau = 0.0
        return {
            "n_finished": len(done),
            "n_dropped": len(self.dropped),
            "n_unfinished": sum(1 for r in rows
                                if r["status"] in ("unfinished", "unarrived")),
            "n_preemptions": sum(r["n_preempted"] for r in rows),
            "steps": len(self.records),
            "makespan_s": stats.makespan,
            "throughput_rps": stats.throughput,
            "mean_latency_s": stats.mean_latency,
            "p90_latency_s": stats.p90_latency,
            "mean_per_token_latency_s": stats.mean_per_token_latency,
            "p90_per_token_latency_s": stats.p90_per_token_latency,
            "mean_max_waiting_s": stats.mean_max_waiting_time,
            "p90_max_waiting_s": stats.p90_max_waiting_time,
            "execution_order_tau": tau,
            "total_prefill_ns": self.total_prefill_ns,
            "total_decode_ns": self.total_decode_ns,
            "total_predictor_ns": self.total_predictor_ns,
        }


def _run_config(trace: Trace, policy_name: str, scorer, sched: SchedulerConfig,
                cost: CostModel, kv_budget, seed, rescore,
                stop_after_finished, time_limit_s) -> dict:
    cfg = {
        "policy": policy_name,
        "scorer": None if scorer is None else scorer.kind,
        "scorer_hash": None if scorer is None else _sha256(scorer.to_dict()),
        "sched": asdict(sched),
        "cost": cost.to_dict(),
        "kv_budget": kv_budget,
        "seed": seed,
        "rescore": rescore,
        "stop_after_finished": stop_after_finished,
        "time_limit_s": time_limit_s,
        "trace_fingerprint": trace.fingerprint(),
        "trace_meta": trace.metadata,
        "n_requests": len(trace),
    }
    cfg["config_hash"] = _sha256(cfg)
    return cfg


def run(trace: Trace, policy: str = "fcfs", scorer=None,
        sched: SchedulerConfig = SchedulerConfig(),
        cost: CostModel = COST_PRESETS["default"],
        kv_budget: int | None = None, seed: int = 0, rescore: bool = False,
        stop_after_finished: int | None = None,
        time_limit_s: float | None = None,
        event_log_path: str | None = None) -> SimResult:
    """Simulate a trace under one policy and return the full result.

    ``rescore`` refreshes every live request's score on every step at zero
    predictor charge (the length head shares the forward pass the serving
    iteration runs anyway); predictor time is only charged the first time
    a request is scored, and only for scorers that run a real model.
    """
    length_calibrated = scorer.length_calibrated if scorer is not None else True
    pol = make_policy(policy, sched, length_calibrated)
    if pol.needs_scores and scorer is None:
        raise ValueError(f"policy {policy!r} needs a scorer")
    sim = _Sim(trace, cost, kv_budget)
    limit_ns = None if time_limit_s is None else int(round(time_limit_s * NS_PER_S))
    charged: set[int] = set()

    while True:
        sim.jump_if_idle()
        admitted, dropped = sim.admit_due()
        for rid in admitted:
            pol.on_admit(sim.alive[rid])
        if not sim.alive:
            break
        if limit_ns is not None and sim.now_ns >= limit_ns:
            break

        predictor_ns = 0
        scored: list[int] = []
        if scorer is not None:
            targets = [r for r in sim.alive.values()
                       if rescore or r.score is None]
            if targets:
                for r, s in zip(targets, scorer.score_batch(targets, seed)):
                    if s is None:
                        continue
                    r.score = s
                    if r.id not in charged:
                        charged.add(r.id)
                        scored.append(r.id)
                        if scorer.charges_predictor:
                            predictor_ns += cost.predictor_ns_per_request

        decision = pol.schedule(list(sim.alive.values()), sim.kv_budget)
        step = sim.execute(decision.run, predictor_ns)
        demoted = decision.demoted + pol.record_execution(
            [sim.by_id[i] for i in decision.run], step["iter_ns"])
        sim.records.append({
            "step": len(sim.records),
            "now_ns": sim.now_ns,
            "iter_ns": step["iter_ns"],
            "run": decision.run,
            "preempted": step["preempted"],
            "promoted": decision.promoted,
            "demoted": demoted,
            "admitted": admitted,
            "dropped": dropped,
            "finished": step["finished"],
            "scored": scored,
            "predictor_ns": predictor_ns,
        })
        if stop_after_finished is not None \
                and len(sim.finished) >= stop_after_finished:
            break
        if limit_ns is not None and sim.now_ns >= limit_ns:
            break

    config = _run_config(trace, policy, scorer, sched, cost, kv_budget, seed,
                         rescore, stop_after_finished, time_limit_s)
    rows = sim.request_rows()
    result = SimResult(config, sim.metrics(rows), rows, sim.records)
    if event_log_path is not None:
        result.write_event_log(event_log_path)
    return result


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


def _rebuild_trace(meta: dict) -> Trace | None:
    """Regenerate a synthetic trace from its recorded metadata."""
    if "resampled_seed" in meta:
        base_meta = {k: v for k, v in meta.items()
                     if k not in ("resampled_seed", "resample_sigma")}
        base = _rebuild_trace(base_meta)
        if base is None:
            return None
        return resample_lengths(base, meta["resampled_seed"],
                                meta["resample_sigma"])
    name = meta.get("name")
    if name == "poisson":
        return generate_poisson(meta["rate"], meta["n"],
                                LengthDist.parse(meta["dist"]), meta["seed"],
                                meta.get("prompt_noise", 0.0))
    if name == "burst":
        return generate_burst(meta["n"], LengthDist.parse(meta["dist"]),
                              meta["seed"], meta.get("prompt_noise", 0.0))
    if name == "fixed":
        return fixed_burst(meta["lengths"], meta.get("prompt_tokens", 4))
    return None


def replay(event_log_path: str, trace: Trace | None = None,
           trace_path: str | None = None) -> SimResult:
    """Re-execute an event log with no policy or scorer involved.

    The trace is rebuilt from the log's embedded generator metadata when
    possible; file-based traces must be re-supplied via ``trace`` or
    ``trace_path``.  Raises :class:`ReplayError` when the log is truncated,
    the trace differs, or the recorded timings disagree with the embedded
    cost model.
    """
    with open(event_log_path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (l.strip() for l in fh) if ln]
    if not lines:
        raise ReplayError("empty event log")
    header = json.loads(lines[0])
    if header.get("format") != EVENTS_FORMAT:
        raise ReplayError("not an event log file")
    if header.get("version") != FORMAT_VERSION:
        raise ReplayError(f"unsupported event log version {header.get('version')}")
    config = header["config"]
    records = [json.loads(ln) for ln in lines[1:]]
    if len(records) != header["n_steps"]:
        raise ReplayError(
            f"event log truncated: {len(records)} steps, header says "
            f"{header['n_steps']}")

    if trace is None and trace_path is not None:
        trace = load_trace(trace_path)
    if trace is None:
        trace = _rebuild_trace(config.get("trace_meta", {}))
    if trace is None:
        raise ReplayError("trace not reconstructible; pass trace or trace_path")
    if trace.fingerprint() != config["trace_fingerprint"]:
        raise ReplayError("trace fingerprint mismatch")

    cost = CostModel.from_dict(config["cost"])
    sim = _Sim(trace, cost, config["kv_budget"])
    for rec in records:
        now_before = rec["now_ns"] - rec["iter_ns"]
        if now_before < sim.now_ns:
            raise ReplayError(f"step {rec['step']}: clock went backwards")
        sim.now_ns = now_before
        admitted, dropped = sim.admit_due()
        if admitted != rec["admitted"] or dropped != rec["dropped"]:
            raise ReplayError(f"step {rec['step']}: admission mismatch")
        for rid in rec["run"]:
            if rid not in sim.alive:
                raise ReplayError(f"step {rec['step']}: request {rid} not alive")
        step = sim.execute(rec["run"], rec["predictor_ns"])
        if step["iter_ns"] != rec["iter_ns"]:
            raise ReplayError(
                f"step {rec['step']}: iteration cost {step['iter_ns']} != "
                f"recorded {rec['iter_ns']} (cost model mismatch?)")
        if step["preempted"] != rec["preempted"]:
            raise ReplayError(f"step {rec['step']}: preemption mismatch")
        if step["finished"] != rec["finished"]:
            raise ReplayError(f"step {rec['step']}: completion mismatch")
        sim.records.append(rec)

    rows = sim.request_rows()
    result = SimResult(config, sim.metrics(rows), rows, records)
    if result.digest() != header["result_digest"]:
        raise ReplayError("replayed result digest differs from recorded digest")
    return result
