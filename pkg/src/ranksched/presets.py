"""Canned experiments ("desks") with pinned workloads and seeds.

Each desk is a zero-argument recipe (apart from a --jobs knob) that builds
its own traces, trains whatever models it needs, runs the simulations, and
returns a JSON-friendly dict.  Independent simulations inside a desk can
fan out over processes; results are aggregated in submission order so the
output never depends on scheduling of the pool.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

from .engine import COST_PRESETS, _rebuild_trace, run
from .predictors import (
    OracleScorer,
    TrainConfig,
    scorer_from_dict,
    train_classifier,
    train_ranking,
)
from .schedulers import SchedulerConfig
from .workload import LengthDist, fixed_burst, generate_burst, generate_poisson


def _sim_task(spec: dict) -> tuple[str, dict]:
    """Worker for one simulation; everything in spec is picklable."""
    trace = _rebuild_trace(spec["trace_meta"])
    if trace is None:
        raise ValueError("desk task trace is not reconstructible")
    scorer = scorer_from_dict(spec["scorer"]) if spec.get("scorer") else None
    res = run(
        trace,
        policy=spec["policy"],
        scorer=scorer,
        sched=SchedulerConfig(**spec.get("sched", {})),
        cost=COST_PRESETS[spec.get("cost", "default")],
        kv_budget=spec.get("kv_budget"),
        seed=spec.get("seed", 0),
        stop_after_finished=spec.get("stop_after"),
    )
    return spec["key"], res.metrics


def _run_tasks(tasks: list[dict], jobs: int) -> dict[str, dict]:
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            pairs = list(ex.map(_sim_task, tasks))
    else:
        pairs = [_sim_task(t) for t in tasks]
    return dict(pairs)


def desk_fig1(jobs: int = 1) -> dict:
    """Three-request hand example: arrival order vs shortest-first.

    Burst of lengths 10, 2, 1 on a batch-of-1 server where every token
    takes exactly one second.  Serving in arrival order gives per-token
    latencies (1, 6, 13); serving shortest-first gives (1.3, 1.5, 1).
    """
    trace = fixed_burst([10, 2, 1])
    sched = SchedulerConfig(max_batch=1, starvation_threshold=0)
    cost = COST_PRESETS["unit"]
    out = {}
    for key, policy, scorer in (("fcfs", "fcfs", None),
                                ("ranking_oracle", "ranking", OracleScorer())):
        res = run(trace, policy, scorer=scorer, sched=sched, cost=cost)
        out[key] = {
            "per_token_latency_s": [r["per_token_latency_s"]
                                    for r in res.requests],
            "latency_s": [r["latency_s"] for r in res.requests],
            "mean_per_token_latency_s":
                res.metrics["mean_per_token_latency_s"],
        }
    return out


_BURST_DIST = "lognormal(5.0,0.8)"
_BURST_PNOISE = 0.25


def desk_burst(jobs: int = 1) -> dict:
    """Train-and-serve comparison on a 200-request burst.

    Trains the listwise ranker and two classification baselines on 2000
    held-out requests from the same distribution, then serves the burst
    under FCFS, the trained ranker, and the 10-bucket classifier.
    """
    dist = LengthDist.parse(_BURST_DIST)
    train_trace = generate_burst(2000, dist, seed=11, prompt_noise=_BURST_PNOISE)
    sim_trace = generate_burst(200, dist, seed=12, prompt_noise=_BURST_PNOISE)
    cfg = TrainConfig(seed=0)
    rank = train_ranking(train_trace, cfg, eval_trace=sim_trace)
    cls10 = train_classifier(train_trace, cfg, n_buckets=10,
                             eval_trace=sim_trace)
    cls1 = train_classifier(train_trace, cfg, n_buckets=None, bucket_size=1,
                            eval_trace=sim_trace)
    sched = {"max_batch": 32, "starvation_threshold": 0}
    meta = sim_trace.metadata
    tasks = [
        {"key": "fcfs", "trace_meta": meta, "policy": "fcfs", "sched": sched},
        {"key": "ranking_model", "trace_meta": meta, "policy": "ranking",
         "scorer": rank.scorer.to_dict(), "sched": sched},
        {"key": "classifier10", "trace_meta": meta, "policy": "ranking",
         "scorer": cls10.scorer.to_dict(), "sched": sched},
    ]
    return {
        "train": {
            "ranking": rank.report,
            "classifier10": cls10.report,
            "classifier_bs1": cls1.report,
        },
        "sim": _run_tasks(tasks, jobs),
    }


def desk_rate_sweep(jobs: int = 1) -> dict:
    """Mean latency vs arrival rate for several policies.

    Poisson arrivals at increasing rates over a fixed 300-request
    workload; the server saturates near 5 requests/s, so the sweep spans
    light load through heavy overload.  MLFQ runs with a 1-second base
    quantum, scaled to this cost model's service times.
    """
    rates = [1.0, 2.0, 4.0, 8.0]
    n, seed = 300, 31
    dist = "lognormal(4.5,0.8)"
    sched = {"max_batch": 16, "starvation_threshold": 0}
    mlfq_sched = dict(sched, mlfq_base_quantum=1.0)
    policies = [
        ("fcfs", "fcfs", None, sched),
        ("mlfq", "mlfq", None, mlfq_sched),
        ("ranking_oracle", "ranking", {"kind": "oracle"}, sched),
        ("perception", "ranking",
         {"kind": "perception", "warmup_tokens": 15, "sigma": 0.35}, sched),
    ]
    tasks = []
    for rate in rates:
        meta = generate_poisson(rate, n, LengthDist.parse(dist), seed).metadata
        for key, policy, scorer, sc in policies:
            tasks.append({"key": f"{key}@{rate}", "trace_meta": meta,
                          "policy": policy, "scorer": scorer, "sched": sc})
    sims = _run_tasks(tasks, jobs)
    table = {key: [sims[f"{key}@{rate}"]["mean_per_token_latency_s"]
                   for rate in rates]
             for key, _, _, _ in policies}
    return {"rates": rates, "mean_per_token_latency_s": table, "sim": sims}


def desk_sdg(jobs: int = 1) -> dict:
    """First-100-of-1000 completion race, as in batch data generation.

    When only some fixed number of completions is needed, serving
    predicted-short requests first finishes the quota far sooner than
    arrival order.  Reports the time for the first 100 of a 1000-request
    burst to finish.
    """
    dist = LengthDist.parse("sharegpt")
    work = generate_burst(1000, dist, seed=21, prompt_noise=_BURST_PNOISE)
    train_trace = generate_burst(2000, dist, seed=22,
                                 prompt_noise=_BURST_PNOISE)
    rank = train_ranking(train_trace, TrainConfig(seed=0))
    sched = {"max_batch": 32, "starvation_threshold": 0}
    tasks = [
        {"key": "fcfs", "trace_meta": work.metadata, "policy": "fcfs",
         "sched": sched, "stop_after": 100},
        {"key": "oracle", "trace_meta": work.metadata, "policy": "ranking",
         "scorer": {"kind": "oracle"}, "sched": sched, "stop_after": 100},
        {"key": "trained", "trace_meta": work.metadata, "policy": "ranking",
         "scorer": rank.scorer.to_dict(), "sched": sched, "stop_after": 100},
    ]
    sims = _run_tasks(tasks, jobs)
    return {
        "n": 1000,
        "stop_after": 100,
        "train": {"ranking": {k: v for k, v in rank.report.items()
                              if k != "checkpoints"}},
        "sim": sims,
        "speedup_oracle": sims["fcfs"]["makespan_s"]
            / sims["oracle"]["makespan_s"],
        "speedup_trained": sims["fcfs"]["makespan_s"]
            / sims["trained"]["makespan_s"],
    }


def desk_bucket_study(jobs: int = 1) -> dict:
    """Classification granularity study: accuracy vs rank quality.

    Trains classifiers with 10 buckets and with fixed bucket sizes 100,
    10, and 1 on the same data, plus the listwise ranker for reference.
    Each is then used to order a 200-request burst.  Bucket size 1 has the
    hardest accuracy target yet that number says little about scheduling
    quality, which is the point of reporting both.
    """
    dist = LengthDist.parse(_BURST_DIST)
    train_trace = generate_burst(2000, dist, seed=41,
                                 prompt_noise=_BURST_PNOISE)
    eval_trace = generate_burst(200, dist, seed=42,
                                prompt_noise=_BURST_PNOISE)
    cfg = TrainConfig(seed=0)
    variants = [
        ("n_buckets=10", {"n_buckets": 10}),
        ("bucket_size=100", {"n_buckets": None, "bucket_size": 100}),
        ("bucket_size=10", {"n_buckets": None, "bucket_size": 10}),
        ("bucket_size=1", {"n_buckets": None, "bucket_size": 1}),
    ]
    sched = {"max_batch": 32, "starvation_threshold": 0}
    train_out, tasks = {}, []
    for key, kw in variants:
        res = train_classifier(train_trace, cfg, eval_trace=eval_trace, **kw)
        train_out[key] = res.report
        tasks.append({"key": key, "trace_meta": eval_trace.metadata,
                      "policy": "ranking", "scorer": res.scorer.to_dict(),
                      "sched": sched})
    rank = train_ranking(train_trace, cfg, eval_trace=eval_trace)
    train_out["ranking"] = rank.report
    tasks.append({"key": "ranking", "trace_meta": eval_trace.metadata,
                  "policy": "ranking", "scorer": rank.scorer.to_dict(),
                  "sched": sched})
    sims = _run_tasks(tasks, jobs)
    return {
        "train": train_out,
        "sim": sims,
        "mean_per_token_latency_s": {
            k: sims[k]["mean_per_token_latency_s"] for k, _ in variants},
    }


def desk_starvation(jobs: int = 1) -> dict:
    """Starvation control on a near-capacity stream.

    Score-ordered scheduling with exact lengths pushes long requests to
    the back of a busy queue indefinitely; the promotion mechanism caps
    how long any request goes unscheduled at some cost in mean latency.
    Compares promotion off (threshold 0) against the default threshold.
    """
    dist = LengthDist.parse("sharegpt")
    meta = generate_poisson(4.0, 400, dist, seed=51).metadata
    base = {"max_batch": 32}
    tasks = [
        {"key": "off", "trace_meta": meta, "policy": "ranking",
         "scorer": {"kind": "oracle"},
         "sched": dict(base, starvation_threshold=0)},
        {"key": "on", "trace_meta": meta, "policy": "ranking",
         "scorer": {"kind": "oracle"},
         "sched": dict(base, starvation_threshold=200, priority_quantum=20)},
    ]
    sims = _run_tasks(tasks, jobs)
    off, on = sims["off"], sims["on"]
    return {
        "sim": sims,
        "max_wait_reduction": off["mean_max_waiting_s"]
            / on["mean_max_waiting_s"],
        "latency_inflation": on["mean_per_token_latency_s"]
            / off["mean_per_token_latency_s"] - 1.0,
    }


DESKS = {
    "fig1": desk_fig1,
    "burst-desk": desk_burst,
    "rate-sweep-desk": desk_rate_sweep,
    "sdg-desk": desk_sdg,
    "bucket-study-desk": desk_bucket_study,
    "starvation-desk": desk_starvation,
}


def run_desk(name: str, jobs: int = 1) -> dict:
    if name not in DESKS:
        raise ValueError(
            f"unknown desk {name!r}; choose from {', '.join(sorted(DESKS))}")
    return DESKS[name](jobs=jobs)
