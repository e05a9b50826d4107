"""Output-length scorers and their training loops.

A scorer assigns each waiting/running request a number where *smaller means
serve earlier* (a predicted-length proxy in token units for the calibrated
scorers).  Scorers that run an actual model (ranking model, classifier)
charge inference time in the simulator; oracle-style scorers are free.

Trained scorers are small numpy models over hand-rolled prompt features,
optimized with Adam against either a listwise ranking loss or softmax
cross-entropy over coarse length buckets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .ranking import bucket_lengths, kendall_tau_b, list_mle_gradient, list_mle_loss
from .workload import FEATURE_DIM, Request, Trace

# Per-request noise streams get distinct tags so a noisy oracle and a
# self-report scorer on the same seed stay independent.
_NOISE_TAG_ORACLE = 1
_NOISE_TAG_PERCEPTION = 2


def _length_noise(seed: int, request_id: int, tag: int, sigma: float) -> float:
    rng = np.random.default_rng([seed, request_id, tag])
    return math.exp(rng.normal(0.0, sigma))


class Scorer:
    """Base class; see module docstring for the score orientation."""

    kind: str = "base"
    #: True when scores are in token units, so the scheduler may subtract
    #: tokens already generated to get a remaining-work estimate.
    length_calibrated: bool = True
    #: Tokens a request must have generated before it can be scored.
    warmup_tokens: int = 0
    #: True when scoring costs inference time in the simulator.
    charges_predictor: bool = False

    def score_batch(self, requests: list[Request], seed: int) -> list[float | None]:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class OracleScorer(Scorer):
    """Scores every request with its exact output length."""

    kind = "oracle"

    def score_batch(self, requests, seed):
        return [float(r.true_output_tokens) for r in requests]

    def to_dict(self):
        return {"kind": self.kind}


class NoisyOracleScorer(Scorer):
    """True length times lognormal noise exp(N(0, sigma^2)), fixed per request."""

    kind = "noisy-oracle"

    def __init__(self, sigma: float):
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.sigma = float(sigma)

    def score_batch(self, requests, seed):
        if self.sigma == 0.0:
            return [float(r.true_output_tokens) for r in requests]
        return [
            r.true_output_tokens
            * _length_noise(seed, r.id, _NOISE_TAG_ORACLE, self.sigma)
            for r in requests
        ]

    def to_dict(self):
        return {"kind": self.kind, "sigma": self.sigma}


class CrossSeedOracleScorer(Scorer):
    """Exact lengths taken from a *different* realization of the workload.

    Stands in for "we reran the same prompts with another sampling seed and
    used those lengths as predictions": perfectly informed about the
    distribution, imperfect about this run.
    """

    kind = "cross-seed-oracle"

    def __init__(self, lengths_by_id: dict[int, int]):
        self.lengths_by_id = {int(k): int(v) for k, v in lengths_by_id.items()}

    @classmethod
    def from_trace(cls, trace: Trace) -> "CrossSeedOracleScorer":
        return cls({r.id: r.true_output_tokens for r in trace})

    def score_batch(self, requests, seed):
        out = []
        for r in requests:
            if r.id not in self.lengths_by_id:
                raise KeyError(f"cross-seed oracle has no length for request {r.id}")
            out.append(float(self.lengths_by_id[r.id]))
        return out

    def to_dict(self):
        return {
            "kind": self.kind,
            "lengths_by_id": {str(k): v for k, v in sorted(self.lengths_by_id.items())},
        }


class PerceptionOnlyScorer(Scorer):
    """Requests estimate their own length after generating a few tokens.

    Until ``warmup_tokens`` tokens exist the request is unscored (score is
    None) and the scheduler falls back to arrival order for it.  After
    warmup the self-report is the true length perturbed by lognormal noise,
    fixed per request.  No model runs, so nothing is charged.
    """

    kind = "perception"

    def __init__(self, warmup_tokens: int = 15, sigma: float = 0.35):
        if warmup_tokens < 1:
            raise ValueError("warmup_tokens must be >= 1")
        if sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.warmup_tokens = int(warmup_tokens)
        self.sigma = float(sigma)

    def score_batch(self, requests, seed):
        out: list[float | None] = []
        for r in requests:
            if r.generated_tokens < self.warmup_tokens:
                out.append(None)
            elif self.sigma == 0.0:
                out.append(float(r.true_output_tokens))
            else:
                out.append(
                    r.true_output_tokens
                    * _length_noise(seed, r.id, _NOISE_TAG_PERCEPTION, self.sigma)
                )
        return out

    def to_dict(self):
        return {"kind": self.kind, "warmup_tokens": self.warmup_tokens,
                "sigma": self.sigma}


@dataclass
class _Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "_Standardizer":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std < 1e-12] = 1.0
        return cls(mean, std)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.std


class _Net:
    """Linear model or single-tanh-hidden-layer net over feature vectors."""

    def __init__(self, params: list[np.ndarray], hidden: int):
        self.params = params
        self.hidden = hidden

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "_Net":
        if hidden <= 0:
            return cls([np.zeros(dim), np.zeros(1)], 0)
        w1 = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden))
        w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=hidden)
        return cls([w1, np.zeros(hidden), w2, np.zeros(1)], hidden)

    def forward(self, X: np.ndarray) -> np.ndarray:
        if self.hidden <= 0:
            w, b = self.params
            return X @ w + b[0]
        w1, b1, w2, b2 = self.params
        self._h = np.tanh(X @ w1 + b1)
        return self._h @ w2 + b2[0]

    def backward(self, X: np.ndarray, dout: np.ndarray) -> list[np.ndarray]:
        if self.hidden <= 0:
            return [X.T @ dout, np.array([dout.sum()])]
        w1, b1, w2, b2 = self.params
        h = self._h
        dw2 = h.T @ dout
        db2 = np.array([dout.sum()])
        dpre = np.outer(dout, w2) * (1.0 - h * h)
        return [X.T @ dpre, dpre.sum(axis=0), dw2, db2]


class _Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RankingModelScorer(Scorer):
    """Trained listwise ranking model; higher net output means shorter.

    The returned score is the negated net output so that the usual
    ascending sort still puts predicted-short requests first.  Outputs live
    on an arbitrary learned scale, so this scorer is *not* length
    calibrated and the scheduler must not mix it with token counts.
    """

    kind = "ranking-model"
    length_calibrated = False
    charges_predictor = True

    def __init__(self, net: _Net, standardizer: _Standardizer):
        self.net = net
        self.standardizer = standardizer

    def raw_outputs(self, requests: list[Request]) -> np.ndarray:
        X = np.stack([r.features for r in requests])
        return self.net.forward(self.standardizer(X))

    def score_batch(self, requests, seed):
        return [-float(v) for v in self.raw_outputs(requests)]

    def to_dict(self):
        return {
            "kind": self.kind,
            "hidden": self.net.hidden,
            "params": [p.tolist() for p in self.net.params],
            "feat_mean": self.standardizer.mean.tolist(),
            "feat_std": self.standardizer.std.tolist(),
        }


class ClassifierScorer(Scorer):
    """Softmax classifier over fixed-width length buckets.

    The score is the midpoint of the argmax bucket, i.e. an actual token
    count, so it is length calibrated like the oracles.
    """

    kind = "classifier"
    charges_predictor = True

    def __init__(self, weights: np.ndarray, bias: np.ndarray,
                 standardizer: _Standardizer, bucket_size: int):
        self.weights = weights
        self.bias = bias
        self.standardizer = standardizer
        self.bucket_size = int(bucket_size)

    @property
    def n_buckets(self) -> int:
        return len(self.bias)

    def predict_buckets(self, requests: list[Request]) -> np.ndarray:
        X = self.standardizer(np.stack([r.features for r in requests]))
        logits = X @ self.weights + self.bias
        return np.argmax(logits, axis=1)

    def score_batch(self, requests, seed):
        buckets = self.predict_buckets(requests)
        return [float(b * self.bucket_size + self.bucket_size / 2.0) for b in buckets]

    def to_dict(self):
        return {
            "kind": self.kind,
            "bucket_size": self.bucket_size,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "feat_mean": self.standardizer.mean.tolist(),
            "feat_std": self.standardizer.std.tolist(),
        }


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    bucket_width: int = 10
    hidden: int = 0
    checkpoint_every: int = 20
    eval_fraction: float = 0.2
    seed: int = 0


@dataclass
class TrainResult:
    scorer: Scorer
    report: dict = field(default_factory=dict)


def _split_features(trace: Trace, cfg: TrainConfig, eval_trace: Trace | None):
    X = np.stack([r.features for r in trace])
    y = np.array([r.true_output_tokens for r in trace], dtype=np.int64)
    if eval_trace is not None:
        Xe = np.stack([r.features for r in eval_trace])
        ye = np.array([r.true_output_tokens for r in eval_trace], dtype=np.int64)
        return X, y, Xe, ye
    rng = np.random.default_rng(cfg.seed)
    idx = rng.permutation(len(y))
    n_eval = max(1, int(round(cfg.eval_fraction * len(y))))
    if n_eval >= len(y):
        raise ValueError("trace too small to split for evaluation")
    ev, tr = idx[:n_eval], idx[n_eval:]
    return X[tr], y[tr], X[ev], y[ev]


def _eval_tau(score_fn, Xe: np.ndarray, ye: np.ndarray) -> float:
    return kendall_tau_b(score_fn(Xe), ye).tau


def train_ranking(trace: Trace, cfg: TrainConfig = TrainConfig(),
                  eval_trace: Trace | None = None) -> TrainResult:
    """Fit a listwise ranking scorer on a trace.

    Each minibatch is treated as one ranked list: its requests are ordered
    by bucketed true length (shortest bucket first, ties kept stable) and
    the model maximizes the likelihood of that ordering.  Checkpoints
    record running train loss and held-out rank correlation so the loss ->
    quality relationship is observable.
    """
    if len(trace) < 4:
        raise ValueError("need at least 4 requests to train")
    X, y, Xe, ye = _split_features(trace, cfg, eval_trace)
    std = _Standardizer.fit(X)
    Xs, Xes = std(X), std(Xe)

    rng = np.random.default_rng(cfg.seed + 1)
    net = _Net.init(X.shape[1], cfg.hidden, rng)
    opt = _Adam(net.params, cfg.learning_rate, cfg.betas)

    def eval_scores(Xmat):
        return -net.forward(Xmat)

    step = 0
    window: list[float] = []
    checkpoints: list[dict] = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            Xb, yb = Xs[batch], y[batch]
            true_order = np.argsort(bucket_lengths(yb, cfg.bucket_width),
                                    kind="stable")
            g = net.forward(Xb)
            loss = list_mle_loss(g, true_order) / len(batch)
            dg = list_mle_gradient(g, true_order) / len(batch)
            opt.step(net.params, net.backward(Xb, dg))
            step += 1
            window.append(loss)
            if step % cfg.checkpoint_every == 0:
                checkpoints.append({
                    "step": step,
                    "train_loss": sum(window) / len(window),
                    "eval_tau": _eval_tau(eval_scores, Xes, ye),
                })
                window = []

    final_tau = _eval_tau(eval_scores, Xes, ye)
    scorer = RankingModelScorer(net, std)
    report = {
        "kind": "ranking",
        "steps": step,
        "checkpoints": checkpoints,
        "eval_tau": final_tau,
        "n_train": len(y),
        "n_eval": len(ye),
    }
    return TrainResult(scorer, report)


def train_classifier(trace: Trace, cfg: TrainConfig = TrainConfig(),
                     n_buckets: int | None = 10,
                     bucket_size: int | None = None,
                     eval_trace: Trace | None = None) -> TrainResult:
    """Fit the bucketed-classification baseline.

    Give either ``n_buckets`` (the observed length range is split evenly)
    or ``bucket_size`` (fixed width, as many buckets as the range needs).
    """
    if len(trace) < 4:
        raise ValueError("need at least 4 requests to train")
    X, y, Xe, ye = _split_features(trace, cfg, eval_trace)
    max_len = int(max(y.max(), ye.max()))
    if bucket_size is None:
        if n_buckets is None:
            raise ValueError("give n_buckets or bucket_size")
        bucket_size = max(1, math.ceil(max_len / n_buckets))
    if n_buckets is None:
        n_buckets = max_len // bucket_size + 1
    if n_buckets < 2:
        raise ValueError("classification needs at least 2 buckets")

    std = _Standardizer.fit(X)
    Xs, Xes = std(X), std(Xe)
    labels = np.minimum(y // bucket_size, n_buckets - 1)
    labels_e = np.minimum(ye // bucket_size, n_buckets - 1)

    W = np.zeros((X.shape[1], n_buckets))
    b = np.zeros(n_buckets)
    opt = _Adam([W, b], cfg.learning_rate, cfg.betas)
    rng = np.random.default_rng(cfg.seed + 1)

    def batch_grads(Xb, lb):
        logits = Xb @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        nll = -np.mean(np.log(p[np.arange(len(lb)), lb] + 1e-300))
        p[np.arange(len(lb)), lb] -= 1.0
        p /= len(lb)
        return nll, [Xb.T @ p, p.sum(axis=0)]

    step = 0
    losses = []
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) == 0:
                continue
            loss, grads = batch_grads(Xs[batch], labels[batch])
            opt.step([W, b], grads)
            losses.append(loss)
            step += 1

    scorer = ClassifierScorer(W, b, std, bucket_size)
    logits_e = Xes @ W + b
    pred_e = np.argmax(logits_e, axis=1)
    accuracy = float(np.mean(pred_e == labels_e))
    midpoints = pred_e * bucket_size + bucket_size / 2.0
    report = {
        "kind": "classifier",
        "steps": step,
        "n_buckets": int(n_buckets),
        "bucket_size": int(bucket_size),
        "accuracy": accuracy,
        "eval_tau": kendall_tau_b(midpoints, ye).tau,
        "n_train": len(y),
        "n_eval": len(ye),
    }
    return TrainResult(scorer, report)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_SCORER_FORMAT = "ranksched-scorer"
_SCORER_VERSION = 1


def save_scorer(scorer: Scorer, path: str) -> None:
    payload = {"format": _SCORER_FORMAT, "version": _SCORER_VERSION}
    payload.update(scorer.to_dict())
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def scorer_from_dict(obj: dict) -> Scorer:
    kind = obj.get("kind")
    if kind == "oracle":
        return OracleScorer()
    if kind == "noisy-oracle":
        return NoisyOracleScorer(obj["sigma"])
    if kind == "cross-seed-oracle":
        return CrossSeedOracleScorer(
            {int(k): v for k, v in obj["lengths_by_id"].items()})
    if kind == "perception":
        return PerceptionOnlyScorer(obj["warmup_tokens"], obj["sigma"])
    if kind == "ranking-model":
        std = _Standardizer(np.array(obj["feat_mean"]), np.array(obj["feat_std"]))
        params = [np.array(p) for p in obj["params"]]
        return RankingModelScorer(_Net(params, obj["hidden"]), std)
    if kind == "classifier":
        std = _Standardizer(np.array(obj["feat_mean"]), np.array(obj["feat_std"]))
        return ClassifierScorer(np.array(obj["weights"]), np.array(obj["bias"]),
                                std, obj["bucket_size"])
    raise ValueError(f"unknown scorer kind {kind!r}")


def load_scorer(path: str) -> Scorer:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format") != _SCORER_FORMAT:
        raise ValueError(f"{path}: not a scorer file")
    if obj.get("version") != _SCORER_VERSION:
        raise ValueError(f"{path}: unsupported scorer version {obj.get('version')}")
    return scorer_from_dict(obj)
