"""Requests, traces, and synthetic workload generation.

A trace is an arrival-ordered list of requests. Traces come from JSONL files
(one object per line with at least ``prompt`` and ``output_tokens_length``)
or from the synthetic generators below (Poisson arrivals or a single burst).
Generators are pure functions of their parameters and seed.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

# Feature extraction operates on the first MAX_PROMPT_TOKENS whitespace
# tokens only; prompt_tokens keeps the full count.
MAX_PROMPT_TOKENS = 2048
KEYWORDS = ("list", "explain", "write", "code", "summarize")
HASH_BUCKETS = 16
_HASH_SALT = b"ranksched-v1:"

FEATURE_DIM = 3 + len(KEYWORDS) + HASH_BUCKETS

MAX_OUTPUT_TOKENS = 2048


class RequestState(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    PREEMPTED = "preempted"
    FINISHED = "finished"


@dataclass
class Request:
    """One serving request plus its mutable scheduling state.

    The first four fields are fixed workload data; the rest is runtime state
    owned by a single simulation run. Use :meth:`fresh_copy` to obtain a
    request with pristine runtime state so a trace can be shared across runs.
    """

    id: int
    arrival_time: float
    prompt_tokens: int
    true_output_tokens: int
    prompt: str = ""
    features: np.ndarray = field(default=None, repr=False)

    state: RequestState = RequestState.WAITING
    generated_tokens: int = 0
    score: float | None = None
    priority: bool = False
    starvation_count: int = 0
    quantum: int = 0

    def __post_init__(self):
        if self.arrival_time < 0:
            raise ValueError(f"request {self.id}: negative arrival_time")
        if self.true_output_tokens < 1:
            raise ValueError(f"request {self.id}: non-positive output length")
        if self.prompt_tokens < 1:
            raise ValueError(f"request {self.id}: non-positive prompt length")
        if self.features is None:
            self.features = featurize(self.prompt)

    @property
    def remaining_tokens(self) -> int:
        return self.true_output_tokens - self.generated_tokens

    def fresh_copy(self) -> "Request":
        """Copy with runtime state reset; prompt and features are shared."""
        return replace(
            self,
            state=RequestState.WAITING,
            generated_tokens=0,
            score=None,
            priority=False,
            starvation_count=0,
            quantum=0,
        )


@dataclass
class Trace:
    """Arrival-ordered request collection with provenance metadata."""

    requests: list[Request]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.requests]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate request ids in trace")
        arrivals = [r.arrival_time for r in self.requests]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("trace requests not sorted by arrival_time")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def lengths(self) -> np.ndarray:
        return np.array([r.true_output_tokens for r in self.requests], dtype=np.int64)

    def fingerprint(self) -> str:
        """Content hash covering ids, arrivals, prompts, and lengths."""
        h = hashlib.sha256()
        for r in self.requests:
            h.update(
                f"{r.id},{r.arrival_time!r},{r.true_output_tokens},".encode()
            )
            h.update(hashlib.sha256(r.prompt.encode()).digest())
        return h.hexdigest()


def _token_hash(token: str) -> int:
    return zlib.crc32(_HASH_SALT + token.encode("utf-8", "replace"))


_WORD_RE = re.compile(r"[a-z]+")


def featurize(prompt: str) -> np.ndarray:
    """Deterministic fixed-length feature vector for a prompt.

    Layout: [token count, char count, has question mark,
    one count per keyword, HASH_BUCKETS hashed bag-of-words counts].
    Only the first MAX_PROMPT_TOKENS whitespace tokens are considered.
    """
    tokens = prompt.split()[:MAX_PROMPT_TOKENS]
    text = " ".join(tokens)
    vec = np.zeros(FEATURE_DIM, dtype=np.float64)
    vec[0] = len(tokens)
    vec[1] = len(text)
    vec[2] = 1.0 if "?" in text else 0.0
    base = 3
    hash_base = base + len(KEYWORDS)
    for tok in tokens:
        low = tok.lower()
        word = _WORD_RE.search(low)
        word = word.group(0) if word else low
        for k, kw in enumerate(KEYWORDS):
            if word == kw:
                vec[base + k] += 1.0
        vec[hash_base + _token_hash(low) % HASH_BUCKETS] += 1.0
    return vec


# ---------------------------------------------------------------------------
# Length distributions
# ---------------------------------------------------------------------------

# Named presets: truncated lognormals whose means differ by roughly 100
# tokens (the longer-output one plays the role of a chat corpus with long
# replies, the shorter one a corpus of terser replies).
DIST_PRESETS = {
    "sharegpt": ("lognormal", (5.3, 0.9), MAX_OUTPUT_TOKENS),
    "lmsys": ("lognormal", (4.9, 0.9), MAX_OUTPUT_TOKENS),
}


@dataclass(frozen=True)
class LengthDist:
    """Output-length distribution over positive integers, clipped to max_len."""

    kind: str
    params: tuple
    max_len: int = MAX_OUTPUT_TOKENS

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.kind == "uniform":
            a, b = self.params
            if not (1 <= a <= b):
                raise ValueError(f"uniform bounds invalid: {self.params}")
        elif self.kind == "geometric":
            (p,) = self.params
            if not (0.0 < p <= 1.0):
                raise ValueError(f"geometric p invalid: {p}")
        elif self.kind == "lognormal":
            mu, sigma = self.params
            if sigma <= 0:
                raise ValueError(f"lognormal sigma invalid: {sigma}")
        else:
            raise ValueError(f"unknown distribution kind: {self.kind}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            a, b = self.params
            out = rng.integers(int(a), int(b) + 1, size=n)
        elif self.kind == "geometric":
            (p,) = self.params
            out = rng.geometric(p, size=n)
        else:
            mu, sigma = self.params
            out = np.rint(rng.lognormal(mu, sigma, size=n)).astype(np.int64)
        return np.clip(out, 1, self.max_len).astype(np.int64)

    def spec_string(self) -> str:
        args = ",".join(repr(float(p)) if isinstance(p, float) else str(p)
                        for p in self.params)
        return f"{self.kind}({args})"

    @staticmethod
    def parse(text: str) -> "LengthDist":
        """Parse ``uniform(a,b)``, ``geometric(p)``, ``lognormal(mu,sigma)``,
        or a named preset like ``sharegpt``."""
        text = text.strip()
        if text in DIST_PRESETS:
            kind, params, max_len = DIST_PRESETS[text]
            return LengthDist(kind, params, max_len)
        m = re.fullmatch(r"(\w+)\(([^)]*)\)", text)
        if not m:
            raise ValueError(f"cannot parse distribution spec: {text!r}")
        kind = m.group(1)
        raw = [p.strip() for p in m.group(2).split(",") if p.strip()]
        try:
            params = tuple(float(p) for p in raw)
        except ValueError as exc:
            raise ValueError(f"bad distribution parameters in {text!r}") from exc
        return LengthDist(kind, params)


# ---------------------------------------------------------------------------
# Synthetic prompt construction
# ---------------------------------------------------------------------------

_VOCAB = (
    "the", "a", "of", "to", "and", "in", "for", "on", "with", "about",
    "how", "what", "why", "please", "detail", "steps", "short", "long",
    "report", "story", "python", "function", "data", "model", "number",
    "example", "simple", "quick", "best", "more",
) + KEYWORDS


def _synth_prompt(rng: np.random.Generator, n_tokens: int) -> str:
    idx = rng.integers(0, len(_VOCAB), size=n_tokens)
    return " ".join(_VOCAB[i] for i in idx)


def _prompt_token_targets(
    rng: np.random.Generator, lengths: np.ndarray, prompt_noise: float
) -> np.ndarray:
    """Prompt sizes correlated with output lengths.

    With prompt_noise = 0 the prompt token count equals the output length
    (clipped), which makes the workload learnable by construction. Larger
    noise multiplies the count by exp(N(0, noise^2)) per request.
    """
    target = lengths.astype(np.float64)
    if prompt_noise > 0:
        target = target * np.exp(rng.normal(0.0, prompt_noise, size=len(lengths)))
    return np.clip(np.rint(target), 1, MAX_PROMPT_TOKENS).astype(np.int64)


def _build_requests(
    arrivals: np.ndarray,
    lengths: np.ndarray,
    rng: np.random.Generator,
    prompt_noise: float,
) -> list[Request]:
    prompt_sizes = _prompt_token_targets(rng, lengths, prompt_noise)
    reqs = []
    for i in range(len(lengths)):
        prompt = _synth_prompt(rng, int(prompt_sizes[i]))
        reqs.append(
            Request(
                id=i,
                arrival_time=float(arrivals[i]),
                prompt_tokens=int(prompt_sizes[i]),
                true_output_tokens=int(lengths[i]),
                prompt=prompt,
            )
        )
    return reqs


def generate_poisson(
    rate: float,
    n: int,
    length_dist: LengthDist,
    seed: int,
    prompt_noise: float = 0.0,
) -> Trace:
    """Trace with exponential inter-arrival gaps at the given rate (req/s)."""
    if rate <= 0:
        raise ValueError("rate must be > 0")
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(seed)
    lengths = length_dist.sample(rng, n)
    gaps = rng.exponential(1.0 / rate, size=n)
    arrivals = np.cumsum(gaps)
    requests = _build_requests(arrivals, lengths, rng, prompt_noise)
    meta = {
        "name": "poisson",
        "rate": rate,
        "n": n,
        "dist": length_dist.spec_string(),
        "seed": seed,
        "prompt_noise": prompt_noise,
    }
    return Trace(requests, meta)


def generate_burst(
    n: int,
    length_dist: LengthDist,
    seed: int,
    prompt_noise: float = 0.0,
) -> Trace:
    """Trace with every request arriving at t = 0."""
    if n <= 0:
        raise ValueError("n must be > 0")
    rng = np.random.default_rng(seed)
    lengths = length_dist.sample(rng, n)
    arrivals = np.zeros(n)
    requests = _build_requests(arrivals, lengths, rng, prompt_noise)
    meta = {
        "name": "burst",
        "n": n,
        "dist": length_dist.spec_string(),
        "seed": seed,
        "prompt_noise": prompt_noise,
    }
    return Trace(requests, meta)


def fixed_burst(lengths: list[int], prompt_tokens: int = 4) -> Trace:
    """Burst trace with exact output lengths; handy for worked examples."""
    reqs = [
        Request(
            id=i,
            arrival_time=0.0,
            prompt_tokens=prompt_tokens,
            true_output_tokens=int(length),
            prompt=" ".join(["token"] * prompt_tokens),
        )
        for i, length in enumerate(lengths)
    ]
    meta = {"name": "fixed", "lengths": [int(x) for x in lengths],
            "prompt_tokens": prompt_tokens}
    return Trace(reqs, meta)


def resample_lengths(trace: Trace, seed: int, sigma: float = 0.3) -> Trace:
    """New trace with lengths perturbed by per-request lognormal noise.

    Models re-sampling the same prompts with a different decoding seed:
    prompts, arrivals, and ids are kept, lengths move by exp(N(0, sigma^2)).
    """
    rng = np.random.default_rng(seed)
    factors = np.exp(rng.normal(0.0, sigma, size=len(trace.requests)))
    reqs = []
    for r, f in zip(trace.requests, factors):
        new_len = int(np.clip(np.rint(r.true_output_tokens * f), 1, MAX_OUTPUT_TOKENS))
        reqs.append(replace(r.fresh_copy(), true_output_tokens=new_len))
    meta = dict(trace.metadata)
    meta.update({"resampled_seed": seed, "resample_sigma": sigma})
    return Trace(reqs, meta)


# ---------------------------------------------------------------------------
# JSONL I/O
# ---------------------------------------------------------------------------


def load_trace(path: str, seed: int = 0) -> Trace:
    """Load a JSONL trace; one object per line.

    Required fields: ``prompt`` (string), ``output_tokens_length`` (positive
    int). Optional ``arrival_time`` (float seconds); when absent everywhere,
    all requests arrive at t = 0 (burst semantics). The seed is recorded as
    metadata only; loading is deterministic.
    """
    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(obj, dict) or "prompt" not in obj:
                raise ValueError(f"{path}:{lineno}: missing 'prompt'")
            if "output_tokens_length" not in obj:
                raise ValueError(f"{path}:{lineno}: missing 'output_tokens_length'")
            length = obj["output_tokens_length"]
            if not isinstance(length, int) or length < 1:
                raise ValueError(
                    f"{path}:{lineno}: output_tokens_length must be a positive int"
                )
            prompt = str(obj["prompt"])
            arrival = float(obj.get("arrival_time", 0.0))
            if arrival < 0:
                raise ValueError(f"{path}:{lineno}: negative arrival_time")
            n_tokens = max(1, len(prompt.split()))
            requests.append(
                Request(
                    id=len(requests),
                    arrival_time=arrival,
                    prompt_tokens=n_tokens,
                    true_output_tokens=length,
                    prompt=prompt,
                )
            )
    requests.sort(key=lambda r: (r.arrival_time, r.id))
    for i, r in enumerate(requests):
        r.id = i
    return Trace(requests, {"name": "file", "path": str(path), "seed": seed})


def save_trace(trace: Trace, path: str) -> None:
    """Write a trace as JSONL; load_trace(save_trace(t)) preserves content."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in trace.requests:
            obj = {
                "prompt": r.prompt,
                "output_tokens_length": r.true_output_tokens,
                "arrival_time": r.arrival_time,
            }
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# Generator spec strings (CLI surface)
# ---------------------------------------------------------------------------


def _split_top_level(text: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    return parts


def parse_generator_spec(spec: str) -> Trace:
    """Build a trace from a spec string.

    Examples: ``poisson:rate=2,n=1000,dist=lognormal(5.0,1.0),seed=7`` or
    ``burst:n=2000,dist=sharegpt,seed=3,pnoise=0.5``.
    """
    if ":" not in spec:
        raise ValueError(f"generator spec needs 'kind:args': {spec!r}")
    kind, _, argstr = spec.partition(":")
    kind = kind.strip()
    args: dict[str, str] = {}
    for part in _split_top_level(argstr):
        if not part.strip():
            continue
        if "=" not in part:
            raise ValueError(f"bad generator argument {part!r} in {spec!r}")
        key, _, val = part.partition("=")
        args[key.strip()] = val.strip()

    def _need(key):
        if key not in args:
            raise ValueError(f"generator spec missing {key!r}: {spec!r}")
        return args[key]

    dist = LengthDist.parse(_need("dist"))
    n = int(_need("n"))
    seed = int(args.get("seed", "0"))
    pnoise = float(args.get("pnoise", "0.0"))
    if kind == "poisson":
        return generate_poisson(float(_need("rate")), n, dist, seed, pnoise)
    if kind == "burst":
        return generate_burst(n, dist, seed, pnoise)
    raise ValueError(f"unknown generator kind {kind!r}")
