"""ranksched: deterministic simulator for rank-based LLM request scheduling."""

__version__ = "0.1.0"

from .workload import (  # noqa: F401
    FEATURE_DIM,
    LengthDist,
    Request,
    RequestState,
    Trace,
    featurize,
    fixed_burst,
    generate_burst,
    generate_poisson,
    load_trace,
    parse_generator_spec,
    resample_lengths,
    save_trace,
)
from .ranking import (  # noqa: F401
    bucket_lengths,
    kendall_tau_b,
    latency_stats,
    list_mle_gradient,
    list_mle_loss,
    max_waiting_time,
)
from .predictors import (  # noqa: F401
    ClassifierScorer,
    CrossSeedOracleScorer,
    NoisyOracleScorer,
    OracleScorer,
    PerceptionOnlyScorer,
    RankingModelScorer,
    TrainConfig,
    load_scorer,
    save_scorer,
    train_classifier,
    train_ranking,
)
from .schedulers import (  # noqa: F401
    BatchDecision,
    SchedulerConfig,
    make_policy,
)
from .engine import (  # noqa: F401
    CostModel,
    SimResult,
    replay,
    run,
)
