"""Bayesian inference on epidemic cascades over temporal contact networks.

The package trains an autoregressive neural sampler of the cascade
posterior (patient-zero detection, individual risk assessment, epidemic
parameter inference), with a soft-margin Monte-Carlo estimator and a
contact-tracing ranker as baselines and an exact enumeration oracle for
validation on small instances.
"""

from .contact_graph import (
    TemporalContactGraph,
    gen_proximity,
    gen_random_regular,
    gen_tree,
    infection_prob_from_duration,
    load_contacts,
    load_graph,
    save_graph,
    second_neighbors,
)
from .epidemic import (
    Cascade,
    EpidemicParams,
    hamming_distance,
    log_prior,
    simulate,
    simulate_batch,
    step_distribution,
)
from .observations import (
    Observation,
    PosteriorModel,
    feasible_support,
    full_snapshot,
    obs_log_likelihood,
    regularized_log_posterior,
    tempered_target,
)
from .autoreg import (
    AutoregressiveModel,
    Ordering,
    build_model,
    build_ordering,
    dependency_set,
    log_density,
    marginals,
    sample,
)
from .training import (
    TrainConfig,
    TrainReport,
    anneal_train,
    elbo,
    em_param_step,
    kl_gradient_step,
    risk_prior_schedule,
    two_class_fit,
)
from .oracle import ExactPosterior, enumerate_posterior, exact_kl, exact_kl_gradient
from .baselines import (
    SoftMarginConfig,
    contact_tracing_scores,
    jaccard_similarity,
    soft_margin_scores,
)
from .metrics import RankingCurve, fraction_found_curve, roc_auc, top1_rate

__version__ = "0.1.0"
