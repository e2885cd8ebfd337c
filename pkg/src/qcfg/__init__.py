"""QCFG induction, latent-state modeling, and compositional data augmentation."""

from .grammar import (
    Corpus,
    Derivation,
    ExamplePair,
    Grammar,
    GrammarError,
    Rule,
    compose,
    derivation_yield,
    format_rule,
    parse_rule,
    validate_rule,
)
from .chart import (
    CapacityError,
    DerivationForest,
    Parser,
    can_derive,
    occurs_in,
    parse_input,
    parse_pair,
)
from .cfg import Cat, OutputCfg, cfg_accepts, parse_output_cfg, rule_output_valid
from .induction import (
    Action,
    InductionConfig,
    OccurrenceStats,
    candidate_actions,
    induce,
    init_grammar,
    objective,
    phat,
    removal_check,
    rule_score,
    seed_rules_shared_tokens,
    unify,
)
from .model import (
    fit_with_restarts,
    ModelParams,
    TrainConfig,
    conditional_loglik,
    derivation_logprob,
    expansion_prob,
    fit,
    init_params,
    joint_loglik,
    viterbi_parse,
)
from .sampler import SampleReject, SamplerConfig, sample_dataset, sample_derivation
from .augment import exact_match_eval, hard_em_relabel, mix_balanced, semi_supervised_fit

__version__ = "0.1.0"
