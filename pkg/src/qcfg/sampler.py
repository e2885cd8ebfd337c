"""Forward sampling of synthetic examples from a fitted model.

Sampling walks top-down from the root context, drawing a rule at every
pending nonterminal from the (optionally temperature/bias adjusted) expansion
distribution. With an output CFG, each pending nonterminal carries the CFG
category it must produce; only rules whose output side admits a consistent
category assignment under that category are eligible, which makes every
completed sample CFG-valid by construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .cfg import OutputCfg, consistent_index_assignments
from .grammar import Corpus, Derivation, ExamplePair, Grammar, derivation_yield
from .model import ModelParams, _log_matmul, _log_softmax


class SamplerAbort(RuntimeError):
    """Acceptance rate collapsed; carries diagnostics in args."""


class SampleReject(enum.Enum):
    DEPTH = "depth"
    DEAD_END = "dead-end"


@dataclass(frozen=True)
class SamplerConfig:
    count: int = 100_000
    temperature: float = 1.0  # math.inf samples uniformly over eligible rules
    nonterminal_bias: float = 0.0  # added to emission logits (the delta knob)
    nonterminal_bias_threshold: int = 0  # bias rules with more NTs than this
    max_depth: int = 20
    rng_seed: int = 0
    dedup: bool = False

    def __post_init__(self):
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive (or math.inf)")
        if self.nonterminal_bias < 0:
            raise ValueError("nonterminal bias must be non-negative")


@dataclass
class SampleResult:
    corpus: Corpus
    attempts: int = 0
    accepted: int = 0
    depth_rejects: int = 0
    dead_end_rejects: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else 0.0


class Sampler:
    def __init__(
        self,
        params: ModelParams,
        grammar: Grammar,
        output_cfg: OutputCfg | None,
        cfg: SamplerConfig,
    ):
        self.params = params
        self.grammar = grammar
        self.output_cfg = output_cfg
        self.cfg = cfg
        self.rules = params.rules
        arities = np.array([r.arity for r in self.rules])
        biased = arities > cfg.nonterminal_bias_threshold
        emit = params.rule_logits.copy()
        if cfg.nonterminal_bias:
            emit[:, biased] += cfg.nonterminal_bias
        if math.isinf(cfg.temperature):
            self._probs = None  # uniform over eligible rules
        else:
            log_b = _log_softmax(emit / cfg.temperature)
            log_a = _log_softmax(params.state_logits)
            self._probs = np.exp(_log_matmul(log_a, log_b))
        self._assignments: dict = {}  # (rule_id, cat) -> tuple of index->cat maps
        self._cum_cache: dict = {}

    def _rule_assignments(self, rid: int, cat: str):
        key = (rid, cat)
        if key not in self._assignments:
            self._assignments[key] = consistent_index_assignments(
                self.output_cfg, self.rules[rid].beta, cat
            )
        return self._assignments[key]

    def _distribution(self, ctx: int, cat: str | None):
        """(eligible rule ids, cumulative weights) for one expansion."""
        key = (ctx, cat)
        got = self._cum_cache.get(key)
        if got is not None:
            return got
        if cat is None:
            eligible = np.arange(len(self.rules))
        else:
            eligible = np.array(
                [rid for rid in range(len(self.rules)) if self._rule_assignments(rid, cat)],
                dtype=np.int64,
            )
        if len(eligible) == 0:
            out = (eligible, None)
        elif self._probs is None:
            out = (eligible, np.arange(1, len(eligible) + 1, dtype=float) / len(eligible))
        else:
            w = self._probs[ctx, eligible]
            total = w.sum()
            out = (eligible, np.cumsum(w / total))
        self._cum_cache[key] = out
        return out

    def sample_derivation(self, rng: np.random.Generator):
        """One attempt; returns a Derivation or a SampleReject."""
        cat0 = self.output_cfg.start if self.output_cfg is not None else None

        def expand(ctx: int, cat: str | None, depth: int):
            if depth > self.cfg.max_depth:
                return SampleReject.DEPTH
            eligible, cum = self._distribution(ctx, cat)
            if len(eligible) == 0:
                return SampleReject.DEAD_END
            pick_at = min(np.searchsorted(cum, rng.random(), side="right"), len(eligible) - 1)
            rid = int(eligible[pick_at])
            rule = self.rules[rid]
            child_cats: dict[int, str | None] = {}
            if cat is not None:
                options = self._rule_assignments(rid, cat)
                pick = options[int(rng.integers(len(options)))] if len(options) > 1 else options[0]
                child_cats = dict(pick)
            children = []
            for i in range(1, rule.arity + 1):
                sub = expand(
                    self.params.context_id(rule, i), child_cats.get(i), depth + 1
                )
                if isinstance(sub, SampleReject):
                    return sub
                children.append(sub)
            return Derivation(rule, tuple(children))

        return expand(0, cat0, 1)


def sample_derivation(
    params: ModelParams,
    grammar: Grammar,
    output_cfg: OutputCfg | None,
    cfg: SamplerConfig,
    rng: np.random.Generator,
):
    return Sampler(params, grammar, output_cfg, cfg).sample_derivation(rng)


ABORT_WINDOW = 20_000
ABORT_FLOOR = 0.001


def sample_dataset(
    params: ModelParams,
    grammar: Grammar,
    output_cfg: OutputCfg | None,
    cfg: SamplerConfig,
    name: str = "sampled",
) -> SampleResult:
    """Collect cfg.count accepted samples (rejects are resampled). Each sample
    slot draws from its own counter-derived RNG stream, so results do not
    depend on how slots are scheduled. Dedup drops exact duplicates post hoc
    without replacement."""
    sampler = Sampler(params, grammar, output_cfg, cfg)
    result = SampleResult(corpus=Corpus((), name))
    pairs: list[ExamplePair] = []
    window_attempts = 0
    window_accepts = 0
    for slot in range(cfg.count):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.rng_seed, spawn_key=(slot,))
        )
        while True:
            result.attempts += 1
            window_attempts += 1
            z = sampler.sample_derivation(rng)
            if isinstance(z, SampleReject):
                if z is SampleReject.DEPTH:
                    result.depth_rejects += 1
                else:
                    result.dead_end_rejects += 1
                if window_attempts >= ABORT_WINDOW:
                    if window_accepts / window_attempts < ABORT_FLOOR:
                        raise SamplerAbort(
                            "acceptance rate %.5f below %.3f%% over %d attempts"
                            % (
                                window_accepts / window_attempts,
                                ABORT_FLOOR * 100,
                                window_attempts,
                            ),
                            {
                                "attempts": result.attempts,
                                "accepted": result.accepted,
                                "depth_rejects": result.depth_rejects,
                                "dead_end_rejects": result.dead_end_rejects,
                            },
                        )
                    window_attempts = 0
                    window_accepts = 0
                continue
            result.accepted += 1
            window_accepts += 1
            pairs.append(derivation_yield(z))
            break
    if cfg.dedup:
        seen: dict[ExamplePair, None] = {}
        for p in pairs:
            seen.setdefault(p, None)
        pairs = list(seen)
    result.corpus = Corpus(tuple(pairs), name)
    return result
