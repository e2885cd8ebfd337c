"""End-to-end run configuration and orchestration: induce -> fit -> sample ->
augment, with a JSONL run log and optional evaluation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import io as qio
from .augment import exact_match_eval, mix_balanced
from .chart import Parser
from .induction import InductionConfig, induce, seed_rules_shared_tokens
from .model import TrainConfig, fit, viterbi_parse
from .sampler import SamplerConfig, sample_dataset


class ConfigError(ValueError):
    pass


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError("%s: unknown keys %s" % (where, sorted(unknown)))
    return cls(**data)


@dataclass(frozen=True)
class ModelSection:
    num_states: int = 2
    learning_rate: float = 0.1
    steps: int = 1500
    batch_size: int = 128
    batch_restricted_normalization: bool = False
    rng_seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            batch_restricted_normalization=self.batch_restricted_normalization,
            rng_seed=self.rng_seed,
        )


@dataclass(frozen=True)
class SamplerSection:
    count: int = 1000
    temperature: float = 1.0
    delta: float = 0.0
    delta_threshold: int = 0
    max_depth: int = 20
    rng_seed: int = 0
    dedup: bool = False

    def sampler_config(self) -> SamplerConfig:
        temperature = math.inf if self.temperature == "inf" else float(self.temperature)
        return SamplerConfig(
            count=self.count,
            temperature=temperature,
            nonterminal_bias=self.delta,
            nonterminal_bias_threshold=self.delta_threshold,
            max_depth=self.max_depth,
            rng_seed=self.rng_seed,
            dedup=self.dedup,
        )


@dataclass(frozen=True)
class RunConfig:
    train: str
    seeds: Optional[str] = None
    seed_shared_tokens: bool = False
    output_cfg: Optional[str] = None
    test: Optional[str] = None
    augment_seed: int = 0
    workers: int = 0
    induction: InductionConfig = field(default_factory=InductionConfig)
    model: ModelSection = field(default_factory=ModelSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        data = dict(data)
        for key, cls in (
            ("induction", InductionConfig),
            ("model", ModelSection),
            ("sampler", SamplerSection),
        ):
            if key in data:
                if not isinstance(data[key], dict):
                    raise ConfigError("%r section must be an object" % key)
                data[key] = _build(cls, data[key], key)
        if "train" not in data:
            raise ConfigError("config needs a 'train' corpus path")
        return _build(RunConfig, data, "config")


def run_pipeline(config: RunConfig, outdir: str | Path) -> dict:
    """Execute the full pipeline, writing all artifacts under outdir.
    Returns a summary dict (also written as run_summary.json)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    train = qio.load_corpus(config.train)
    if not len(train):
        raise qio.DataError("%s: empty training corpus" % config.train)
    output_cfg = qio.load_output_cfg(config.output_cfg) if config.output_cfg else None
    seeds: set = set()
    if config.seeds:
        seeds |= set(
            qio.load_grammar(
                config.seeds,
                config.induction.max_nonterminals,
                config.induction.allow_repeated_indices,
            ).rules
        )
    if config.seed_shared_tokens:
        seeds |= seed_rules_shared_tokens(train)

    summary: dict = {}
    with qio.JsonlWriter(outdir / "run_log.jsonl") as log:

        def on_iteration(record, grammar):
            log.write(
                {
                    "stage": "induce",
                    "iteration": record.iteration,
                    "partition": record.partition,
                    "objective": record.objective,
                    "grammar_size": record.grammar_size,
                    "rules_added": record.rules_added,
                    "rules_removed": record.rules_removed,
                }
            )

        induced = induce(
            train,
            seeds=sorted(seeds),
            output_cfg=output_cfg,
            cfg=config.induction,
            workers=config.workers,
            on_iteration=on_iteration,
        )
        grammar = induced.grammar
        qio.save_grammar(grammar, outdir / "grammar.txt")
        summary["grammar_size"] = len(grammar)
        summary["induction_budget_exhausted"] = induced.budget_exhausted

        parser = Parser(grammar)
        fitted = fit(
            grammar,
            train,
            config.model.num_states,
            config.model.train_config(),
            parser=parser,
            progress=lambda step, ll: log.write(
                {"stage": "fit", "step": step, "mean_joint_loglik": ll}
            ),
        )
        qio.save_params(fitted.params, outdir / "params.json")
        summary["fit_skipped_examples"] = fitted.skipped_examples

        sample = sample_dataset(
            fitted.params, grammar, output_cfg, config.sampler.sampler_config()
        )
        qio.save_corpus(sample.corpus, outdir / "synthetic.tsv")
        log.write(
            {
                "stage": "sample",
                "accepted": sample.accepted,
                "attempts": sample.attempts,
                "acceptance_rate": sample.acceptance_rate,
                "depth_rejects": sample.depth_rejects,
                "dead_end_rejects": sample.dead_end_rejects,
            }
        )
        summary["sampler_acceptance_rate"] = sample.acceptance_rate

        if len(sample.corpus):
            augmented = mix_balanced(train, sample.corpus, rng_seed=config.augment_seed)
            qio.save_corpus(augmented, outdir / "augmented.tsv")
            summary["augmented_size"] = len(augmented)

        if config.test:
            test = qio.load_corpus(config.test)
            predictions = []
            covered = []
            for ex in test:
                best = viterbi_parse(fitted.params, grammar, ex.x, output_cfg, parser)
                covered.append(parser.parse_input(ex.x) is not None)
                predictions.append(best[0] if best else None)
            report = exact_match_eval(predictions, test, covered=covered)
            log.write({"stage": "eval", **report.as_dict()})
            summary["eval"] = report.as_dict()

    qio.write_jsonl([summary], outdir / "run_summary.json")
    return summary
