"""Mixing original and synthetic data, hard-EM relabeling, exact-match eval."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cfg import OutputCfg
from .chart import Parser
from .grammar import Corpus, ExamplePair, Grammar
from .model import FitResult, ModelParams, TrainConfig, fit, viterbi_parse

ABSTAIN = "ABSTAIN"


def mix_balanced(original: Corpus, synthetic: Corpus, rng_seed: int = 0) -> Corpus:
    """Union with the smaller side replicated (ceil(L/S) copies, truncated) so
    both sides contribute exactly max(|original|, |synthetic|) examples."""
    if not len(original) or not len(synthetic):
        raise ValueError("both corpora must be non-empty")
    small, large = sorted((list(original.examples), list(synthetic.examples)), key=len)
    copies = math.ceil(len(large) / len(small))
    replicated = (small * copies)[: len(large)]
    mixed = large + replicated
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(len(mixed))
    return Corpus(
        tuple(mixed[i] for i in order),
        name="%s+%s" % (original.name or "original", synthetic.name or "synthetic"),
    )


@dataclass
class RelabelResult:
    corpus: Corpus
    kept: int
    discarded_underivable: int
    discarded_cfg: int


def hard_em_relabel(
    params: ModelParams,
    grammar: Grammar,
    unlabeled_inputs: Sequence[Sequence[str]],
    output_cfg: Optional[OutputCfg] = None,
    parser: Parser | None = None,
) -> RelabelResult:
    """Label each input with its Viterbi output; inputs the grammar cannot
    derive (or whose best output fails the CFG) are discarded."""
    parser = parser or Parser(grammar)
    kept: list[ExamplePair] = []
    n_underivable = 0
    n_cfg = 0
    for x in unlabeled_inputs:
        x = tuple(x)
        best = viterbi_parse(params, grammar, x, output_cfg=None, parser=parser)
        if best is None:
            n_underivable += 1
            continue
        y, _ = best
        if output_cfg is not None:
            from .cfg import cfg_accepts

            if not cfg_accepts(output_cfg, y):
                n_cfg += 1
                continue
        kept.append(ExamplePair(x, y))
    return RelabelResult(
        corpus=Corpus(tuple(kept), name="relabeled"),
        kept=len(kept),
        discarded_underivable=n_underivable,
        discarded_cfg=n_cfg,
    )


def semi_supervised_fit(
    grammar: Grammar,
    labeled: Corpus,
    unlabeled_inputs: Sequence[Sequence[str]],
    dup_factor: int,
    num_states: int,
    train_cfg: TrainConfig,
    output_cfg: Optional[OutputCfg] = None,
    parser: Parser | None = None,
    reinduce: bool = False,
    induction_cfg=None,
) -> tuple[FitResult, RelabelResult, Grammar]:
    """Fit on labeled data, pseudo-label the unlabeled inputs with the fitted
    model, then refit from scratch on labeled + dup_factor copies of the
    pseudo-labels.

    The grammar is kept fixed by default (model-only retraining); reinduce=True
    re-runs grammar induction on the combined corpus before refitting.
    """
    if dup_factor < 1:
        raise ValueError("dup_factor must be >= 1")
    parser = parser or Parser(grammar)
    first = fit(grammar, labeled, num_states, train_cfg, parser=parser)
    relabeled = hard_em_relabel(
        first.params, grammar, unlabeled_inputs, output_cfg=output_cfg, parser=parser
    )
    if not len(relabeled.corpus):
        return first, relabeled, grammar
    combined = Corpus(
        labeled.examples + relabeled.corpus.examples * dup_factor,
        name=labeled.name or "labeled",
    )
    if reinduce:
        from .induction import InductionConfig, induce

        cfg = induction_cfg if induction_cfg is not None else InductionConfig()
        grammar = induce(combined, output_cfg=output_cfg, cfg=cfg).grammar
        parser = Parser(grammar)
    refit = fit(grammar, combined, num_states, train_cfg, parser=parser)
    return refit, relabeled, grammar


@dataclass
class EvalReport:
    accuracy: float
    correct: int
    total: int
    abstained: int
    covered_accuracy: float | None = None
    covered_total: int = 0
    non_covered_accuracy: float | None = None
    non_covered_total: int = 0

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "abstained": self.abstained,
            "covered": {"accuracy": self.covered_accuracy, "total": self.covered_total},
            "non_covered": {
                "accuracy": self.non_covered_accuracy,
                "total": self.non_covered_total,
            },
        }


def exact_match_eval(
    predictions: Sequence, gold: Corpus, covered: Optional[Sequence[bool]] = None
) -> EvalReport:
    """Token-exact accuracy; ABSTAIN (or None) counts as wrong. `covered`
    optionally splits the report by grammar coverage of each input."""
    if len(predictions) != len(gold):
        raise ValueError(
            "got %d predictions for %d gold examples" % (len(predictions), len(gold))
        )
    if covered is not None and len(covered) != len(gold):
        raise ValueError("coverage vector length mismatch")
    correct = abstained = 0
    cov_correct = cov_total = 0
    for i, (pred, ex) in enumerate(zip(predictions, gold)):
        if pred is None or (isinstance(pred, str) and pred == ABSTAIN):
            abstained += 1
            good = False
        else:
            good = tuple(pred) == ex.y
        correct += good
        if covered is not None and covered[i]:
            cov_total += 1
            cov_correct += good
    total = len(gold)
    report = EvalReport(
        accuracy=correct / total if total else 0.0,
        correct=correct,
        total=total,
        abstained=abstained,
    )
    if covered is not None:
        non_total = total - cov_total
        non_correct = correct - cov_correct
        report.covered_total = cov_total
        report.covered_accuracy = cov_correct / cov_total if cov_total else None
        report.non_covered_total = non_total
        report.non_covered_accuracy = non_correct / non_total if non_total else None
    return report
