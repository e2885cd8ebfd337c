"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error, 3 capacity error or
sampler abort.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import io as qio
from .augment import ABSTAIN, exact_match_eval, hard_em_relabel, mix_balanced
from .chart import CapacityError, Parser
from .grammar import GrammarError
from .induction import InductionConfig, induce, seed_rules_shared_tokens
from .model import TrainConfig, fit, viterbi_parse
from .pipeline import ConfigError, RunConfig, run_pipeline
from .sampler import SamplerAbort, SamplerConfig, sample_dataset

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CAPACITY = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, "%s: error: %s\n" % (self.prog, message))


def _build_argparser() -> argparse.ArgumentParser:
    top = _Parser(prog="qcfg", description=__doc__)
    top.add_argument("--workers", type=int, default=0, help="process pool size")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("induce", help="induce a grammar from a TSV corpus")
    p.add_argument("--train", required=True)
    p.add_argument("--seeds", help="grammar file of seed rules")
    p.add_argument("--seed-shared-tokens", action="store_true")
    p.add_argument("--output-cfg")
    p.add_argument("--config", help="JSON file with InductionConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSONL per-iteration log")

    p = sub.add_parser("fit", help="fit the latent-state model")
    p.add_argument("--grammar", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--states", type=int, default=2)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--batch-restricted", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="JSONL loglik trace")

    p = sub.add_parser("parse", help="predict outputs for inputs")
    p.add_argument("--grammar", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--input", required=True, help="TSV or one input per line; - for stdin")
    p.add_argument("--output-cfg")
    p.add_argument("--out", help="default stdout")

    p = sub.add_parser("sample", help="sample synthetic examples")
    p.add_argument("--grammar", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--temperature", default="1.0", help="positive float or 'inf'")
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--delta-threshold", type=int, default=0)
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--output-cfg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dedup", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("augment", help="balance-mix original and synthetic TSVs")
    p.add_argument("--train", required=True)
    p.add_argument("--synthetic", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("relabel", help="pseudo-label unlabeled inputs (hard EM)")
    p.add_argument("--grammar", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--unlabeled", required=True, help="one input per line")
    p.add_argument("--output-cfg")
    p.add_argument("--dup", type=int, default=1, help="write each kept pair N times")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="exact-match evaluation with coverage split")
    p.add_argument("--grammar", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--output-cfg")
    p.add_argument("--report", help="write JSON report here")

    p = sub.add_parser("run", help="full pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--outdir", required=True)
    return top


def _load_induction_config(path: str | None) -> InductionConfig:
    if not path:
        return InductionConfig()
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    from .pipeline import _build

    return _build(InductionConfig, data, path)


def _cmd_induce(args) -> int:
    corpus = qio.load_corpus(args.train)
    cfg = _load_induction_config(args.config)
    seeds = set()
    if args.seeds:
        seeds |= set(
            qio.load_grammar(args.seeds, cfg.max_nonterminals, cfg.allow_repeated_indices).rules
        )
    if args.seed_shared_tokens:
        seeds |= seed_rules_shared_tokens(corpus)
    output_cfg = qio.load_output_cfg(args.output_cfg) if args.output_cfg else None
    log = qio.JsonlWriter(args.log) if args.log else None
    try:
        result = induce(
            corpus,
            seeds=sorted(seeds),
            output_cfg=output_cfg,
            cfg=cfg,
            workers=args.workers,
            on_iteration=(
                (lambda rec, g: log.write(
                    {
                        "iteration": rec.iteration,
                        "partition": rec.partition,
                        "objective": rec.objective,
                        "grammar_size": rec.grammar_size,
                        "rules_added": rec.rules_added,
                        "rules_removed": rec.rules_removed,
                    }
                ))
                if log
                else None
            ),
        )
    finally:
        if log:
            log.close()
    qio.save_grammar(result.grammar, args.out)
    if result.budget_exhausted:
        print("warning: step budget exhausted before convergence", file=sys.stderr)
    print("induced %d rules -> %s" % (len(result.grammar), args.out))
    return 0


def _cmd_fit(args) -> int:
    grammar = qio.load_grammar(args.grammar)
    corpus = qio.load_corpus(args.train)
    cfg = TrainConfig(
        learning_rate=args.lr,
        steps=args.steps,
        batch_size=args.batch_size,
        batch_restricted_normalization=args.batch_restricted,
        rng_seed=args.seed,
    )
    log = qio.JsonlWriter(args.log) if args.log else None
    try:
        result = fit(
            grammar,
            corpus,
            args.states,
            cfg,
            progress=(lambda step, ll: log.write({"step": step, "mean_joint_loglik": ll}))
            if log
            else None,
        )
    finally:
        if log:
            log.close()
    qio.save_params(result.params, args.out)
    if result.skipped_examples:
        print("skipped %d non-derivable examples" % result.skipped_examples, file=sys.stderr)
    print("fitted %d parameters -> %s" % (result.params.param_count, args.out))
    return 0


def _read_inputs(source: str) -> list[tuple[str, ...]]:
    if source == "-":
        lines = sys.stdin.read().splitlines()
    else:
        lines = Path(source).read_text(encoding="utf-8").splitlines()
    inputs = []
    for line in lines:
        if not line.strip():
            continue
        x = line.split("\t")[0]
        inputs.append(tuple(x.split()))
    return inputs


def _cmd_parse(args) -> int:
    grammar = qio.load_grammar(args.grammar)
    params = qio.load_params(args.params, grammar)
    output_cfg = qio.load_output_cfg(args.output_cfg) if args.output_cfg else None
    parser = Parser(grammar)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for x in _read_inputs(args.input):
            best = viterbi_parse(params, grammar, x, output_cfg, parser)
            out.write((" ".join(best[0]) if best else ABSTAIN) + "\n")
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_sample(args) -> int:
    grammar = qio.load_grammar(args.grammar)
    params = qio.load_params(args.params, grammar)
    output_cfg = qio.load_output_cfg(args.output_cfg) if args.output_cfg else None
    temperature = math.inf if args.temperature == "inf" else float(args.temperature)
    cfg = SamplerConfig(
        count=args.count,
        temperature=temperature,
        nonterminal_bias=args.delta,
        nonterminal_bias_threshold=args.delta_threshold,
        max_depth=args.max_depth,
        rng_seed=args.seed,
        dedup=args.dedup,
    )
    result = sample_dataset(params, grammar, output_cfg, cfg)
    qio.save_corpus(result.corpus, args.out)
    print(
        "sampled %d examples (acceptance %.3f) -> %s"
        % (len(result.corpus), result.acceptance_rate, args.out)
    )
    return 0


def _cmd_augment(args) -> int:
    train = qio.load_corpus(args.train)
    synthetic = qio.load_corpus(args.synthetic)
    mixed = mix_balanced(train, synthetic, rng_seed=args.seed)
    qio.save_corpus(mixed, args.out)
    print("mixed %d examples -> %s" % (len(mixed), args.out))
    return 0


def _cmd_relabel(args) -> int:
    grammar = qio.load_grammar(args.grammar)
    params = qio.load_params(args.params, grammar)
    output_cfg = qio.load_output_cfg(args.output_cfg) if args.output_cfg else None
    if args.dup < 1:
        raise ConfigError("--dup must be >= 1")
    inputs = _read_inputs(args.unlabeled)
    result = hard_em_relabel(params, grammar, inputs, output_cfg)
    from .grammar import Corpus

    duplicated = Corpus(result.corpus.examples * args.dup, name=result.corpus.name)
    qio.save_corpus(duplicated, args.out)
    print(
        "kept %d / %d inputs (%d underivable, %d failed CFG) -> %s"
        % (
            result.kept,
            len(inputs),
            result.discarded_underivable,
            result.discarded_cfg,
            args.out,
        )
    )
    return 0


def _cmd_eval(args) -> int:
    grammar = qio.load_grammar(args.grammar)
    params = qio.load_params(args.params, grammar)
    output_cfg = qio.load_output_cfg(args.output_cfg) if args.output_cfg else None
    test = qio.load_corpus(args.test)
    parser = Parser(grammar)
    predictions = []
    covered = []
    for ex in test:
        best = viterbi_parse(params, grammar, ex.x, output_cfg, parser)
        covered.append(parser.parse_input(ex.x) is not None)
        predictions.append(best[0] if best else None)
    report = exact_match_eval(predictions, test, covered=covered)
    payload = json.dumps(report.as_dict(), indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def _cmd_run(args) -> int:
    data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    config = RunConfig.from_dict(data)
    if args.workers:
        config = RunConfig.from_dict({**data, "workers": args.workers})
    summary = run_pipeline(config, args.outdir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "induce": _cmd_induce,
    "fit": _cmd_fit,
    "parse": _cmd_parse,
    "sample": _cmd_sample,
    "augment": _cmd_augment,
    "relabel": _cmd_relabel,
    "eval": _cmd_eval,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    args = _build_argparser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (qio.DataError, GrammarError, ConfigError) as err:
        print("error: %s" % err, file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as err:
        print("error: %s" % err, file=sys.stderr)
        return EXIT_DATA
    except json.JSONDecodeError as err:
        print("error: bad JSON: %s" % err, file=sys.stderr)
        return EXIT_DATA
    except (CapacityError, SamplerAbort) as err:
        print("error: %s" % err, file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
