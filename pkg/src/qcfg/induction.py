"""Grammar induction: greedy compression search over candidate rules.

Starting from whole-example rules (plus optional seeds), the loop repeatedly
(a) drops rules that are not needed to derive any example and (b) replaces
rules by more abstract ones produced by UNIFY, whenever that lowers the
objective: a weighted size count per rule minus log correlation terms
measuring how reliably the rule's two sides co-occur in the data. Corpus
coverage is an invariant: every executed change is verified against cached
parses before it commits.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

from .cfg import OutputCfg, rule_output_valid
from .chart import Parser, occurs_in
from .grammar import (
    Corpus,
    ExamplePair,
    Grammar,
    GrammarError,
    Rule,
    compose,
    format_rule,
    is_bare_nt_rule,
    validate_rule,
)

LOG_FLOOR_SCALE = 2  # probability floor = 1 / (LOG_FLOOR_SCALE * corpus size)


@dataclass(frozen=True)
class InductionConfig:
    terminal_cost: float = 1.0  # weight of a terminal token in a rule's size
    nonterminal_cost: float = 1.0  # weight of a nonterminal token
    weight_input_given_output: float = 0.0  # on ln p(input side | output side)
    weight_output_given_input: float = 1.0  # on ln p(output side | input side)
    max_nonterminals: int = 4
    allow_repeated_indices: bool = True
    partitions: int = 1
    max_steps: int = 1000
    phat_sample_size: int | str = "auto"  # examples used for occurrence stats
    rng_seed: int = 0

    def __post_init__(self):
        if self.partitions < 1 or self.max_steps < 1:
            raise ValueError("partitions and max_steps must be >= 1")


@dataclass(frozen=True)
class Action:
    rule_to_add: Rule
    rules_to_remove: frozenset[Rule]
    objective_delta: float  # change in objective; negative means improvement


class OccurrenceStats:
    """Cached occurrence counts over a (possibly sampled) slice of the corpus.

    The sample is drawn uniformly without replacement, deterministically from
    the configured seed, and is used for scores only; coverage checks always
    run on the full corpus.
    """

    AUTO_EXACT_LIMIT = 10_000
    AUTO_SAMPLE = 2_000

    def __init__(self, corpus: Corpus, sample_size: int | str = "auto", rng_seed: int = 0):
        import numpy as np

        examples = list(corpus.examples)
        if sample_size == "auto":
            sample_size = (
                len(examples) if len(examples) <= self.AUTO_EXACT_LIMIT else self.AUTO_SAMPLE
            )
        elif sample_size == "exact":
            sample_size = len(examples)
        if sample_size < len(examples):
            rng = np.random.default_rng(rng_seed)
            idx = rng.choice(len(examples), size=sample_size, replace=False)
            examples = [examples[i] for i in sorted(idx)]
        self.examples = examples
        self.size = len(examples)
        self._pair_counts: dict = {}
        self._side_counts: dict = {}

    def count_side(self, sigma: tuple, side: str) -> int:
        key = (sigma, side)
        got = self._side_counts.get(key)
        if got is None:
            got = sum(
                1
                for ex in self.examples
                if occurs_in(sigma, ex.x if side == "input" else ex.y)
            )
            self._side_counts[key] = got
        return got

    def rule_counts(self, alpha: tuple, beta: tuple) -> tuple[int, int, int]:
        """(input-side count, output-side count, joint count) in one pass."""
        key = (alpha, beta)
        got = self._pair_counts.get(key)
        if got is None:
            n_a = n_b = n_ab = 0
            for ex in self.examples:
                in_x = occurs_in(alpha, ex.x)
                in_y = occurs_in(beta, ex.y)
                n_a += in_x
                n_b += in_y
                n_ab += in_x and in_y
            got = (n_a, n_b, n_ab)
            self._pair_counts[key] = got
            self._side_counts[(alpha, "input")] = n_a
            self._side_counts[(beta, "output")] = n_b
        return got


def phat(
    sigma_a: tuple,
    side_a: str,
    sigma_b: tuple,
    side_b: str,
    stats: OccurrenceStats,
) -> float:
    """Fraction of examples where sigma_a occurs on side_a among those where
    sigma_b occurs on side_b; 0.0 when the conditioning event never occurs."""
    if {side_a, side_b} == {"input", "output"}:
        alpha = sigma_a if side_a == "input" else sigma_b
        beta = sigma_b if side_b == "output" else sigma_a
        n_a, n_b, n_ab = stats.rule_counts(tuple(alpha), tuple(beta))
        denom = n_a if side_b == "input" else n_b
        return n_ab / denom if denom else 0.0
    denom = stats.count_side(tuple(sigma_b), side_b)
    if denom == 0:
        return 0.0
    joint = sum(
        1
        for ex in stats.examples
        if occurs_in(sigma_a, ex.x if side_a == "input" else ex.y)
        and occurs_in(sigma_b, ex.x if side_b == "input" else ex.y)
    )
    return joint / denom


def rule_size(rule: Rule, cfg: InductionConfig) -> float:
    n_nt = sum(1 for s in rule.alpha if isinstance(s, int)) + sum(
        1 for s in rule.beta if isinstance(s, int)
    )
    n_t = len(rule.alpha) + len(rule.beta) - n_nt
    return cfg.nonterminal_cost * n_nt + cfg.terminal_cost * n_t


def rule_score(rule: Rule, stats: OccurrenceStats, cfg: InductionConfig) -> float:
    """Size minus weighted log-correlation; the floor keeps ln finite."""
    size = rule_size(rule, cfg)
    correlation = 0.0
    floor = 1.0 / (LOG_FLOOR_SCALE * max(stats.size, 1))
    if cfg.weight_input_given_output or cfg.weight_output_given_input:
        n_a, n_b, n_ab = stats.rule_counts(rule.alpha, rule.beta)
        if cfg.weight_input_given_output:
            p = (n_ab / n_b) if n_b else 0.0
            correlation += cfg.weight_input_given_output * math.log(max(p, floor))
        if cfg.weight_output_given_input:
            p = (n_ab / n_a) if n_a else 0.0
            correlation += cfg.weight_output_given_input * math.log(max(p, floor))
    return size - correlation


def objective(grammar: Grammar, stats: OccurrenceStats, cfg: InductionConfig) -> float:
    return sum(rule_score(r, stats, cfg) for r in grammar.rules)


# -- seeding and initialization ------------------------------------------------


def seed_rules_shared_tokens(corpus: Corpus) -> set[Rule]:
    """Identity rules <t, t> for every token shared by the input and output
    of at least one example."""
    seeds: set[Rule] = set()
    for ex in corpus:
        for tok in set(ex.x) & set(ex.y):
            seeds.add(Rule((tok,), (tok,)))
    return seeds


def length_partitions(corpus: Corpus, n_partitions: int) -> list[list[ExamplePair]]:
    ordered = sorted(corpus.examples, key=lambda ex: len(ex.x) + len(ex.y))
    if n_partitions <= 1:
        return [ordered]
    size = math.ceil(len(ordered) / n_partitions)
    return [ordered[i : i + size] for i in range(0, len(ordered), size)]


def init_grammar(corpus: Corpus, seeds: Iterable[Rule], cfg: InductionConfig) -> Grammar:
    """Whole-example rules for the first (shortest) partition, plus seeds."""
    first = length_partitions(corpus, cfg.partitions)[0]
    rules: dict[Rule, None] = {}
    for ex in first:
        rules.setdefault(Rule(ex.x, ex.y), None)
    for rule in seeds:
        rules.setdefault(rule, None)
    return Grammar(tuple(rules), cfg.max_nonterminals, cfg.allow_repeated_indices)


# -- UNIFY ---------------------------------------------------------------------

_FRESH = ("fresh",)  # placeholder index marker during carving


def _canonical_from_parts(alpha_syms: list, beta_syms: list) -> Rule | None:
    """Renumber carved symbol lists (ints and _FRESH markers) canonically."""
    renumber: dict = {}
    for s in alpha_syms:
        if not isinstance(s, str) and s not in renumber:
            renumber[s] = len(renumber) + 1
    try:
        beta = tuple(s if isinstance(s, str) else renumber[s] for s in beta_syms)
    except KeyError:
        return None
    alpha = tuple(s if isinstance(s, str) else renumber[s] for s in alpha_syms)
    return Rule(alpha, beta)


def unify(r1: Rule, r2: Rule, max_nts: int = 4) -> tuple[Rule, ...]:
    """All rules r3 with compose(r2, r3, i) == r1 or compose(r3, r2, i) == r1
    for some i, canonical and within max_nts, deterministically ordered."""
    found: dict[Rule, None] = {}
    for cand, direction, idx in _unify_candidates(r1, r2):
        if validate_rule(cand, max_nts) is not None:
            continue
        try:
            if direction == "inner":
                ok = compose(r2, cand, idx) == r1
            else:
                ok = compose(cand, r2, idx) == r1
        except GrammarError:
            ok = False
        if ok:
            found.setdefault(cand, None)
    return tuple(sorted(found, key=format_rule))


def _unify_candidates(r1: Rule, r2: Rule):
    yield from _extract_inner(r1, r2)
    yield from _extract_outer(r1, r2)


def _extract_inner(r1: Rule, r2: Rule):
    """Candidates r3 with compose(r2, r3, i) == r1: r2 is the outer template,
    r3 the carved filler for one of r2's indices."""
    for i in set(r2.alpha_indices):
        for amap, span in _template_alpha(r2.alpha, r1.alpha, i):
            inner_alpha = list(r1.alpha[span[0] : span[1]])
            if not inner_alpha:
                continue
            for content in _template_beta(r2.beta, r1.beta, i, amap):
                cand = _canonical_from_parts(inner_alpha, list(content))
                if cand is not None:
                    yield cand, "inner", i


def _template_alpha(template, target, hole):
    """Match `template` (with NT `hole` standing for a flexible non-empty gap,
    other NTs binding single target NTs) against the whole `target`."""
    results = []

    def rec(p, pos, amap, span):
        if p == len(template):
            if pos == len(target) and span is not None:
                results.append((dict(amap), span))
            return
        sym = template[p]
        remaining = len(template) - p - 1
        if isinstance(sym, str):
            if pos < len(target) and target[pos] == sym:
                rec(p + 1, pos + 1, amap, span)
        elif sym == hole:
            for end in range(pos + 1, len(target) - remaining + 1):
                rec(p + 1, end, amap, (pos, end))
        else:
            if pos < len(target) and isinstance(target[pos], int):
                bound = amap.get(sym)
                if bound is None:
                    amap[sym] = target[pos]
                    rec(p + 1, pos + 1, amap, span)
                    del amap[sym]
                elif bound == target[pos]:
                    rec(p + 1, pos + 1, amap, span)

    rec(0, 0, {}, None)
    return results


def _template_beta(template, target, hole, amap):
    """Match the outer rule's output side, binding every occurrence of `hole`
    to one shared content sequence; yields that content."""
    results = []

    def rec(p, pos, content):
        if p == len(template):
            if pos == len(target) and content is not None:
                results.append(tuple(content))
            return
        sym = template[p]
        if isinstance(sym, str):
            if pos < len(target) and target[pos] == sym:
                rec(p + 1, pos + 1, content)
        elif sym == hole:
            if content is not None:
                ln = len(content)
                if pos + ln <= len(target) and tuple(target[pos : pos + ln]) == tuple(content):
                    rec(p + 1, pos + ln, content)
            else:
                remaining_min = sum(
                    1 if isinstance(t, str) or t != hole else 1
                    for t in template[p + 1 :]
                )
                for end in range(pos + 1, len(target) - remaining_min + 1):
                    rec(p + 1, end, list(target[pos:end]))
        else:
            want = amap.get(sym)
            if (
                want is not None
                and pos < len(target)
                and isinstance(target[pos], int)
                and target[pos] == want
            ):
                rec(p + 1, pos + 1, content)

    rec(0, 0, None)
    # Deduplicate contents (several interleavings can bind the same content).
    seen: dict[tuple, None] = {}
    for c in results:
        seen.setdefault(c, None)
    return list(seen)


def _extract_outer(r1: Rule, r2: Rule):
    """Candidates r3 with compose(r3, r2, i) == r1: occurrences of r2 inside
    r1 are replaced by a fresh nonterminal."""
    la = len(r2.alpha)
    alpha_spans = []
    for a in range(0, len(r1.alpha) - la + 1):
        rho: dict[int, int] = {}
        ok = True
        for off in range(la):
            t_sym = r2.alpha[off]
            r_sym = r1.alpha[a + off]
            if isinstance(t_sym, str):
                if r_sym != t_sym:
                    ok = False
                    break
            else:
                if not isinstance(r_sym, int):
                    ok = False
                    break
                rho[t_sym] = r_sym
        if ok:
            alpha_spans.append((a, a + la, rho))
    for a, b, rho in alpha_spans:
        mapped_beta = tuple(
            s if isinstance(s, str) else rho[s] for s in r2.beta
        )
        lb = len(mapped_beta)
        positions = [
            p
            for p in range(0, len(r1.beta) - lb + 1)
            if tuple(r1.beta[p : p + lb]) == mapped_beta
        ]
        images = set(rho.values())
        image_positions = {
            p for p, s in enumerate(r1.beta) if isinstance(s, int) and s in images
        }
        for subset in _nonoverlapping_subsets(positions, lb):
            covered = set()
            for p in subset:
                covered.update(range(p, p + lb))
            if image_positions - covered:
                continue  # an inner index would leak into the outer rule
            alpha_syms = list(r1.alpha[:a]) + [_FRESH] + list(r1.alpha[b:])
            beta_syms: list = []
            q = 0
            starts = set(subset)
            while q < len(r1.beta):
                if q in starts:
                    beta_syms.append(_FRESH)
                    q += lb
                else:
                    beta_syms.append(r1.beta[q])
                    q += 1
            cand = _canonical_from_parts(alpha_syms, beta_syms)
            if cand is not None:
                idx = _index_of_fresh(alpha_syms, cand)
                yield cand, "outer", idx


def _index_of_fresh(alpha_syms: list, cand: Rule) -> int:
    pos = alpha_syms.index(_FRESH)
    nth = sum(1 for s in alpha_syms[: pos + 1] if not isinstance(s, str))
    return [s for s in cand.alpha if isinstance(s, int)][nth - 1]


def _nonoverlapping_subsets(positions: Sequence[int], width: int):
    """Non-empty subsets of positions where chosen spans of `width` do not
    overlap; positions are sorted ascending."""
    out: list[tuple[int, ...]] = []

    def rec(start: int, acc: list[int]):
        for i in range(start, len(positions)):
            p = positions[i]
            if acc and p < acc[-1] + width:
                continue
            acc.append(p)
            out.append(tuple(acc))
            rec(i + 1, acc)
            acc.pop()

    rec(0, [])
    return out


# -- removal and actions -------------------------------------------------------


def removal_check(
    grammar: Grammar, rule: Rule, corpus: Corpus, max_chart_items: int | None = None
) -> bool:
    """True iff every corpus example stays derivable without `rule`."""
    if rule not in grammar:
        raise ValueError("rule not in grammar: %s" % format_rule(rule))
    kwargs = {} if max_chart_items is None else {"max_chart_items": max_chart_items}
    reduced = Parser(grammar.remove([rule]), **kwargs)
    full = None
    for ex in corpus:
        if reduced.can_derive(ex):
            continue
        # Not derivable without the rule; only a problem if it was derivable.
        if full is None:
            full = Parser(grammar, **kwargs)
        if full.can_derive(ex):
            return False
    return True


def subsumed_rules(rules: Sequence[Rule], r_add: Rule, max_nts: int) -> set[Rule]:
    """Rules expressible as one composition involving r_add and a rule that
    stays in the grammar; removing them can never lose coverage."""
    rule_set = set(rules)
    out: set[Rule] = set()
    partners = list(rules) + [r_add]
    for partner in partners:
        for outer, inner in ((r_add, partner), (partner, r_add)):
            for i in set(outer.alpha_indices):
                try:
                    made = compose(outer, inner, i, max_nts)
                except GrammarError:
                    continue
                if made in rule_set and made != r_add and made is not outer and made != partner:
                    out.add(made)
    # A rule must not justify its own removal.
    return {r for r in out if r != r_add}


def candidate_actions(
    grammar: Grammar,
    r_c: Rule,
    corpus: Corpus,
    output_cfg: Optional[OutputCfg],
    stats: OccurrenceStats,
    cfg: InductionConfig,
    score_cache: dict | None = None,
    only_improving: bool = False,
) -> list[Action]:
    """Actions replacing r_c (and anything else subsumed) by a unify result."""
    if r_c not in grammar:
        raise ValueError("rule not in grammar: %s" % format_rule(r_c))
    scores = score_cache if score_cache is not None else {}

    def score(rule: Rule) -> float:
        got = scores.get(rule)
        if got is None:
            got = rule_score(rule, stats, cfg)
            scores[rule] = got
        return got

    grammar_rules = set(grammar.rules)
    seen_adds: set[Rule] = set()
    actions: list[Action] = []
    for r_prime in grammar.rules:
        for r_add in unify(r_c, r_prime, cfg.max_nonterminals):
            if r_add in grammar_rules or r_add in seen_adds:
                continue
            seen_adds.add(r_add)
            if is_bare_nt_rule(r_add):
                continue
            if validate_rule(r_add, cfg.max_nonterminals, cfg.allow_repeated_indices):
                continue
            if output_cfg is not None and not rule_output_valid(output_cfg, r_add.beta):
                continue
            removals = {r_c} | subsumed_rules(grammar.rules, r_add, cfg.max_nonterminals)
            removed_total = sum(score(r) for r in removals)
            if only_improving and rule_size(r_add, cfg) >= removed_total:
                continue  # score(r_add) >= size, so no improvement is possible
            delta = score(r_add) - removed_total
            if only_improving and delta >= 0:
                continue
            actions.append(Action(r_add, frozenset(removals), delta))
    actions.sort(key=lambda a: (a.objective_delta, format_rule(a.rule_to_add)))
    return actions


# -- the greedy induction loop -------------------------------------------------


@dataclass
class IterationRecord:
    iteration: int
    partition: int
    objective: float
    grammar_size: int
    rules_added: int
    rules_removed: int
    phase: str


@dataclass
class InductionResult:
    grammar: Grammar
    iterations: list[IterationRecord] = field(default_factory=list)
    budget_exhausted: bool = False


class _Coverage:
    """Per-example witness/indispensable rule sets with reverse indices.

    witness: a rule set within which the example is known derivable (from its
    last parse, intersected with the live grammar as rules get removed).
    indispensable: rules that, at last parse, appeared in every derivation;
    used only as a removal pre-filter, refreshed lazily.
    """

    def __init__(self):
        self.states: dict[ExamplePair, tuple[frozenset, frozenset]] = {}
        self.witness_index: dict[Rule, set[ExamplePair]] = {}
        self.indisp_count: dict[Rule, int] = {}

    def set_state(self, pair: ExamplePair, witness: frozenset, indisp: frozenset):
        old = self.states.get(pair)
        if old is not None:
            for r in old[0]:
                peers = self.witness_index.get(r)
                if peers is not None:
                    peers.discard(pair)
            for r in old[1]:
                self.indisp_count[r] = self.indisp_count.get(r, 1) - 1
        self.states[pair] = (witness, indisp)
        for r in witness:
            self.witness_index.setdefault(r, set()).add(pair)
        for r in indisp:
            self.indisp_count[r] = self.indisp_count.get(r, 0) + 1

    def blocked(self, rule: Rule) -> bool:
        return self.indisp_count.get(rule, 0) > 0

    def dependents(self, rule: Rule) -> list[ExamplePair]:
        return sorted(self.witness_index.get(rule, ()), key=lambda p: (p.x, p.y))


def _parse_state(parser: Parser, pair: ExamplePair):
    forest = parser.parse_pair(pair)
    if forest is None:
        return None
    return forest.used_rules(), forest.indispensable_rules()


def induce(
    corpus: Corpus,
    seeds: Iterable[Rule] = (),
    output_cfg: Optional[OutputCfg] = None,
    cfg: InductionConfig = InductionConfig(),
    workers: int = 0,
    on_iteration: Optional[Callable[[IterationRecord, Grammar], None]] = None,
) -> InductionResult:
    """Greedy parallel search minimizing the grammar objective while keeping
    every activated example derivable.

    Partitions activate shortest-first; an example whose pair is already
    derivable when its partition activates contributes no whole-example rule
    (the rule would be removed as redundant on the next pass anyway).
    """
    stats = OccurrenceStats(corpus, cfg.phat_sample_size, cfg.rng_seed)
    partitions = length_partitions(corpus, cfg.partitions)
    score_cache: dict[Rule, float] = {}
    result = InductionResult(grammar=Grammar((), cfg.max_nonterminals, cfg.allow_repeated_indices))

    rules: dict[Rule, None] = {}
    for rule in seeds:
        problem = validate_rule(rule, cfg.max_nonterminals, cfg.allow_repeated_indices)
        if problem:
            raise GrammarError("bad seed rule %s: %s" % (format_rule(rule), problem))
        rules.setdefault(rule, None)
    coverage = _Coverage()
    pool = _WorkerPool(workers)

    def grammar_now() -> Grammar:
        return Grammar(tuple(rules), cfg.max_nonterminals, cfg.allow_repeated_indices)

    def score(rule: Rule) -> float:
        got = score_cache.get(rule)
        if got is None:
            got = rule_score(rule, stats, cfg)
            score_cache[rule] = got
        return got

    def refresh_examples(pairs, parser=None, expect_covered=False):
        parser = parser or Parser(grammar_now())
        outcomes = pool.parse_states(tuple(rules), cfg, pairs, parser)
        missing = []
        for pair, state in zip(pairs, outcomes):
            if state is None:
                missing.append(pair)
            else:
                coverage.set_state(pair, frozenset(state[0]), frozenset(state[1]))
        if missing and expect_covered:
            raise AssertionError(
                "coverage invariant broken for %d examples, e.g. %s"
                % (len(missing), " ".join(missing[0].x))
            )
        return missing

    def activate(partition) -> int:
        fresh_pairs = []
        seen = set()
        for ex in partition:
            if ex not in coverage.states and ex not in seen:
                seen.add(ex)
                fresh_pairs.append(ex)
        added = 0
        if not fresh_pairs:
            return 0
        missing = refresh_examples(fresh_pairs) if rules else list(fresh_pairs)
        for ex in missing:
            rule = Rule(ex.x, ex.y)
            if rule not in rules:
                rules[rule] = None
                added += 1
            coverage.set_state(ex, frozenset([rule]), frozenset([rule]))
        return added

    def try_remove(rule: Rule, extra_absent: set[Rule]) -> Optional[list]:
        """Check coverage survives removing `rule` (with extra_absent already
        gone); returns fresh states for dependents or None if vetoed."""
        dependents = coverage.dependents(rule)
        if not dependents:
            return []
        trial = [r for r in rules if r not in extra_absent and r != rule]
        parser = Parser(Grammar(tuple(trial), cfg.max_nonterminals, cfg.allow_repeated_indices))
        updates = []
        for ex in dependents:
            state = _parse_state(parser, ex)
            if state is None:
                return None
            updates.append((ex, state))
        return updates

    iteration = 0

    def run_iteration(partition_idx: int) -> bool:
        changed = False
        n_removed = 0
        n_added = 0

        # Phase 1: drop rules no example appears to need.
        candidates = [r for r in rules if not coverage.blocked(r)]
        candidates.sort(key=lambda r: (-score(r), format_rule(r)))
        for rule in candidates:
            if coverage.blocked(rule) or rule not in rules:
                continue
            updates = try_remove(rule, set())
            if updates is None:
                # The stale pre-filter let a load-bearing rule through; the
                # fresh parses below restore accurate indispensable sets.
                refresh_examples(coverage.dependents(rule), expect_covered=True)
                continue
            del rules[rule]
            for ex, (used, indisp) in updates:
                coverage.set_state(ex, frozenset(used), frozenset(indisp))
            changed = True
            n_removed += 1

        # Phase 2: per-rule best unify actions, aggregated.
        grammar = grammar_now()
        best = pool.best_actions(grammar, output_cfg, stats, cfg, score_cache)
        executed_removals: set[Rule] = set()
        executed_adds: set[Rule] = set()
        for action in best:
            r_add = action.rule_to_add
            if r_add in rules or r_add in executed_adds:
                continue
            removals = {r for r in action.rules_to_remove if r in rules}
            if not removals or removals & executed_removals:
                continue
            planned = score(r_add) - sum(score(r) for r in removals)
            if planned >= 0:
                continue
            # Tentative execution: add r_add, verify removals sequentially
            # (coverage state updates applied as we go so later checks see
            # them), roll everything back unless the action still improves.
            rules[r_add] = None
            gone: set[Rule] = set()
            backup: dict[ExamplePair, tuple] = {}
            ok_removals: set[Rule] = set()
            for rule in sorted(removals, key=format_rule):
                ups = try_remove(rule, gone)
                if ups is None:
                    continue
                gone.add(rule)
                ok_removals.add(rule)
                for ex, (used, indisp) in ups:
                    backup.setdefault(ex, coverage.states[ex])
                    coverage.set_state(ex, frozenset(used), frozenset(indisp))
            realized = score(r_add) - sum(score(r) for r in ok_removals)
            if not ok_removals or realized >= 0:
                del rules[r_add]
                for ex, old in backup.items():
                    coverage.set_state(ex, *old)
                continue
            for rule in ok_removals:
                del rules[rule]
            executed_removals |= ok_removals
            executed_adds.add(r_add)
            changed = True
            n_added += 1
            n_removed += len(ok_removals)

        nonlocal iteration
        iteration += 1
        record = IterationRecord(
            iteration=iteration,
            partition=partition_idx,
            objective=sum(score(r) for r in rules),
            grammar_size=len(rules),
            rules_added=n_added,
            rules_removed=n_removed,
            phase="search",
        )
        result.iterations.append(record)
        if on_iteration:
            on_iteration(record, grammar_now())
        return changed

    try:
        for part_idx, partition in enumerate(partitions):
            activate(partition)
            refreshed = False
            while True:
                if iteration >= cfg.max_steps:
                    result.budget_exhausted = True
                    result.grammar = grammar_now()
                    return result
                if run_iteration(part_idx):
                    refreshed = False
                    continue
                if refreshed:
                    break
                # Converged on possibly stale coverage; refresh and retry once.
                refresh_examples(
                    sorted(coverage.states, key=lambda p: (p.x, p.y)), expect_covered=True
                )
                refreshed = True
    finally:
        pool.close()

    result.grammar = grammar_now()
    return result


# -- worker pool -----------------------------------------------------------------

_WORKER: dict = {}


def _init_parse_worker(rules, cfg):
    _WORKER["parser"] = Parser(Grammar(rules, cfg.max_nonterminals, cfg.allow_repeated_indices))


def _parse_state_job(pair):
    state = _parse_state(_WORKER["parser"], pair)
    if state is None:
        return None
    return tuple(state[0]), tuple(state[1])


def _init_action_worker(rules, output_cfg, stats, cfg, scores):
    _WORKER["grammar"] = Grammar(rules, cfg.max_nonterminals, cfg.allow_repeated_indices)
    _WORKER["output_cfg"] = output_cfg
    _WORKER["stats"] = stats
    _WORKER["cfg"] = cfg
    _WORKER["scores"] = dict(scores)


def _best_action_job(r_c):
    scores = _WORKER["scores"]
    before = set(scores)
    actions = candidate_actions(
        _WORKER["grammar"],
        r_c,
        Corpus(()),
        _WORKER["output_cfg"],
        _WORKER["stats"],
        _WORKER["cfg"],
        score_cache=scores,
        only_improving=True,
    )
    new_scores = {r: s for r, s in scores.items() if r not in before}
    return (actions[0] if actions else None), new_scores


class _WorkerPool:
    """Serial by default; fork-based process pool when workers > 1."""

    def __init__(self, workers: int):
        self.workers = max(0, workers)

    def close(self):
        pass

    def parse_states(self, rules, cfg, pairs, parser: Parser):
        if self.workers > 1 and len(pairs) > 8:
            with ProcessPoolExecutor(
                max_workers=self.workers,
                initializer=_init_parse_worker,
                initargs=(rules, cfg),
            ) as pool:
                return list(pool.map(_parse_state_job, pairs, chunksize=64))
        return [_parse_state(parser, p) for p in pairs]

    def best_actions(self, grammar, output_cfg, stats, cfg, score_cache):
        rule_list = list(grammar.rules)
        if self.workers > 1 and len(rule_list) > 8:
            with ProcessPoolExecutor(
                max_workers=self.workers,
                initializer=_init_action_worker,
                initargs=(grammar.rules, output_cfg, stats, cfg, score_cache),
            ) as pool:
                outcomes = list(pool.map(_best_action_job, rule_list, chunksize=8))
            best = []
            for action, new_scores in outcomes:
                score_cache.update(new_scores)
                if action is not None:
                    best.append(action)
        else:
            best = []
            for r_c in rule_list:
                actions = candidate_actions(
                    grammar,
                    r_c,
                    Corpus(()),
                    output_cfg,
                    stats,
                    cfg,
                    score_cache=score_cache,
                    only_improving=True,
                )
                if actions:
                    best.append(actions[0])
        dedup: dict[Rule, Action] = {}
        for action in best:
            old = dedup.get(action.rule_to_add)
            if old is None or action.objective_delta < old.objective_delta:
                dedup[action.rule_to_add] = action
        return sorted(
            dedup.values(), key=lambda a: (a.objective_delta, format_rule(a.rule_to_add))
        )
