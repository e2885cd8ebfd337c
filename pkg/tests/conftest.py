"""Shared fixtures and independent brute-force oracles.

The oracles deliberately avoid the chart/forest machinery: derivations are
enumerated top-down by substitution, probabilities are products of per-edge
scalar lookups, and CFG membership is checked by breadth-first expansion of
sentential forms.
"""

from __future__ import annotations

import itertools
import random

import pytest

from qcfg.cfg import Cat, OutputCfg
from qcfg.grammar import (
    Corpus,
    Derivation,
    ExamplePair,
    Grammar,
    Rule,
    compose,
    derivation_yield,
    is_bare_nt_rule,
    validate_rule,
)
from qcfg.model import ModelParams, expansion_prob


# -- brute-force derivation enumeration ---------------------------------------


def bounded_derivations(grammar: Grammar, max_x: int, max_y: int) -> list[Derivation]:
    """All derivations whose x-yield is at most max_x tokens and y-yield at
    most max_y, built by breadth-first substitution until fixpoint. Complete
    for any target pair within the bounds because every subtree's yield is a
    contiguous slice of the full yield."""
    done: dict[Derivation, ExamplePair] = {}
    frontier: dict[Derivation, ExamplePair] = {}
    for rule in grammar.rules:
        if rule.arity == 0:
            z = Derivation(rule)
            pair = derivation_yield(z)
            if len(pair.x) <= max_x and len(pair.y) <= max_y:
                frontier[z] = pair
    while frontier:
        done.update(frontier)
        new: dict[Derivation, ExamplePair] = {}
        pool = list(done)
        for rule in grammar.rules:
            if rule.arity == 0:
                continue
            for combo in itertools.product(pool, repeat=rule.arity):
                z = Derivation(rule, combo)
                if z in done or z in new:
                    continue
                pair = derivation_yield(z)
                if len(pair.x) <= max_x and len(pair.y) <= max_y:
                    new[z] = pair
        frontier = new
    return list(done)


def bf_pair_derivations(grammar: Grammar, pair: ExamplePair) -> list[Derivation]:
    return [
        z
        for z in bounded_derivations(grammar, len(pair.x), len(pair.y))
        if derivation_yield(z) == pair
    ]


def bf_input_derivations(grammar: Grammar, x: tuple[str, ...]) -> list[Derivation]:
    max_beta = max(len(r.beta) for r in grammar.rules)
    max_y = 2 * len(x) * max_beta
    return [
        z
        for z in bounded_derivations(grammar, len(x), max_y)
        if derivation_yield(z).x == tuple(x)
    ]


def bf_derivation_prob(params: ModelParams, z: Derivation) -> float:
    """Product of scalar expansion probabilities, computed per rule application
    without any forest machinery."""
    prob = expansion_prob(params, z.root_rule, None)
    stack = [z]
    while stack:
        node = stack.pop()
        for i in range(1, node.root_rule.arity + 1):
            child = node.child(i)
            prob *= expansion_prob(params, child.root_rule, node.root_rule, i)
            stack.append(child)
    return prob


# -- brute-force unify oracle ---------------------------------------------------


def bf_unify(r1: Rule, r2: Rule, max_nts: int = 4) -> set[Rule]:
    """Decomposition search: enumerate every rule buildable from r1's material
    (sub-rules carved out of spans, and shells with spans replaced by a fresh
    nonterminal) and keep those that compose with r2 back into r1."""
    candidates: set[Rule] = set()
    n, m = len(r1.alpha), len(r1.beta)
    # sub-rules: any alpha span with any beta span as content
    for a in range(n):
        for b in range(a + 1, n + 1):
            for p in range(m):
                for q in range(p + 1, m + 1):
                    cand = _carve_sub(r1, a, b, p, q)
                    if cand is not None:
                        candidates.add(cand)
    # shells: one alpha span and any non-overlapping set of equal beta spans
    for a in range(n):
        for b in range(a + 1, n + 1):
            for width in range(1, m + 1):
                same = [(p, p + width) for p in range(m - width + 1)]
                for subset in _subsets_nonoverlap(same):
                    contents = {tuple(r1.beta[p:q]) for p, q in subset}
                    if len(contents) != 1:
                        continue
                    cand = _carve_shell(r1, a, b, subset)
                    if cand is not None:
                        candidates.add(cand)
    out = set()
    for cand in candidates:
        if validate_rule(cand, max_nts) is not None:
            continue
        for i in set(cand.alpha_indices):
            try:
                if compose(cand, r2, i) == r1:
                    out.add(cand)
                    break
            except Exception:
                pass
        for i in set(r2.alpha_indices):
            try:
                if compose(r2, cand, i) == r1:
                    out.add(cand)
                    break
            except Exception:
                pass
    return out


def _subsets_nonoverlap(spans):
    out = []

    def rec(start, acc):
        for i in range(start, len(spans)):
            p, q = spans[i]
            if acc and p < acc[-1][1]:
                continue
            acc.append(spans[i])
            out.append(list(acc))
            rec(i + 1, acc)
            acc.pop()

    rec(0, [])
    return out


def _renumber(alpha_syms, beta_syms):
    mapping = {}
    for s in alpha_syms:
        if not isinstance(s, str) and s not in mapping:
            mapping[s] = len(mapping) + 1
    try:
        beta = tuple(s if isinstance(s, str) else mapping[s] for s in beta_syms)
    except KeyError:
        return None
    return Rule(tuple(s if isinstance(s, str) else mapping[s] for s in alpha_syms), beta)


def _carve_sub(r1: Rule, a, b, p, q):
    return _renumber(list(r1.alpha[a:b]), list(r1.beta[p:q]))


def _carve_shell(r1: Rule, a, b, beta_spans):
    fresh = ("fresh",)
    alpha = list(r1.alpha[:a]) + [fresh] + list(r1.alpha[b:])
    beta = []
    i = 0
    starts = {p: q for p, q in beta_spans}
    while i < len(r1.beta):
        if i in starts:
            beta.append(fresh)
            i = starts[i]
        else:
            beta.append(r1.beta[i])
            i += 1
    return _renumber(alpha, beta)


# -- brute-force CFG membership --------------------------------------------------


def bf_cfg_language(cfg: OutputCfg, max_len: int) -> set[tuple[str, ...]]:
    """All terminal strings of length <= max_len derivable from the start
    category, by BFS over sentential forms."""
    prods = cfg.by_lhs()
    seen = set()
    out = set()
    queue = [(Cat(cfg.start),)]
    while queue:
        form = queue.pop()
        if form in seen:
            continue
        seen.add(form)
        n_terms = sum(1 for s in form if isinstance(s, str))
        if n_terms > max_len or len(form) > 3 * max_len + 3:
            continue
        cat_pos = next((i for i, s in enumerate(form) if isinstance(s, Cat)), None)
        if cat_pos is None:
            if len(form) <= max_len:
                out.add(tuple(form))
            continue
        for rhs in prods[form[cat_pos].name]:
            queue.append(form[:cat_pos] + tuple(rhs) + form[cat_pos + 1 :])
    return out


# -- random generators ------------------------------------------------------------


X_VOCAB = ("a", "b", "c")
Y_VOCAB = ("A", "B", "C")


def random_rule(rng: random.Random, max_nts: int = 2, allow_repeat: bool = True) -> Rule:
    k = rng.choice([0, 0, 1, 1, 2])
    k = min(k, max_nts)
    alpha_len = rng.randint(max(1, k), 3)
    positions = rng.sample(range(alpha_len), k)
    alpha = []
    nts = list(range(1, k + 1))
    pos_to_idx = dict(zip(sorted(positions), nts))
    for i in range(alpha_len):
        if i in pos_to_idx:
            alpha.append(pos_to_idx[i])
        else:
            alpha.append(rng.choice(X_VOCAB))
    if k == 1 and alpha_len == 1:
        alpha.append(rng.choice(X_VOCAB))
    beta_extra = rng.randint(0, 2)
    beta = [idx for idx in range(1, k + 1)]
    if allow_repeat and k and rng.random() < 0.3:
        beta.append(rng.randint(1, k))
    beta.extend(rng.choice(Y_VOCAB) for _ in range(beta_extra))
    if not beta:
        beta = [rng.choice(Y_VOCAB)]
    rng.shuffle(beta)
    rule = _renumber(list(alpha), list(beta))
    assert rule is not None
    return rule


def random_grammar(rng: random.Random, n_rules: int = 5, max_nts: int = 2) -> Grammar:
    rules = []
    # Guarantee at least one leaf so derivations exist.
    rules.append(Rule((rng.choice(X_VOCAB),), (rng.choice(Y_VOCAB),)))
    tries = 0
    while len(rules) < n_rules and tries < 200:
        tries += 1
        rule = random_rule(rng, max_nts)
        if is_bare_nt_rule(rule):
            continue
        if validate_rule(rule, max_nts) is None and rule not in rules:
            rules.append(rule)
    return Grammar(tuple(rules), max_nonterminals=max_nts)


def sample_random_derivation(grammar: Grammar, rng: random.Random, max_depth: int = 4):
    """Uniform-ish random derivation by top-down expansion; None on depth out."""

    def expand(depth):
        if depth > max_depth:
            return None
        rules = grammar.rules if depth < max_depth else [r for r in grammar.rules if r.arity == 0]
        if not rules:
            return None
        rule = rng.choice(list(rules))
        children = []
        for _ in range(rule.arity):
            sub = expand(depth + 1)
            if sub is None:
                return None
            children.append(sub)
        return Derivation(rule, tuple(children))

    return expand(1)


@pytest.fixture
def scan_toy_grammar() -> Grammar:
    return Grammar(
        (
            Rule((1, "and", 2), (1, 2)),
            Rule((1, "twice"), (1, 1)),
            Rule(("jump",), ("JUMP",)),
            Rule(("walk",), ("WALK",)),
        )
    )


@pytest.fixture
def fig_recombination_corpus() -> Corpus:
    return Corpus(
        (
            ExamplePair(("jump",), ("JUMP",)),
            ExamplePair(("walk",), ("WALK",)),
            ExamplePair(("jump", "and", "walk"), ("JUMP", "WALK")),
        ),
        name="toy3",
    )
