import math
import random

import numpy as np
import pytest

from qcfg.chart import Parser
from qcfg.grammar import Corpus, Derivation, ExamplePair, Grammar, derivation_yield, parse_rule
from qcfg.model import (
    ModelLookupError,
    TrainConfig,
    UndefinedConditionalError,
    compile_forest,
    conditional_loglik,
    derivation_logprob,
    expansion_prob,
    fit,
    grammar_fingerprint,
    init_params,
    joint_loglik,
    loglik_gradients,
    viterbi_parse,
)
from conftest import (
    bf_derivation_prob,
    bf_input_derivations,
    bf_pair_derivations,
    random_grammar,
    sample_random_derivation,
)

R_AND = parse_rule("NT_1 and NT_2 ### NT_1 NT_2")
R_TWICE = parse_rule("NT_1 twice ### NT_1 NT_1")
R_JUMP = parse_rule("jump ### JUMP")
R_WALK = parse_rule("walk ### WALK")
TOY = Grammar((R_AND, R_TWICE, R_JUMP, R_WALK))


def pair(x, y):
    return ExamplePair(tuple(x.split()), tuple(y.split()))


class TestInitParams:
    def test_single_state_is_context_independent(self):
        params = init_params(TOY, 1, rng_seed=0)
        for rule in TOY.rules:
            root = expansion_prob(params, rule, None)
            assert expansion_prob(params, rule, R_AND, 1) == pytest.approx(root, abs=1e-12)
            assert expansion_prob(params, rule, R_TWICE, 1) == pytest.approx(root, abs=1e-12)

    def test_same_seed_same_params(self):
        a = init_params(TOY, 4, rng_seed=9)
        b = init_params(TOY, 4, rng_seed=9)
        assert np.array_equal(a.state_logits, b.state_logits)
        assert np.array_equal(a.rule_logits, b.rule_logits)
        c = init_params(TOY, 4, rng_seed=10)
        assert not np.array_equal(c.state_logits, a.state_logits)

    def test_param_count_formula(self):
        for states in (1, 2, 8):
            params = init_params(TOY, states, rng_seed=0)
            contexts = 1 + sum(r.arity for r in TOY.rules)
            assert params.num_contexts == contexts
            assert params.param_count == contexts * states + states * len(TOY.rules)

    def test_invalid_state_count(self):
        with pytest.raises(ValueError):
            init_params(TOY, 0)


class TestExpansionProb:
    def test_uniform_at_zero_logits(self):
        params = init_params(TOY, 2, rng_seed=0)
        params = params.copy_with(
            state_logits=np.zeros_like(params.state_logits),
            rule_logits=np.zeros_like(params.rule_logits),
        )
        for rule in TOY.rules:
            assert expansion_prob(params, rule, None) == pytest.approx(1 / len(TOY))

    def test_rows_normalize(self):
        params = init_params(TOY, 3, rng_seed=4)
        matrix = np.exp(params.log_expansion_matrix())
        assert np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9)

    def test_unknown_rule_raises(self):
        params = init_params(TOY, 2, rng_seed=0)
        with pytest.raises(ModelLookupError):
            expansion_prob(params, parse_rule("zz ### ZZ"), None)
        with pytest.raises(ModelLookupError):
            expansion_prob(params, R_JUMP, R_JUMP, 1)


class TestDerivationLogprob:
    def test_leaf_is_root_probability(self):
        params = init_params(TOY, 2, rng_seed=1)
        z = Derivation(R_JUMP)
        assert derivation_logprob(params, z) == pytest.approx(
            math.log(expansion_prob(params, R_JUMP, None))
        )

    def test_four_factor_tree(self):
        params = init_params(TOY, 2, rng_seed=1)
        z = Derivation(R_AND, (Derivation(R_TWICE, (Derivation(R_JUMP),)), Derivation(R_WALK)))
        expected = (
            math.log(expansion_prob(params, R_AND, None))
            + math.log(expansion_prob(params, R_TWICE, R_AND, 1))
            + math.log(expansion_prob(params, R_JUMP, R_TWICE, 1))
            + math.log(expansion_prob(params, R_WALK, R_AND, 2))
        )
        assert derivation_logprob(params, z) == pytest.approx(expected)

    def test_probability_at_most_one(self):
        rng = random.Random(2)
        for _ in range(50):
            g = random_grammar(rng)
            z = sample_random_derivation(g, rng)
            if z is None:
                continue
            params = init_params(g, rng.choice([1, 2, 3]), rng_seed=rng.randint(0, 99))
            assert derivation_logprob(params, z) <= 1e-12


class TestJointLoglik:
    def test_single_derivation_forest(self):
        g = Grammar((R_AND, R_JUMP))
        params = init_params(g, 2, rng_seed=3)
        target = pair("jump and jump", "JUMP JUMP")
        z = Derivation(R_AND, (Derivation(R_JUMP), Derivation(R_JUMP)))
        assert joint_loglik(params, g, target) == pytest.approx(
            derivation_logprob(params, z)
        )

    def test_not_derivable_is_minus_inf(self):
        params = init_params(TOY, 2, rng_seed=0)
        assert joint_loglik(params, TOY, pair("jump", "WALK")) == -math.inf

    def test_two_derivation_sum(self):
        g = Grammar(
            (
                parse_rule("a NT_1 ### A NT_1"),
                parse_rule("a NT_1 ### NT_1 A"),
                parse_rule("a ### A"),
            )
        )
        params = init_params(g, 2, rng_seed=5)
        target = pair("a a", "A A")
        zs = bf_pair_derivations(g, target)
        assert len(zs) == 2
        expected = math.log(sum(bf_derivation_prob(params, z) for z in zs))
        assert joint_loglik(params, g, target) == pytest.approx(expected, abs=1e-9)

    def test_matches_brute_force_enumeration(self):
        rng = random.Random(29)
        instances = 0
        while instances < 60:
            g = random_grammar(rng, n_rules=rng.randint(2, 6))
            z = sample_random_derivation(g, rng)
            if z is None:
                continue
            target = derivation_yield(z)
            if len(target.x) > 6 or len(target.y) > 6:
                continue
            instances += 1
            params = init_params(g, rng.choice([1, 2, 4]), rng_seed=instances)
            expected = math.log(
                sum(bf_derivation_prob(params, d) for d in bf_pair_derivations(g, target))
            )
            assert joint_loglik(params, g, target) == pytest.approx(expected, abs=1e-9)


class TestConditionalLoglik:
    def test_unique_output_grammar_gives_zero(self):
        g = Grammar((R_AND, R_JUMP))
        params = init_params(g, 2, rng_seed=7)
        assert conditional_loglik(params, g, pair("jump and jump", "JUMP JUMP")) == 0.0

    def test_underivable_input_raises(self):
        params = init_params(TOY, 2, rng_seed=0)
        with pytest.raises(UndefinedConditionalError):
            conditional_loglik(params, TOY, pair("sprint", "SPRINT"))

    def test_matches_brute_force_ratio(self):
        g = Grammar(
            (
                parse_rule("a NT_1 ### A NT_1"),
                parse_rule("a NT_1 ### B NT_1"),
                parse_rule("a ### A"),
            )
        )
        params = init_params(g, 2, rng_seed=11)
        target = pair("a a", "A A")
        joint = sum(bf_derivation_prob(params, z) for z in bf_pair_derivations(g, target))
        marginal = sum(
            bf_derivation_prob(params, z) for z in bf_input_derivations(g, target.x)
        )
        assert conditional_loglik(params, g, target) == pytest.approx(
            math.log(joint / marginal), abs=1e-9
        )


class TestViterbi:
    def test_best_derivation_on_enumerable_grammar(self):
        rng = random.Random(31)
        instances = 0
        while instances < 40:
            g = random_grammar(rng, n_rules=rng.randint(2, 5))
            z = sample_random_derivation(g, rng, max_depth=3)
            if z is None:
                continue
            x = derivation_yield(z).x
            if len(x) > 5:
                continue
            instances += 1
            params = init_params(g, 2, rng_seed=instances)
            got = viterbi_parse(params, g, x)
            assert got is not None
            y, best = got
            assert derivation_yield(best).x == x
            assert derivation_yield(best).y == y
            best_prob = bf_derivation_prob(params, best)
            for other in bf_input_derivations(g, x):
                assert best_prob >= bf_derivation_prob(params, other) - 1e-12

    def test_abstains_on_unknown_token(self):
        params = init_params(TOY, 2, rng_seed=0)
        assert viterbi_parse(params, TOY, ("sprint",)) is None

    def test_output_cfg_veto(self):
        from qcfg.cfg import parse_output_cfg

        g = Grammar((R_JUMP,))
        params = init_params(g, 1, rng_seed=0)
        ok_cfg = parse_output_cfg("S -> 'JUMP'")
        bad_cfg = parse_output_cfg("S -> 'WALK'")
        assert viterbi_parse(params, g, ("jump",), output_cfg=ok_cfg) is not None
        assert viterbi_parse(params, g, ("jump",), output_cfg=bad_cfg) is None


class TestFit:
    def test_zero_steps_returns_init(self):
        corpus = Corpus((pair("jump", "JUMP"),))
        result = fit(TOY, corpus, 2, TrainConfig(steps=0, rng_seed=5))
        baseline = init_params(TOY, 2, rng_seed=5)
        assert np.array_equal(result.params.state_logits, baseline.state_logits)
        assert np.array_equal(result.params.rule_logits, baseline.rule_logits)

    def test_loglik_improves_on_toy(self):
        corpus = Corpus(
            (
                pair("jump", "JUMP"),
                pair("walk", "WALK"),
                pair("jump and walk", "JUMP WALK"),
                pair("jump twice", "JUMP JUMP"),
            )
        )
        parser = Parser(TOY)
        before = init_params(TOY, 2, rng_seed=0)
        ll_before = sum(joint_loglik(before, TOY, ex, parser) for ex in corpus)
        result = fit(TOY, corpus, 2, TrainConfig(steps=300, batch_size=4, rng_seed=0))
        ll_after = sum(joint_loglik(result.params, TOY, ex, parser) for ex in corpus)
        assert ll_after > ll_before + 1.0
        early = result.loglik_trace[0][1]
        late = result.loglik_trace[-1][1]
        assert late > early

    def test_skips_non_derivable_examples(self):
        corpus = Corpus((pair("jump", "JUMP"), pair("fly", "FLY")))
        result = fit(TOY, corpus, 2, TrainConfig(steps=10, rng_seed=0))
        assert result.skipped_examples == 1

    def test_deterministic(self):
        corpus = Corpus((pair("jump", "JUMP"), pair("jump twice", "JUMP JUMP")))
        a = fit(TOY, corpus, 2, TrainConfig(steps=50, rng_seed=3))
        b = fit(TOY, corpus, 2, TrainConfig(steps=50, rng_seed=3))
        assert np.array_equal(a.params.state_logits, b.params.state_logits)
        assert np.array_equal(a.params.rule_logits, b.params.rule_logits)

    def test_batch_restricted_normalization_runs(self):
        corpus = Corpus((pair("jump", "JUMP"), pair("walk", "WALK")))
        cfg = TrainConfig(steps=20, batch_size=1, batch_restricted_normalization=True)
        result = fit(TOY, corpus, 2, cfg)
        assert result.params.param_count == init_params(TOY, 2).param_count

    def test_restarts_pick_best_seed(self):
        from qcfg.model import fit_with_restarts

        corpus = Corpus(
            (
                pair("jump", "JUMP"),
                pair("walk", "WALK"),
                pair("jump and walk", "JUMP WALK"),
            )
        )
        parser = Parser(TOY)
        cfg = TrainConfig(steps=60, batch_size=4)
        best = fit_with_restarts(TOY, corpus, 2, cfg, seeds=(0, 1), parser=parser)
        singles = [
            fit(TOY, corpus, 2, TrainConfig(steps=60, batch_size=4, rng_seed=s), parser=parser)
            for s in (0, 1)
        ]

        def mean_joint(params):
            return sum(joint_loglik(params, TOY, ex, parser) for ex in corpus) / len(corpus)

        assert mean_joint(best.params) == pytest.approx(
            max(mean_joint(s.params) for s in singles), abs=1e-9
        )


class TestGradients:
    def test_matches_central_finite_differences(self):
        rng = random.Random(61)
        instances = 0
        while instances < 50:
            g = random_grammar(rng, n_rules=rng.randint(2, 5))
            z = sample_random_derivation(g, rng, max_depth=3)
            if z is None:
                continue
            target = derivation_yield(z)
            if len(target.x) > 5 or len(target.y) > 5:
                continue
            instances += 1
            params = init_params(g, rng.choice([1, 2, 3]), rng_seed=instances)
            parser = Parser(g)
            forest = parser.parse_pair(target)
            graph = compile_forest(forest, params)
            ll, grad_ctx, grad_emit = loglik_gradients(params, graph)
            assert ll == pytest.approx(joint_loglik(params, g, target, parser), abs=1e-9)
            eps = 1e-5
            for table, grad in (("state_logits", grad_ctx), ("rule_logits", grad_emit)):
                arr = getattr(params, table)
                flat_indices = [
                    (i, j)
                    for i in range(arr.shape[0])
                    for j in range(arr.shape[1])
                ]
                probe = rng.sample(flat_indices, min(4, len(flat_indices)))
                for i, j in probe:
                    bumped_hi = arr.copy()
                    bumped_lo = arr.copy()
                    bumped_hi[i, j] += eps
                    bumped_lo[i, j] -= eps
                    hi = joint_loglik(params.copy_with(**{table: bumped_hi}), g, target, parser)
                    lo = joint_loglik(params.copy_with(**{table: bumped_lo}), g, target, parser)
                    numeric = (hi - lo) / (2 * eps)
                    analytic = grad[i, j]
                    scale = max(abs(numeric), abs(analytic), 1e-8)
                    assert abs(numeric - analytic) / scale < 1e-4, (table, i, j)


class TestFingerprint:
    def test_binds_params_to_grammar(self):
        a = grammar_fingerprint(TOY)
        b = grammar_fingerprint(Grammar(TOY.rules[:-1]))
        assert a != b
        assert init_params(TOY, 2).fingerprint == a
