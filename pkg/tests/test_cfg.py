import random

import pytest

from qcfg.cfg import (
    Cat,
    CfgError,
    OutputCfg,
    cfg_accepts,
    consistent_index_assignments,
    format_output_cfg,
    parse_output_cfg,
    rule_output_valid,
)
from conftest import bf_cfg_language

PAREN = parse_output_cfg(
    """
    S -> '(' S ')'
    S -> 'a'
    """
)

FUNC = parse_output_cfg(
    """
    S -> 'f' '(' S ')'
    S -> 'c'
    """
)


class TestParseFormat:
    def test_start_defaults_to_first_lhs(self):
        assert PAREN.start == "S"

    def test_start_directive(self):
        cfg = parse_output_cfg("@start B\nA -> 'x'\nB -> A A")
        assert cfg.start == "B"

    def test_round_trip(self):
        assert parse_output_cfg(format_output_cfg(PAREN)) == PAREN

    def test_empty_rhs_rejected(self):
        with pytest.raises(CfgError, match="epsilon"):
            parse_output_cfg("S ->")

    def test_undefined_category_rejected(self):
        with pytest.raises(CfgError, match="never defined"):
            parse_output_cfg("S -> T 'x'")

    def test_comment_lines_ignored(self):
        cfg = parse_output_cfg("# header comment\nS -> 'a'\n\n# trailing\n")
        assert cfg.productions == (("S", ("a",)),)


class TestCfgAccepts:
    def test_balanced(self):
        assert cfg_accepts(PAREN, "( a )".split())

    def test_unbalanced(self):
        assert not cfg_accepts(PAREN, "( a".split())

    def test_single_production(self):
        cfg = parse_output_cfg("S -> 'JUMP'")
        assert cfg_accepts(cfg, ("JUMP",))
        assert not cfg_accepts(cfg, ("WALK",))

    def test_unary_chain(self):
        cfg = parse_output_cfg("A -> B\nB -> C\nC -> 'x'")
        assert cfg_accepts(cfg, ("x",))

    def test_unary_cycle_terminates(self):
        cfg = parse_output_cfg("A -> B\nB -> A\nB -> 'x'")
        assert cfg_accepts(cfg, ("x",))
        assert not cfg_accepts(cfg, ("y",))

    def test_agrees_with_brute_force_enumeration(self):
        rng = random.Random(5)
        for trial in range(12):
            cfg = _random_cfg(rng)
            language = bf_cfg_language(cfg, 6)
            for s in sorted(language):
                assert cfg_accepts(cfg, s), (cfg, s)
            terminals = sorted({t for _, rhs in cfg.productions for t in rhs if isinstance(t, str)})
            for _ in range(40):
                probe = tuple(rng.choice(terminals) for _ in range(rng.randint(1, 6)))
                assert cfg_accepts(cfg, probe) == (probe in language)


def _random_cfg(rng: random.Random) -> OutputCfg:
    cats = ["S", "T", "U"][: rng.randint(1, 3)]
    terminals = ["x", "y", "z"]
    productions = []
    for cat in cats:
        for _ in range(rng.randint(1, 3)):
            rhs = []
            for _ in range(rng.randint(1, 3)):
                if rng.random() < 0.4 and cats:
                    rhs.append(Cat(rng.choice(cats)))
                else:
                    rhs.append(rng.choice(terminals))
            productions.append((cat, tuple(rhs)))
        # guarantee a terminating production per category
        productions.append((cat, (rng.choice(terminals),)))
    return OutputCfg(tuple(productions), "S")


class TestRuleOutputValid:
    def test_wildcard_matches_category(self):
        assert rule_output_valid(FUNC, ("f", "(", 1, ")"))

    def test_impossible_prefix(self):
        assert not rule_output_valid(FUNC, (")", 1))

    def test_all_terminal_reduces_to_recognition(self):
        # single-category grammar, so any-category == start-category
        assert rule_output_valid(FUNC, ("f", "(", "c", ")")) == cfg_accepts(
            FUNC, "f ( c )".split()
        )
        assert not rule_output_valid(FUNC, ("c", "c"))

    def test_derivable_from_non_start_category(self):
        cfg = parse_output_cfg("@start S\nS -> 'go' V\nV -> 'left'\nV -> 'right'")
        # "left" is only derivable from V, not from the start symbol
        assert rule_output_valid(cfg, ("left",))
        assert not cfg_accepts(cfg, ("left",))

    def test_consistency_flag(self):
        cfg = parse_output_cfg(
            """
            @start S
            S -> A 'then' B
            A -> 'a'
            B -> 'b'
            """
        )
        # positions demand different categories for the same index
        beta = (1, "then", 1)
        assert rule_output_valid(cfg, beta)
        assert not rule_output_valid(cfg, beta, require_consistent_categories=True)

    def test_consistent_assignments_enumeration(self):
        cfg = parse_output_cfg(
            """
            @start S
            S -> A 'then' A
            A -> 'a'
            """
        )
        got = consistent_index_assignments(cfg, (1, "then", 1), "S")
        assert got == ({1: "A"},)

    def test_assignment_respects_structure(self):
        got = consistent_index_assignments(FUNC, ("f", "(", 1, ")"), "S")
        assert got == ({1: "S"},)
        assert consistent_index_assignments(FUNC, (")", 1), "S") == ()
