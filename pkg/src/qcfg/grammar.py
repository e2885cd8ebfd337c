"""Core QCFG data types: rules, grammars, derivations, corpora.

A rule pairs an input-side symbol string (alpha) with an output-side symbol
string (beta) over a single implicit nonterminal symbol. Nonterminals are
represented as positive ints (their link index), terminals as plain token
strings, so alpha/beta are tuples mixing ints and strs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Union

Sym = Union[int, str]

NT_RE = re.compile(r"^NT_([1-9][0-9]*)$")


class GrammarError(ValueError):
    pass


class CompositionOverflow(GrammarError):
    """Composing two rules exceeded the nonterminal budget."""


def is_valid_token(text: str) -> bool:
    return bool(text) and not any(ch.isspace() for ch in text)


def format_symbol(sym: Sym) -> str:
    return "NT_%d" % sym if isinstance(sym, int) else sym


def parse_symbol(text: str) -> Sym:
    m = NT_RE.match(text)
    return int(m.group(1)) if m else text


@dataclass(frozen=True)
class Rule:
    """One production: NT -> <alpha, beta> with linked nonterminal indices."""

    alpha: tuple[Sym, ...]
    beta: tuple[Sym, ...]

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(self.alpha))
        object.__setattr__(self, "beta", tuple(self.beta))

    @property
    def arity(self) -> int:
        return len(self.alpha_indices)

    @property
    def alpha_indices(self) -> tuple[int, ...]:
        return tuple(s for s in self.alpha if isinstance(s, int))

    def __str__(self) -> str:
        return format_rule(self)

    def __lt__(self, other: "Rule") -> bool:
        return format_rule(self) < format_rule(other)


def format_rule(rule: Rule) -> str:
    return "%s ### %s" % (
        " ".join(format_symbol(s) for s in rule.alpha),
        " ".join(format_symbol(s) for s in rule.beta),
    )


def parse_rule(line: str) -> Rule:
    parts = line.split("###")
    if len(parts) != 2:
        raise GrammarError("expected exactly one '###' separator: %r" % line)
    alpha = tuple(parse_symbol(t) for t in parts[0].split())
    beta = tuple(parse_symbol(t) for t in parts[1].split())
    return Rule(alpha, beta)


def validate_rule(rule: Rule, max_nts: int, allow_repeat: bool = True) -> str | None:
    """Check all rule invariants. Returns None if ok, else a description."""
    if not rule.alpha:
        return "empty input side"
    if not rule.beta:
        return "empty output side"
    for side_name, side in (("input", rule.alpha), ("output", rule.beta)):
        for sym in side:
            if isinstance(sym, str) and not is_valid_token(sym):
                return "invalid %s token %r" % (side_name, sym)
    alpha_idx = rule.alpha_indices
    k = len(alpha_idx)
    if len(set(alpha_idx)) != k:
        return "repeated nonterminal index on input side"
    if set(alpha_idx) != set(range(1, k + 1)):
        return "input-side indices %s do not form {1..%d}" % (sorted(set(alpha_idx)), k)
    if k > max_nts:
        return "%d nonterminals exceed limit %d" % (k, max_nts)
    beta_idx = [s for s in rule.beta if isinstance(s, int)]
    for i in beta_idx:
        if not 1 <= i <= k:
            return "output-side index %d not on input side" % i
    if not allow_repeat and len(set(beta_idx)) != len(beta_idx):
        return "repeated nonterminal index on output side"
    missing = set(range(1, k + 1)) - set(beta_idx)
    if missing:
        return "input-side indices %s missing from output side" % sorted(missing)
    return None


def is_bare_nt_rule(rule: Rule) -> bool:
    """True for rules whose whole input side is a single nonterminal.

    Such rules (identity or pure output wrappers) make the derivation set of
    an input infinite, so grammars refuse them even though they are valid
    Rule values for compose/unify.
    """
    return len(rule.alpha) == 1 and isinstance(rule.alpha[0], int)


@dataclass(frozen=True)
class Grammar:
    rules: tuple[Rule, ...]
    max_nonterminals: int = 4
    allow_repeated_indices: bool = True

    def __post_init__(self):
        seen: dict[Rule, None] = {}
        for rule in self.rules:
            problem = validate_rule(rule, self.max_nonterminals, self.allow_repeated_indices)
            if problem:
                raise GrammarError("bad rule %s: %s" % (format_rule(rule), problem))
            if is_bare_nt_rule(rule):
                raise GrammarError(
                    "bad rule %s: bare-nonterminal input side makes derivation sets infinite"
                    % format_rule(rule)
                )
            seen.setdefault(rule, None)
        object.__setattr__(self, "rules", tuple(seen))

    def __len__(self) -> int:
        return len(self.rules)

    def __contains__(self, rule: Rule) -> bool:
        return rule in set(self.rules)

    def with_rules(self, rules: Iterable[Rule]) -> "Grammar":
        return Grammar(tuple(rules), self.max_nonterminals, self.allow_repeated_indices)

    def add(self, rule: Rule) -> "Grammar":
        return self.with_rules(self.rules + (rule,))

    def remove(self, rules: Iterable[Rule]) -> "Grammar":
        drop = set(rules)
        return self.with_rules(r for r in self.rules if r not in drop)


def compose(outer: Rule, inner: Rule, index: int, max_nts: int | None = None) -> Rule:
    """Substitute `inner` for NT_index of `outer` and renumber canonically.

    The inner rule's input side replaces NT_index in outer.alpha; its output
    side replaces every occurrence of NT_index in outer.beta. Remaining
    indices are renumbered 1..k left-to-right by first occurrence on the
    input side.
    """
    if index not in outer.alpha_indices:
        raise GrammarError("outer rule has no nonterminal %d" % index)
    # Tag symbols by origin so renumbering can distinguish outer/inner indices.
    alpha: list = []
    for sym in outer.alpha:
        if sym == index:
            alpha.extend(("i", s) if isinstance(s, int) else s for s in inner.alpha)
        elif isinstance(sym, int):
            alpha.append(("o", sym))
        else:
            alpha.append(sym)
    beta: list = []
    for sym in outer.beta:
        if sym == index:
            beta.extend(("i", s) if isinstance(s, int) else s for s in inner.beta)
        elif isinstance(sym, int):
            beta.append(("o", sym))
        else:
            beta.append(sym)
    renumber: dict = {}
    for sym in alpha:
        if isinstance(sym, tuple) and sym not in renumber:
            renumber[sym] = len(renumber) + 1
    if max_nts is not None and len(renumber) > max_nts:
        raise CompositionOverflow(
            "composition yields %d nonterminals (limit %d)" % (len(renumber), max_nts)
        )
    new_alpha = tuple(renumber[s] if isinstance(s, tuple) else s for s in alpha)
    new_beta = tuple(renumber[s] if isinstance(s, tuple) else s for s in beta)
    return Rule(new_alpha, new_beta)


@dataclass(frozen=True)
class Derivation:
    """A rule-application tree; children[i-1] expands NT_i of the root rule."""

    root_rule: Rule
    children: tuple["Derivation", ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) != self.root_rule.arity:
            raise GrammarError(
                "rule %s has %d nonterminals but %d children given"
                % (format_rule(self.root_rule), self.root_rule.arity, len(self.children))
            )

    def child(self, index: int) -> "Derivation":
        return self.children[index - 1]

    def depth(self) -> int:
        return 1 + max((c.depth() for c in self.children), default=0)

    def walk(self) -> Iterator[tuple["Derivation", "Derivation | None", int]]:
        """Yield (node, parent, index) triples, root first (parent None, index 0)."""
        stack: list[tuple[Derivation, Derivation | None, int]] = [(self, None, 0)]
        while stack:
            node, parent, idx = stack.pop()
            yield node, parent, idx
            for i in range(node.root_rule.arity, 0, -1):
                stack.append((node.child(i), node, i))


@dataclass(frozen=True)
class ExamplePair:
    x: tuple[str, ...]
    y: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "y", tuple(self.y))
        if not self.x or not self.y:
            raise GrammarError("example sides must be non-empty")

    @staticmethod
    def from_strings(x: str, y: str) -> "ExamplePair":
        return ExamplePair(tuple(x.split()), tuple(y.split()))


@dataclass(frozen=True)
class Corpus:
    examples: tuple[ExamplePair, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[ExamplePair]:
        return iter(self.examples)


def derivation_yield(z: Derivation) -> ExamplePair:
    """The string pair derived by recursively substituting child yields."""
    child_yield = {i: derivation_yield(z.child(i)) for i in range(1, z.root_rule.arity + 1)}
    x: list[str] = []
    for sym in z.root_rule.alpha:
        x.extend(child_yield[sym].x) if isinstance(sym, int) else x.append(sym)
    y: list[str] = []
    for sym in z.root_rule.beta:
        y.extend(child_yield[sym].y) if isinstance(sym, int) else y.append(sym)
    return ExamplePair(tuple(x), tuple(y))


def fold_derivation(z: Derivation) -> Rule:
    """Collapse a derivation to the single all-terminal rule it denotes via compose."""
    folds = {i: fold_derivation(z.child(i)) for i in range(1, z.root_rule.arity + 1)}
    # Substitute leftmost-first; folded children are all-terminal, so remaining
    # nonterminal positions keep their relative order under renumbering and the
    # leftmost surviving nonterminal always carries canonical index equal to
    # its first-occurrence rank.
    original_order = [s for s in z.root_rule.alpha if isinstance(s, int)]
    rule = z.root_rule
    for original_index in original_order:
        current = next(s for s in rule.alpha if isinstance(s, int))
        rule = compose(rule, folds[original_index], current)
    return rule
