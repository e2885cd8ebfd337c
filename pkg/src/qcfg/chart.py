"""Packed-forest chart parsing for QCFGs.

Three entry points share one engine:
  * parse_pair  -- all derivations of an (input, output) pair, items keyed by
    (input-span, output-span)
  * parse_input -- all derivations of an input string regardless of output,
    items keyed by input-span
  * can_derive  -- recognition only, no forest materialization

Rules with several input-side nonterminals are matched directly against the
span being built (input sides are short in practice); child spans are always
strictly smaller than the parent span because grammars refuse bare-nonterminal
input sides, so charts are acyclic by construction.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional

from .grammar import Corpus, Derivation, ExamplePair, Grammar, Rule

DEFAULT_MAX_CHART_ITEMS = 10_000_000


class CapacityError(Exception):
    """Chart grew past the configured record limit; distinct from no-parse."""


@dataclass(frozen=True)
class Edge:
    rule: Rule
    children: tuple[tuple, ...]  # item keys ordered by nonterminal index 1..k


@dataclass(frozen=True)
class DerivationForest:
    """A packed chart: every complete derivation corresponds to one way of
    choosing an edge at each reachable node."""

    nodes: dict
    roots: tuple
    topo: tuple  # node keys, children strictly before parents

    def edges(self, key) -> tuple[Edge, ...]:
        return self.nodes[key]

    def count_derivations(self, limit: int | None = None) -> int:
        counts: dict = {}
        for key in self.topo:
            total = 0
            for edge in self.nodes[key]:
                prod = 1
                for child in edge.children:
                    prod *= counts[child]
                total += prod
                if limit is not None and total >= limit:
                    total = limit
                    break
            counts[key] = total
        return sum(counts[r] for r in self.roots)

    def derivations(self, limit: int | None = None) -> Iterator[Derivation]:
        emitted = 0

        def expand(key) -> Iterator[Derivation]:
            for edge in self.nodes[key]:
                if not edge.children:
                    yield Derivation(edge.rule)
                    continue
                child_iters = [list(expand(c)) for c in edge.children]
                yield from _tree_product(edge.rule, child_iters)

        for root in self.roots:
            for z in expand(root):
                yield z
                emitted += 1
                if limit is not None and emitted >= limit:
                    return

    def reachable(self) -> set:
        seen = set()
        stack = list(self.roots)
        while stack:
            key = stack.pop()
            if key in seen:
                continue
            seen.add(key)
            for edge in self.nodes[key]:
                stack.extend(c for c in edge.children if c not in seen)
        return seen

    def used_rules(self) -> frozenset[Rule]:
        # Every edge of a reachable node takes part in at least one complete
        # derivation (all chart items are derivable by construction).
        seen = self.reachable()
        return frozenset(e.rule for key in seen for e in self.nodes[key])

    def derivable_without(self, excluded: frozenset[Rule] | set[Rule]) -> bool:
        ok: dict = {}
        for key in self.topo:
            ok[key] = any(
                e.rule not in excluded and all(ok[c] for c in e.children)
                for e in self.nodes[key]
            )
        return any(ok[r] for r in self.roots)

    def indispensable_rules(self) -> frozenset[Rule]:
        return frozenset(
            r for r in self.used_rules() if not self.derivable_without({r})
        )


def _tree_product(rule: Rule, child_lists: list[list[Derivation]]) -> Iterator[Derivation]:
    if any(not lst for lst in child_lists):
        return
    idx = [0] * len(child_lists)
    while True:
        yield Derivation(rule, tuple(lst[i] for lst, i in zip(child_lists, idx)))
        pos = len(idx) - 1
        while pos >= 0:
            idx[pos] += 1
            if idx[pos] < len(child_lists[pos]):
                break
            idx[pos] = 0
            pos -= 1
        if pos < 0:
            return


class Parser:
    """Holds a grammar compiled for repeated parsing.

    The module-level parse_pair / parse_input / can_derive wrappers build a
    throwaway Parser; corpus-scale callers should construct one and reuse it.
    """

    def __init__(self, grammar: Grammar, max_chart_items: int = DEFAULT_MAX_CHART_ITEMS):
        self.grammar = grammar
        self.max_chart_items = max_chart_items
        self._rules = []
        for rule in grammar.rules:
            alpha_terms = Counter(s for s in rule.alpha if isinstance(s, str))
            beta_terms = Counter(s for s in rule.beta if isinstance(s, str))
            self._rules.append((rule, alpha_terms, beta_terms, len(rule.alpha)))

    # -- input-side matching -------------------------------------------------

    def _alpha_matches(self, alpha, x, i, j, has_item):
        """All ways to tile x[i:j] with alpha; yields span-per-index dicts."""
        out = []
        spans: dict[int, tuple[int, int]] = {}

        def rec(p, pos):
            if p == len(alpha):
                if pos == j:
                    out.append(dict(spans))
                return
            sym = alpha[p]
            remaining = len(alpha) - p - 1
            if isinstance(sym, str):
                if pos < j and x[pos] == sym:
                    rec(p + 1, pos + 1)
            else:
                for b in range(pos + 1, j - remaining + 1):
                    if has_item(pos, b):
                        spans[sym] = (pos, b)
                        rec(p + 1, b)
                spans.pop(sym, None)

        rec(0, i)
        return out

    # -- bilingual parse -----------------------------------------------------

    def parse_pair(self, pair: ExamplePair) -> Optional[DerivationForest]:
        chart = self._pair_chart(pair, build_forest=True)
        if chart is None:
            return None
        cells, order = chart
        n, m = len(pair.x), len(pair.y)
        root = (0, n, 0, m)
        nodes = {}
        for (i, j), per_out in cells.items():
            for (k, l), edge_list in per_out.items():
                nodes[(i, j, k, l)] = tuple(edge_list)
        if root not in nodes:
            return None
        topo = tuple(
            (i, j, k, l)
            for (i, j) in order
            for (k, l) in sorted(cells[(i, j)])
        )
        return DerivationForest(nodes=nodes, roots=(root,), topo=topo)

    def can_derive(self, pair: ExamplePair) -> bool:
        chart = self._pair_chart(pair, build_forest=False)
        if chart is None:
            return False
        cells, _ = chart
        n, m = len(pair.x), len(pair.y)
        return (0, m) in cells.get((0, n), {})

    def _pair_chart(self, pair: ExamplePair, build_forest: bool):
        x, y = pair.x, pair.y
        n, m = len(x), len(y)
        x_counts = Counter(x)
        y_counts = Counter(y)
        active = [
            rec
            for rec in self._rules
            if rec[3] <= n
            and all(x_counts[t] >= c for t, c in rec[1].items())
            and all(y_counts[t] >= c for t, c in rec[2].items())
        ]
        if not active:
            return None
        y_positions: dict[str, list[int]] = {}
        for q, tok in enumerate(y):
            y_positions.setdefault(tok, []).append(q)

        # cells[(i,j)]: dict (k,l) -> list[Edge] (or True in recognize mode)
        # outs[(i,j)]: dict k -> list of l, for anchoring output-side children
        cells: dict = {}
        outs: dict = {}
        records = 0
        order = []

        def has_item(a, b):
            return (a, b) in cells

        for width in range(1, n + 1):
            for i in range(n - width + 1):
                j = i + width
                cell: dict = {}
                cell_outs: dict = {}
                for rule, _, _, alen in active:
                    if alen > width:
                        continue
                    for xspans in self._alpha_matches(rule.alpha, x, i, j, has_item):
                        for k, l, children in self._beta_matches(
                            rule, y, xspans, outs, y_positions
                        ):
                            records += 1
                            if records > self.max_chart_items:
                                raise CapacityError(
                                    "chart for %r exceeded %d records"
                                    % (" ".join(x), self.max_chart_items)
                                )
                            if build_forest:
                                cell.setdefault((k, l), []).append(Edge(rule, children))
                            else:
                                cell[(k, l)] = True
                            if (k, l) not in cell_outs:
                                cell_outs[(k, l)] = True
                if cell:
                    cells[(i, j)] = cell
                    by_start: dict = {}
                    for (k, l) in cell:
                        by_start.setdefault(k, []).append(l)
                    outs[(i, j)] = by_start
                    order.append((i, j))
        if not cells:
            return None
        return cells, order

    def _beta_matches(self, rule: Rule, y, xspans, outs, y_positions):
        """Match the output side against y, anchored on already-built child
        items; yields (k, l, child_keys)."""
        beta = rule.beta
        m = len(y)
        child_outs = {}
        for t, span in xspans.items():
            got = outs.get(span)
            if got is None:
                return
            child_outs[t] = got

        results = []
        bindings: dict[int, tuple[int, int]] = {}

        def rec(p, q, start):
            if p == len(beta):
                child_keys = tuple(
                    xspans[t] + bindings[t] for t in range(1, len(xspans) + 1)
                )
                results.append((start, q, child_keys))
                return
            sym = beta[p]
            if isinstance(sym, str):
                if q < m and y[q] == sym:
                    rec(p + 1, q + 1, start)
                return
            bound = bindings.get(sym)
            if bound is not None:
                k1, l1 = bound
                ln = l1 - k1
                if q + ln <= m and y[q : q + ln] == y[k1:l1]:
                    rec(p + 1, q + ln, start)
                return
            for l1 in child_outs[sym].get(q, ()):
                bindings[sym] = (q, l1)
                rec(p + 1, l1, start)
            bindings.pop(sym, None)

        first = beta[0]
        if isinstance(first, str):
            starts = y_positions.get(first, ())
        else:
            starts = sorted({k for k in child_outs[first]})
        for k in starts:
            rec(0, k, k)
        return results

    # -- input-only parse ----------------------------------------------------

    def parse_input(self, x: tuple[str, ...]) -> Optional[DerivationForest]:
        x = tuple(x)
        n = len(x)
        x_counts = Counter(x)
        active = [
            rec
            for rec in self._rules
            if rec[3] <= n and all(x_counts[t] >= c for t, c in rec[1].items())
        ]
        if not active:
            return None
        cells: dict = {}
        records = 0
        order = []

        def has_item(a, b):
            return (a, b) in cells

        for width in range(1, n + 1):
            for i in range(n - width + 1):
                j = i + width
                edge_list = []
                for rule, _, _, alen in active:
                    if alen > width:
                        continue
                    for xspans in self._alpha_matches(rule.alpha, x, i, j, has_item):
                        records += 1
                        if records > self.max_chart_items:
                            raise CapacityError(
                                "chart for %r exceeded %d records"
                                % (" ".join(x), self.max_chart_items)
                            )
                        children = tuple(
                            xspans[t] for t in range(1, len(xspans) + 1)
                        )
                        edge_list.append(Edge(rule, children))
                if edge_list:
                    cells[(i, j)] = edge_list
                    order.append((i, j))
        if (0, n) not in cells:
            return None
        return DerivationForest(
            nodes={key: tuple(edges) for key, edges in cells.items()},
            roots=((0, n),),
            topo=tuple(order),
        )


def parse_pair(grammar: Grammar, pair: ExamplePair, max_chart_items: int = DEFAULT_MAX_CHART_ITEMS):
    return Parser(grammar, max_chart_items).parse_pair(pair)


def parse_input(grammar: Grammar, x, max_chart_items: int = DEFAULT_MAX_CHART_ITEMS):
    return Parser(grammar, max_chart_items).parse_input(tuple(x))


def can_derive(grammar: Grammar, pair: ExamplePair, max_chart_items: int = DEFAULT_MAX_CHART_ITEMS) -> bool:
    return Parser(grammar, max_chart_items).can_derive(pair)


def corpus_coverage(parser: Parser, corpus: Corpus) -> list[bool]:
    return [parser.can_derive(pair) for pair in corpus]


# -- occurrence testing ------------------------------------------------------


def occurs_in(pattern, s) -> bool:
    """True iff substituting every nonterminal with some non-empty token
    sequence (occurrences sharing an index get the same sequence) turns
    `pattern` into a contiguous substring of s, or all of s.

    Input sides never repeat indices so they take the greedy path; output
    sides may repeat and fall back to backtracking.
    """
    pattern = tuple(pattern)
    s = tuple(s)
    if not pattern:
        raise ValueError("empty pattern")
    indices = [sym for sym in pattern if isinstance(sym, int)]
    if len(set(indices)) == len(indices):
        return _occurs_distinct(pattern, s)
    return _occurs_backtrack(pattern, s)


def _occurs_distinct(pattern, s) -> bool:
    # Split into terminal runs separated by minimum-gap counts; match runs
    # greedily left to right (gaps only impose lower bounds, so the earliest
    # feasible placement is complete).
    runs: list[tuple[str, ...]] = []
    gaps = [0]
    current: list[str] = []
    for sym in pattern:
        if isinstance(sym, str):
            current.append(sym)
        else:
            if current:
                runs.append(tuple(current))
                current = []
                gaps.append(1)
            else:
                gaps[-1] += 1
    if current:
        runs.append(tuple(current))
        gaps.append(0)
    if not runs:
        return len(s) >= gaps[0]
    pos = gaps[0]
    for r, run in enumerate(runs):
        if r > 0:
            pos += gaps[r]
        found = _find_run(s, run, pos)
        if found < 0:
            return False
        pos = found + len(run)
    return len(s) - pos >= gaps[-1]


def _find_run(s, run, start) -> int:
    ln = len(run)
    for p in range(start, len(s) - ln + 1):
        if s[p : p + ln] == run:
            return p
    return -1


def _occurs_backtrack(pattern, s) -> bool:
    n = len(s)
    bindings: dict[int, tuple[str, ...]] = {}

    def rec(p, q) -> bool:
        if p == len(pattern):
            return True
        remaining = len(pattern) - p - 1
        sym = pattern[p]
        if isinstance(sym, str):
            return q < n and s[q] == sym and rec(p + 1, q + 1)
        bound = bindings.get(sym)
        if bound is not None:
            ln = len(bound)
            return q + ln + remaining <= n and s[q : q + ln] == bound and rec(p + 1, q + ln)
        for ln in range(1, n - q - remaining + 1):
            bindings[sym] = s[q : q + ln]
            if rec(p + 1, q + ln):
                del bindings[sym]
                return True
        bindings.pop(sym, None)
        return False

    first = pattern[0]
    if isinstance(first, str):
        starts = [p for p, tok in enumerate(s) if tok == first]
    else:
        starts = range(len(s))
    return any(rec(0, k) for k in starts)
