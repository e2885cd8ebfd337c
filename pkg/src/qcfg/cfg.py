"""Output-side context-free grammars: recognition and rule-output validity.

An OutputCfg constrains which output strings count as well-formed. Besides
plain recognition (cfg_accepts) this module decides whether a QCFG rule's
output side could ever produce a valid output: nonterminal occurrences act as
wildcards that may be replaced by any CFG category, and the span DP records
which category was substituted where so callers can recover assignments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

from .grammar import Sym


class CfgError(ValueError):
    pass


@dataclass(frozen=True)
class Cat:
    name: str

    def __repr__(self):
        return "Cat(%r)" % self.name


CfgSym = Union[Cat, str]


@dataclass(frozen=True)
class OutputCfg:
    productions: tuple[tuple[str, tuple[CfgSym, ...]], ...]
    start: str

    def __post_init__(self):
        lhs_set = {lhs for lhs, _ in self.productions}
        if self.start not in lhs_set:
            raise CfgError("start category %r has no production" % self.start)
        for lhs, rhs in self.productions:
            if not rhs:
                raise CfgError("empty right-hand side for %r (epsilon-free CFGs only)" % lhs)
            for sym in rhs:
                if isinstance(sym, Cat) and sym.name not in lhs_set:
                    raise CfgError("category %r used but never defined" % sym.name)

    @property
    def categories(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for lhs, _ in self.productions:
            seen.setdefault(lhs, None)
        return tuple(seen)

    def by_lhs(self) -> dict[str, list[tuple[CfgSym, ...]]]:
        out: dict[str, list[tuple[CfgSym, ...]]] = {}
        for lhs, rhs in self.productions:
            out.setdefault(lhs, []).append(rhs)
        return out


def parse_output_cfg(text: str) -> OutputCfg:
    """One production per line: `LHS -> sym 'tok' ...`; `@start NAME` overrides
    the default start (the first production's LHS)."""
    productions = []
    start = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@start"):
            parts = line.split()
            if len(parts) != 2:
                raise CfgError("line %d: @start takes one name" % lineno)
            start = parts[1]
            continue
        if "->" not in line:
            raise CfgError("line %d: expected `LHS -> ...`" % lineno)
        lhs, _, rhs_text = line.partition("->")
        lhs = lhs.strip()
        if not lhs or " " in lhs:
            raise CfgError("line %d: bad category name %r" % (lineno, lhs))
        rhs: list[CfgSym] = []
        for tok in rhs_text.split():
            if len(tok) >= 2 and tok.startswith("'") and tok.endswith("'"):
                rhs.append(tok[1:-1])
            else:
                rhs.append(Cat(tok))
        productions.append((lhs, tuple(rhs)))
    if not productions:
        raise CfgError("no productions")
    if start is None:
        start = productions[0][0]
    return OutputCfg(tuple(productions), start)


def format_output_cfg(cfg: OutputCfg) -> str:
    lines = ["@start %s" % cfg.start]
    for lhs, rhs in cfg.productions:
        body = " ".join(s.name if isinstance(s, Cat) else "'%s'" % s for s in rhs)
        lines.append("%s -> %s" % (lhs, body))
    return "\n".join(lines) + "\n"


_WILDCARD = object()


def _span_table(cfg: OutputCfg, seq: tuple) -> dict:
    """T[(cat, i, j)] = True iff cat derives seq[i:j] treated as a sentential
    form; positions holding _WILDCARD match any single category directly."""
    n = len(seq)
    prods = cfg.by_lhs()
    cats = cfg.categories
    table: dict = {}

    def tiles(rhs, i, j) -> bool:
        frontier = {i}
        for sym in rhs:
            nxt = set()
            if isinstance(sym, str):
                for a in frontier:
                    if a < j and seq[a] == sym:
                        nxt.add(a + 1)
            else:
                for a in frontier:
                    if a < j and seq[a] is _WILDCARD:
                        nxt.add(a + 1)
                    for b in range(a + 1, j + 1):
                        if table.get((sym.name, a, b)):
                            nxt.add(b)
            if not nxt:
                return False
            frontier = nxt
        return j in frontier

    for width in range(1, n + 1):
        for i in range(n - width + 1):
            j = i + width
            if width == 1 and seq[i] is _WILDCARD:
                for cat in cats:
                    table[(cat, i, j)] = True
                continue
            changed = True
            while changed:
                changed = False
                for cat in cats:
                    if table.get((cat, i, j)):
                        continue
                    for rhs in prods[cat]:
                        if tiles(rhs, i, j):
                            table[(cat, i, j)] = True
                            changed = True
                            break
    return table


def cfg_accepts(cfg: OutputCfg, y: Iterable[str]) -> bool:
    y = tuple(y)
    if not y:
        return False
    table = _span_table(cfg, y)
    return bool(table.get((cfg.start, 0, len(y))))


def _beta_form(beta: tuple[Sym, ...]) -> tuple:
    return tuple(_WILDCARD if isinstance(s, int) else s for s in beta)


def rule_output_valid(
    cfg: OutputCfg, beta: tuple[Sym, ...], require_consistent_categories: bool = False
) -> bool:
    """True iff some replacement of beta's nonterminal occurrences by CFG
    categories is derivable from some category. By default occurrences sharing
    an index may receive different categories."""
    beta = tuple(beta)
    if not beta:
        return False
    form = _beta_form(beta)
    table = _span_table(cfg, form)
    n = len(beta)
    roots = [c for c in cfg.categories if table.get((c, 0, n))]
    if not roots:
        return False
    if not require_consistent_categories:
        return True
    return any(
        consistent_index_assignments(cfg, beta, root, _table=table) for root in roots
    )


def wildcard_assignments(cfg: OutputCfg, beta: tuple[Sym, ...], root: str, _table=None):
    """Enumerate maps {beta position -> category} over all derivations of the
    sentential form from `root`. Deterministic order, deduplicated."""
    form = _beta_form(beta)
    n = len(form)
    table = _table if _table is not None else _span_table(cfg, form)
    prods = cfg.by_lhs()
    seen: dict[tuple, None] = {}
    active: set = set()  # (cat, i, j) on the current path, guards unary cycles

    def derive(cat, i, j, acc):
        # direct substitution at a wildcard
        if j == i + 1 and form[i] is _WILDCARD:
            yield acc + ((i, cat),)
        if (cat, i, j) in active:
            return
        active.add((cat, i, j))
        try:
            for rhs in prods[cat]:
                yield from tile(rhs, 0, i, j, acc)
        finally:
            active.discard((cat, i, j))

    def tile(rhs, p, pos, j, acc):
        if p == len(rhs):
            if pos == j:
                yield acc
            return
        sym = rhs[p]
        if isinstance(sym, str):
            if pos < j and form[pos] == sym:
                yield from tile(rhs, p + 1, pos + 1, j, acc)
            return
        for b in range(pos + 1, j + 1):
            if not table.get((sym.name, pos, b)) and not (
                b == pos + 1 and form[pos] is _WILDCARD
            ):
                continue
            for sub in derive(sym.name, pos, b, acc):
                yield from tile(rhs, p + 1, b, j, sub)

    if not table.get((root, 0, n)) and not (n == 1 and form[0] is _WILDCARD):
        return ()
    for assignment in derive(root, 0, n, ()):
        key = tuple(sorted(assignment))
        if key not in seen:
            seen[key] = None
    return tuple(dict(k) for k in sorted(seen))


def consistent_index_assignments(
    cfg: OutputCfg, beta: tuple[Sym, ...], root: str, _table=None
) -> tuple[dict[int, str], ...]:
    """Assignments {nonterminal index -> category} such that replacing every
    occurrence of an index by its category makes beta derivable from `root`.
    Occurrences sharing an index are forced to one category."""
    index_at = {pos: sym for pos, sym in enumerate(beta) if isinstance(sym, int)}
    out: dict[tuple, None] = {}
    for assignment in wildcard_assignments(cfg, beta, root, _table=_table):
        by_index: dict[int, str] = {}
        ok = True
        for pos, cat in assignment.items():
            idx = index_at[pos]
            if by_index.setdefault(idx, cat) != cat:
                ok = False
                break
        if ok:
            out.setdefault(tuple(sorted(by_index.items())), None)
    return tuple(dict(k) for k in sorted(out))
