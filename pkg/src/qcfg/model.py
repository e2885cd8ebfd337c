"""Latent-state distribution over rule expansions.

Each rule application is scored p(r | parent rule, index) = sum_s p(s | ctx)
p(r | s), with both factors softmax-parameterized by scalar logits. Likelihood
and Viterbi run over packed forests in log space; fitting differentiates
through the inside algorithm with torch and Adam.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .cfg import OutputCfg, cfg_accepts
from .chart import DerivationForest, Parser
from .grammar import (
    Corpus,
    Derivation,
    ExamplePair,
    Grammar,
    Rule,
    derivation_yield,
    format_rule,
)

ROOT = None  # parent-context marker for the derivation root

DEFAULT_LR_GRID = (0.01, 0.05, 0.1)
DEFAULT_STATE_GRID = (2, 4, 32, 64)
INIT_SCALE = 0.1


class ModelLookupError(KeyError):
    """Rule or context not covered by the parameter tables."""


class UndefinedConditionalError(ValueError):
    """Conditional likelihood requested for an input with no derivation."""


def grammar_fingerprint(grammar: Grammar) -> str:
    h = hashlib.sha256()
    h.update(b"%d %d\n" % (grammar.max_nonterminals, int(grammar.allow_repeated_indices)))
    for rule in grammar.rules:
        h.update(format_rule(rule).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class ModelParams:
    """Scalar logits for the state-given-context and rule-given-state factors.

    Context row 0 is the derivation root; the remaining rows cover every
    (parent rule, nonterminal index) pair in grammar order.
    """

    num_states: int
    rules: tuple[Rule, ...]
    state_logits: np.ndarray  # (num_contexts, num_states)
    rule_logits: np.ndarray  # (num_states, num_rules)
    fingerprint: str

    def __post_init__(self):
        self._rule_id = {r: i for i, r in enumerate(self.rules)}
        self._ctx_id = {ROOT: 0}
        for rule in self.rules:
            for i in range(1, rule.arity + 1):
                self._ctx_id[(rule, i)] = len(self._ctx_id)
        expect = (len(self._ctx_id), self.num_states)
        if self.state_logits.shape != expect:
            raise ValueError("state_logits shape %s != %s" % (self.state_logits.shape, expect))
        if self.rule_logits.shape != (self.num_states, len(self.rules)):
            raise ValueError("rule_logits shape mismatch")
        self._log_expansion: np.ndarray | None = None

    @property
    def num_contexts(self) -> int:
        return len(self._ctx_id)

    @property
    def param_count(self) -> int:
        return self.num_contexts * self.num_states + self.num_states * len(self.rules)

    def rule_id(self, rule: Rule) -> int:
        try:
            return self._rule_id[rule]
        except KeyError:
            raise ModelLookupError("rule not in grammar: %s" % format_rule(rule))

    def context_id(self, parent: Rule | None, index: int = 0) -> int:
        key = ROOT if parent is None else (parent, index)
        try:
            return self._ctx_id[key]
        except KeyError:
            raise ModelLookupError("unknown expansion context %r" % (key,))

    def log_expansion_matrix(self) -> np.ndarray:
        """(contexts, rules) matrix of log p(r | ctx); rows normalize to 1."""
        if self._log_expansion is None:
            log_a = _log_softmax(self.state_logits)
            log_b = _log_softmax(self.rule_logits)
            self._log_expansion = _log_matmul(log_a, log_b)
        return self._log_expansion

    def copy_with(self, state_logits=None, rule_logits=None) -> "ModelParams":
        return ModelParams(
            self.num_states,
            self.rules,
            self.state_logits if state_logits is None else np.asarray(state_logits, float),
            self.rule_logits if rule_logits is None else np.asarray(rule_logits, float),
            self.fingerprint,
        )


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_matmul(log_a: np.ndarray, log_b: np.ndarray) -> np.ndarray:
    # logsumexp_s(log_a[c,s] + log_b[s,r]) without materializing huge temps
    out = np.empty((log_a.shape[0], log_b.shape[1]))
    chunk = max(1, int(5e6) // max(1, log_a.shape[1] * log_b.shape[1]))
    for lo in range(0, log_a.shape[0], chunk):
        hi = min(lo + chunk, log_a.shape[0])
        t = log_a[lo:hi, :, None] + log_b[None, :, :]
        m = t.max(axis=1)
        out[lo:hi] = m + np.log(np.exp(t - m[:, None, :]).sum(axis=1))
    return out


def init_params(grammar: Grammar, num_states: int, rng_seed: int = 0) -> ModelParams:
    """Zero-mean gaussian logits; identical seeds give identical tables."""
    if num_states < 1:
        raise ValueError("num_states must be >= 1")
    n_ctx = 1 + sum(r.arity for r in grammar.rules)
    rng = np.random.default_rng(rng_seed)
    return ModelParams(
        num_states=num_states,
        rules=grammar.rules,
        state_logits=rng.normal(0.0, INIT_SCALE, size=(n_ctx, num_states)),
        rule_logits=rng.normal(0.0, INIT_SCALE, size=(num_states, len(grammar.rules))),
        fingerprint=grammar_fingerprint(grammar),
    )


def expansion_prob(params: ModelParams, rule: Rule, parent: Rule | None, index: int = 0) -> float:
    logp = params.log_expansion_matrix()
    return float(math.exp(logp[params.context_id(parent, index), params.rule_id(rule)]))


def derivation_logprob(params: ModelParams, z: Derivation) -> float:
    logp = params.log_expansion_matrix()
    total = 0.0
    for node, parent, idx in z.walk():
        ctx = params.context_id(None if parent is None else parent.root_rule, idx)
        total += logp[ctx, params.rule_id(node.root_rule)]
    return float(total)


# -- forest graphs -----------------------------------------------------------


@dataclass
class ForestGraph:
    """A forest expanded over expansion contexts: node = (chart item, ctx)."""

    edges: list  # per node: list of (ctx_id, rule_id, tuple(child node ids))
    roots: list
    n_nodes: int


def compile_forest(forest: DerivationForest, params: ModelParams) -> ForestGraph:
    node_id: dict = {}
    edges: list = []
    # Postorder construction; every (item, ctx) node is created after its
    # children so ids are already topologically sorted.
    stack = [(key, 0, False) for key in forest.roots]
    while stack:
        key, ctx, done = stack.pop()
        if (key, ctx) in node_id:
            continue
        if not done:
            stack.append((key, ctx, True))
            for edge in forest.nodes[key]:
                rid = params.rule_id(edge.rule)
                for t, child in enumerate(edge.children):
                    child_ctx = params.context_id(edge.rule, t + 1)
                    if (child, child_ctx) not in node_id:
                        stack.append((child, child_ctx, False))
            continue
        my_edges = []
        for edge in forest.nodes[key]:
            rid = params.rule_id(edge.rule)
            children = tuple(
                node_id[(child, params.context_id(edge.rule, t + 1))]
                for t, child in enumerate(edge.children)
            )
            my_edges.append((ctx, rid, children))
        node_id[(key, ctx)] = len(edges)
        edges.append(my_edges)
    roots = [node_id[(key, 0)] for key in forest.roots]
    return ForestGraph(edges=edges, roots=roots, n_nodes=len(edges))


def _logsumexp_list(vals: list[float]) -> float:
    m = max(vals)
    if m == -math.inf:
        return m
    return m + math.log(sum(math.exp(v - m) for v in vals))


def inside_logprob(graph: ForestGraph, log_expansion: np.ndarray) -> float:
    vals = [0.0] * graph.n_nodes
    for nid in range(graph.n_nodes):
        acc = []
        for ctx, rid, children in graph.edges[nid]:
            term = log_expansion[ctx, rid]
            for ch in children:
                term += vals[ch]
            acc.append(term)
        vals[nid] = _logsumexp_list(acc)
    return _logsumexp_list([vals[r] for r in graph.roots])


def viterbi_logprob(graph: ForestGraph, log_expansion: np.ndarray):
    """Returns (best log-probability, best edge choice per node)."""
    vals = [0.0] * graph.n_nodes
    best: list = [None] * graph.n_nodes
    for nid in range(graph.n_nodes):
        top = -math.inf
        arg = None
        for e, (ctx, rid, children) in enumerate(graph.edges[nid]):
            term = log_expansion[ctx, rid]
            for ch in children:
                term += vals[ch]
            if term > top:
                top = term
                arg = e
        vals[nid] = top
        best[nid] = arg
    root = max(graph.roots, key=lambda r: vals[r])
    return vals[root], root, best


def _extract_best(graph: ForestGraph, params: ModelParams, root: int, best: list) -> Derivation:
    def build(nid: int) -> Derivation:
        ctx, rid, children = graph.edges[nid][best[nid]]
        return Derivation(params.rules[rid], tuple(build(c) for c in children))

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 10000))
    try:
        return build(root)
    finally:
        sys.setrecursionlimit(old)


# -- likelihoods -------------------------------------------------------------


def joint_loglik(
    params: ModelParams,
    grammar: Grammar,
    pair: ExamplePair,
    parser: Parser | None = None,
) -> float:
    """log sum over all derivations of the pair; -inf when not derivable."""
    parser = parser or Parser(grammar)
    forest = parser.parse_pair(pair)
    if forest is None:
        return -math.inf
    graph = compile_forest(forest, params)
    return inside_logprob(graph, params.log_expansion_matrix())


def conditional_loglik(
    params: ModelParams,
    grammar: Grammar,
    pair: ExamplePair,
    parser: Parser | None = None,
) -> float:
    parser = parser or Parser(grammar)
    input_forest = parser.parse_input(pair.x)
    if input_forest is None:
        raise UndefinedConditionalError("input not derivable: %s" % " ".join(pair.x))
    logp = params.log_expansion_matrix()
    marginal = inside_logprob(compile_forest(input_forest, params), logp)
    joint = joint_loglik(params, grammar, pair, parser=parser)
    return joint - marginal


def viterbi_parse(
    params: ModelParams,
    grammar: Grammar,
    x,
    output_cfg: OutputCfg | None = None,
    parser: Parser | None = None,
) -> Optional[tuple[tuple[str, ...], Derivation]]:
    """Highest-probability derivation of x; None means abstain."""
    parser = parser or Parser(grammar)
    forest = parser.parse_input(tuple(x))
    if forest is None:
        return None
    graph = compile_forest(forest, params)
    _, root, best = viterbi_logprob(graph, params.log_expansion_matrix())
    z = _extract_best(graph, params, root, best)
    y = derivation_yield(z).y
    if output_cfg is not None and not cfg_accepts(output_cfg, y):
        return None
    return y, z


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    steps: int = 1500
    batch_size: int = 128
    optimizer: str = "adam"
    batch_restricted_normalization: bool = False
    rng_seed: int = 0


@dataclass
class FitResult:
    params: ModelParams
    skipped_examples: int
    loglik_trace: list = field(default_factory=list)  # (step, mean batch loglik)


def fit(
    grammar: Grammar,
    corpus: Corpus,
    num_states: int,
    train_cfg: TrainConfig,
    parser: Parser | None = None,
    init: ModelParams | None = None,
    forests: dict | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> FitResult:
    """Maximize sum of joint log-likelihood over minibatches with Adam.

    Non-derivable examples are skipped and counted. `forests` may carry
    pre-parsed DerivationForest objects keyed by ExamplePair.
    """
    import torch

    torch.set_num_threads(1)
    parser = parser or Parser(grammar)
    params = init if init is not None else init_params(grammar, num_states, train_cfg.rng_seed)

    graph_cache: dict[ExamplePair, ForestGraph | None] = {}
    corpus_graph_ids: list[int] = []
    graphs: list[ForestGraph] = []
    ids_by_pair: dict[ExamplePair, int] = {}
    skipped = 0
    for pair in corpus:
        if pair not in graph_cache:
            forest = (forests or {}).get(pair)
            if forest is None:
                forest = parser.parse_pair(pair)
            graph_cache[pair] = compile_forest(forest, params) if forest is not None else None
        graph = graph_cache[pair]
        if graph is None:
            skipped += 1
            continue
        if pair not in ids_by_pair:
            ids_by_pair[pair] = len(graphs)
            graphs.append(graph)
        corpus_graph_ids.append(ids_by_pair[pair])

    result = FitResult(params=params, skipped_examples=skipped)
    if train_cfg.steps <= 0 or not corpus_graph_ids:
        return result

    rng = np.random.default_rng(train_cfg.rng_seed)
    order = np.array(corpus_graph_ids)
    rng.shuffle(order)
    size = max(1, train_cfg.batch_size)
    batches = [
        _merge_graphs([graphs[g] for g in order[lo : lo + size]])
        for lo in range(0, len(order), size)
    ]

    thc = torch.tensor(params.state_logits, dtype=torch.float64, requires_grad=True)
    the = torch.tensor(params.rule_logits, dtype=torch.float64, requires_grad=True)
    if train_cfg.optimizer != "adam":
        raise ValueError("unsupported optimizer %r" % train_cfg.optimizer)
    opt = torch.optim.Adam([thc, the], lr=train_cfg.learning_rate)

    for step in range(train_cfg.steps):
        batch = batches[step % len(batches)]
        opt.zero_grad()
        ll = _batch_loglik_torch(
            batch, thc, the, train_cfg.batch_restricted_normalization
        )
        loss = -ll / batch["n_roots"]
        loss.backward()
        opt.step()
        mean_ll = float(-loss.detach())
        if step % 50 == 0 or step == train_cfg.steps - 1:
            result.loglik_trace.append((step, mean_ll))
            if progress:
                progress(step, mean_ll)

    result.params = params.copy_with(
        state_logits=thc.detach().numpy().copy(), rule_logits=the.detach().numpy().copy()
    )
    return result


def fit_with_restarts(
    grammar: Grammar,
    corpus: Corpus,
    num_states: int,
    train_cfg: TrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    parser: Parser | None = None,
    eval_size: int = 512,
) -> FitResult:
    """Fit once per seed and keep the run with the best mean joint likelihood
    on a deterministic subsample of unique derivable examples.

    The likelihood surface is non-convex in the latent states and individual
    runs can stall in scope-ambiguous optima; a few restarts with data-driven
    selection mirror the usual small-grid tuning loop.
    """
    parser = parser or Parser(grammar)
    forests: dict[ExamplePair, DerivationForest] = {}
    unique: list[ExamplePair] = []
    for pair in corpus:
        if pair not in forests:
            forest = parser.parse_pair(pair)
            if forest is not None:
                forests[pair] = forest
                unique.append(pair)
    probe = unique[:eval_size]
    best: FitResult | None = None
    best_score = -math.inf
    for seed in seeds:
        cfg = replace(train_cfg, rng_seed=seed)
        result = fit(grammar, corpus, num_states, cfg, parser=parser, forests=forests)
        logp = result.params.log_expansion_matrix()
        score = sum(
            inside_logprob(compile_forest(forests[p], result.params), logp) for p in probe
        ) / max(len(probe), 1)
        if score > best_score:
            best, best_score = result, score
    return best


def _merge_graphs(graphs: list[ForestGraph]) -> dict:
    """Flatten a list of forest graphs into level-ordered numpy arrays."""
    levels: list[int] = []
    new_id: list[int] = []
    offset = 0
    per_node = []  # (level, global old id)
    all_edges = []
    roots = []
    for g in graphs:
        local_level = [0] * g.n_nodes
        for nid in range(g.n_nodes):
            lv = 0
            for _, _, children in g.edges[nid]:
                for ch in children:
                    lv = max(lv, local_level[ch] + 1)
            local_level[nid] = lv
        for nid in range(g.n_nodes):
            per_node.append((local_level[nid], offset + nid))
        all_edges.extend(
            [
                (ctx, rid, tuple(offset + c for c in children))
                for (ctx, rid, children) in g.edges[nid]
            ]
            for nid in range(g.n_nodes)
        )
        roots.extend(offset + r for r in g.roots)
        offset += g.n_nodes

    order = sorted(range(len(per_node)), key=lambda i: per_node[i])
    rank = [0] * len(order)
    for pos, old in enumerate(order):
        rank[per_node[old][1]] = pos
    # regroup edges by level
    max_level = per_node[order[-1]][0] if order else 0
    level_arrays = []
    pos = 0
    for lv in range(max_level + 1):
        eown, ectx, erule, echild, echild_edge = [], [], [], [], []
        n_level = 0
        while pos < len(order) and per_node[order[pos]][0] == lv:
            old_global = per_node[order[pos]][1]
            local = n_level
            for ctx, rid, children in all_edges[old_global]:
                eidx = len(ectx)
                eown.append(local)
                ectx.append(ctx)
                erule.append(rid)
                for ch in children:
                    echild.append(rank[ch])
                    echild_edge.append(eidx)
            n_level += 1
            pos += 1
        level_arrays.append(
            {
                "n_nodes": n_level,
                "owner": np.asarray(eown, dtype=np.int64),
                "ctx": np.asarray(ectx, dtype=np.int64),
                "rule": np.asarray(erule, dtype=np.int64),
                "child": np.asarray(echild, dtype=np.int64),
                "child_edge": np.asarray(echild_edge, dtype=np.int64),
            }
        )
    rule_ids = sorted({r for east in all_edges for (_, r, _) in east})
    return {
        "levels": level_arrays,
        "roots": np.asarray([rank[r] for r in roots], dtype=np.int64),
        "n_roots": len(roots),
        "rule_ids": np.asarray(rule_ids, dtype=np.int64),
    }


def _batch_loglik_torch(batch, thc, the, batch_restricted: bool):
    import warnings

    import torch

    warnings.filterwarnings("ignore", message="index_reduce")

    log_a = torch.log_softmax(thc, dim=1)
    if batch_restricted:
        rule_ids = torch.from_numpy(batch["rule_ids"])
        sub = the.index_select(1, rule_ids)
        log_b = sub - torch.logsumexp(sub, dim=1, keepdim=True)
        remap = {int(r): i for i, r in enumerate(batch["rule_ids"])}
    else:
        log_b = torch.log_softmax(the, dim=1)
        remap = None
    log_p = torch.logsumexp(log_a.unsqueeze(2) + log_b.unsqueeze(0), dim=1)
    n_rules = log_p.shape[1]
    flat = log_p.reshape(-1)

    vals = None
    for level in batch["levels"]:
        owner = torch.from_numpy(level["owner"])
        ctx = torch.from_numpy(level["ctx"])
        rule = torch.from_numpy(level["rule"])
        if remap is not None:
            rule = torch.tensor(
                [remap[int(r)] for r in level["rule"]], dtype=torch.int64
            )
        term = flat.index_select(0, ctx * n_rules + rule)
        if len(level["child"]):
            child_vals = vals.index_select(0, torch.from_numpy(level["child"]))
            sums = torch.zeros(len(level["owner"]), dtype=torch.float64).index_add(
                0, torch.from_numpy(level["child_edge"]), child_vals
            )
            term = term + sums
        m = torch.full((level["n_nodes"],), -math.inf, dtype=torch.float64)
        m = m.index_reduce(0, owner, term.detach(), "amax", include_self=True)
        sums = torch.zeros(level["n_nodes"], dtype=torch.float64).index_add(
            0, owner, torch.exp(term - m.index_select(0, owner))
        )
        level_vals = m + torch.log(sums)
        vals = level_vals if vals is None else torch.cat([vals, level_vals])
    return vals.index_select(0, torch.from_numpy(batch["roots"])).sum()


def loglik_gradients(params: ModelParams, graph: ForestGraph):
    """Log-likelihood of one forest graph and its gradients w.r.t. both logit
    tables, via autodiff; used by the finite-difference checks."""
    import torch

    thc = torch.tensor(params.state_logits, dtype=torch.float64, requires_grad=True)
    the = torch.tensor(params.rule_logits, dtype=torch.float64, requires_grad=True)
    batch = _merge_graphs([graph])
    ll = _batch_loglik_torch(batch, thc, the, False)
    ll.backward()
    return float(ll.detach()), thc.grad.numpy().copy(), the.grad.numpy().copy()
