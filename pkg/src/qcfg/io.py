"""File codecs: TSV corpora, grammar text, output CFGs, params JSON, JSONL logs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .cfg import OutputCfg, format_output_cfg, parse_output_cfg
from .grammar import (
    Corpus,
    ExamplePair,
    Grammar,
    GrammarError,
    format_rule,
    parse_rule,
)
from .model import ModelParams, grammar_fingerprint

PARAMS_FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed input file; message names the file and line."""


def load_corpus(path: str | Path, name: str | None = None) -> Corpus:
    path = Path(path)
    examples = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    "%s:%d: expected 2 tab-separated fields, got %d"
                    % (path, lineno, len(parts))
                )
            x, y = parts
            if not x.split() or not y.split():
                raise DataError("%s:%d: empty input or output field" % (path, lineno))
            examples.append(ExamplePair(tuple(x.split()), tuple(y.split())))
    return Corpus(tuple(examples), name=name if name is not None else path.stem)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for ex in corpus:
            handle.write("%s\t%s\n" % (" ".join(ex.x), " ".join(ex.y)))


def load_grammar(
    path: str | Path, max_nonterminals: int = 4, allow_repeated_indices: bool = True
) -> Grammar:
    path = Path(path)
    rules = []
    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rules.append(parse_rule(line))
            except GrammarError as err:
                raise DataError("%s:%d: %s" % (path, lineno, err)) from err
    try:
        return Grammar(tuple(rules), max_nonterminals, allow_repeated_indices)
    except GrammarError as err:
        raise DataError("%s: %s" % (path, err)) from err


def save_grammar(grammar: Grammar, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for rule in grammar.rules:
            handle.write(format_rule(rule) + "\n")


def load_output_cfg(path: str | Path) -> OutputCfg:
    path = Path(path)
    try:
        return parse_output_cfg(path.read_text(encoding="utf-8"))
    except ValueError as err:
        raise DataError("%s: %s" % (path, err)) from err


def save_output_cfg(cfg: OutputCfg, path: str | Path) -> None:
    Path(path).write_text(format_output_cfg(cfg), encoding="utf-8")


def save_params(params: ModelParams, path: str | Path) -> None:
    payload = {
        "format_version": PARAMS_FORMAT_VERSION,
        "num_states": params.num_states,
        "grammar_fingerprint": params.fingerprint,
        "rules": [format_rule(r) for r in params.rules],
        "state_logits": params.state_logits.tolist(),
        "rule_logits": params.rule_logits.tolist(),
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_params(path: str | Path, grammar: Grammar | None = None) -> ModelParams:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataError("%s: %s" % (path, err)) from err
    if payload.get("format_version") != PARAMS_FORMAT_VERSION:
        raise DataError(
            "%s: unsupported params format %r" % (path, payload.get("format_version"))
        )
    rules = tuple(parse_rule(line) for line in payload["rules"])
    params = ModelParams(
        num_states=int(payload["num_states"]),
        rules=rules,
        state_logits=np.asarray(payload["state_logits"], dtype=float),
        rule_logits=np.asarray(payload["rule_logits"], dtype=float),
        fingerprint=payload["grammar_fingerprint"],
    )
    if grammar is not None and grammar_fingerprint(grammar) != params.fingerprint:
        raise DataError("%s: params were fitted to a different grammar" % path)
    return params


def write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


class JsonlWriter:
    def __init__(self, path: str | Path):
        self._handle = Path(path).open("w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
