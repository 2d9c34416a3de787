"""Decoding: top-k length search with argmax or grammar-constrained output.

The model scores a candidate as log P(length | source) plus the summed
log probabilities of the chosen tokens.  Plain decoding takes the
per-position argmax; grammar-constrained decoding replaces it with a
Viterbi CYK pass that only considers strings the grammar derives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .grammar import Grammar
from .model import Model


class InferenceError(RuntimeError):
    """No decodable candidate (no feasible length, or no parse)."""


class NoParseError(InferenceError):
    """The grammar derives no string of the requested length."""


@dataclass
class DecodeResult:
    tokens: list[int]
    length: int
    log_score: float
    distributions: np.ndarray | None = None


def top_lengths(length_probs: np.ndarray, k: int) -> list[int]:
    """The k most probable feasible lengths, ties toward the smaller one.

    Length 0 is never a candidate.
    """
    probs = np.asarray(length_probs)
    lengths = np.arange(1, probs.shape[0])
    mass = probs[1:]
    keep = mass > 0
    lengths, mass = lengths[keep], mass[keep]
    order = np.argsort(-mass, kind="stable")
    return [int(v) for v in lengths[order][:k]]


def predict(model: Model, source_ids, k: int = 1) -> DecodeResult:
    """Best (length, argmax string) among the top-k candidate lengths."""
    if k < 1:
        raise ad.UsageError("k must be at least 1")
    if model.config.decoder == "autoregressive":
        raise ad.UsageError("use predict_autoregressive for this decoder")
    with ad.no_grad():
        prep = model.prepare(source_ids)
        lengths = top_lengths(prep.length_probs.value, k)
        if not lengths:
            raise InferenceError("no feasible output length for this source")
        best = None
        for length in lengths:
            out = model.complete(prep, length)
            probs = out.probs.value
            ys = np.argmax(probs, axis=1)
            with np.errstate(divide="ignore"):
                score = float(out.log_length.value
                              + np.log(probs[np.arange(length), ys]).sum())
            if best is None or score > best.log_score:
                best = DecodeResult([int(y) for y in ys], length, score, probs)
        return best


def viterbi_cyk(distributions: np.ndarray, alphabet: Sequence[str],
                grammar: Grammar) -> tuple[list[str], float]:
    """Highest-probability grammatical string under per-position scores.

    distributions holds one probability row per output position over the
    alphabet columns.  Binary rules carry weight one; only lexical
    choices are scored.  Raises NoParseError when the start symbol does
    not derive a string of this length.
    """
    dist = np.asarray(distributions)
    length = dist.shape[0]
    with np.errstate(divide="ignore"):
        logd = np.log(dist)
    col = {tok: idx for idx, tok in enumerate(alphabet)}
    chart: dict[str, np.ndarray] = {
        a: np.full((length, length), -np.inf) for a in grammar.nonterminals}
    back: dict = {}
    for a, term in grammar.lexical:
        idx = col.get(term)
        if idx is None:
            continue
        row = chart[a]
        for i in range(length):
            if logd[i, idx] > row[i, i]:
                row[i, i] = logd[i, idx]
                back[(a, i, i)] = ("lex", term)
    for width in range(2, length + 1):
        for i in range(length - width + 1):
            j = i + width - 1
            for a, b, c in grammar.binary:
                left, right = chart[b], chart[c]
                for s in range(i, j):
                    v = left[i, s] + right[s + 1, j]
                    if v > chart[a][i, j]:
                        chart[a][i, j] = v
                        back[(a, i, j)] = ("bin", b, c, s)
    score = chart[grammar.start][0, length - 1]
    if score == -np.inf:
        raise NoParseError(f"no parse at length {length}")

    def rebuild(a: str, i: int, j: int) -> list[str]:
        entry = back[(a, i, j)]
        if entry[0] == "lex":
            return [entry[1]]
        _, b, c, s = entry
        return rebuild(b, i, s) + rebuild(c, s + 1, j)

    return rebuild(grammar.start, 0, length - 1), float(score)


def predict_grammar(model: Model, source_ids, grammar: Grammar,
                    target_vocab, k: int = 5) -> DecodeResult:
    """Like predict, but every candidate string comes from viterbi_cyk.

    target_vocab maps the model's output columns to terminal strings
    (a data.Vocabulary).  Candidate lengths with no parse are skipped.
    """
    if k < 1:
        raise ad.UsageError("k must be at least 1")
    if model.config.decoder == "autoregressive":
        raise ad.UsageError("grammar decoding needs a position-independent decoder")
    with ad.no_grad():
        prep = model.prepare(source_ids)
        lengths = top_lengths(prep.length_probs.value, k)
        if not lengths:
            raise InferenceError("no feasible output length for this source")
        best = None
        attempted = []
        for length in lengths:
            out = model.complete(prep, length)
            probs = out.probs.value
            try:
                tokens, lex_score = viterbi_cyk(probs, target_vocab.id_to_token,
                                                grammar)
            except NoParseError:
                attempted.append(length)
                continue
            score = float(out.log_length.value + lex_score)
            if best is None or score > best.log_score:
                ids = [int(i) for i in target_vocab.encode(tokens)]
                best = DecodeResult(ids, length, score, probs)
        if best is None:
            raise InferenceError(
                f"no parse at any candidate length; attempted {attempted}")
        return best


def predict_autoregressive(model: Model, source_ids, k: int = 1) -> DecodeResult:
    """Greedy left-to-right decoding per candidate length."""
    if k < 1:
        raise ad.UsageError("k must be at least 1")
    if model.config.decoder != "autoregressive":
        raise ad.UsageError("model does not use the autoregressive decoder")
    with ad.no_grad():
        prep = model.prepare(source_ids)
        lengths = top_lengths(prep.length_probs.value, k)
        if not lengths:
            raise InferenceError("no feasible output length for this source")
        best = None
        for length in lengths:
            ys: list[int] = []
            for pos in range(length):
                padded = np.array(ys + [0] * (length - pos), dtype=np.intp)
                out = model.complete(prep, length, padded)
                ys.append(int(np.argmax(out.probs.value[pos])))
            final = model.complete(prep, length, np.array(ys, dtype=np.intp))
            probs = final.probs.value
            with np.errstate(divide="ignore"):
                score = float(final.log_length.value
                              + np.log(probs[np.arange(length), ys]).sum())
            if best is None or score > best.log_score:
                best = DecodeResult(ys, length, score, probs)
        return best


def decode(model: Model, source_ids, k: int | None = None,
           grammar: Grammar | None = None, target_vocab=None) -> DecodeResult:
    """Dispatch to the right decoding routine for this model."""
    if grammar is not None:
        if target_vocab is None:
            raise ad.UsageError("grammar decoding needs the target vocabulary")
        return predict_grammar(model, source_ids, grammar, target_vocab,
                               5 if k is None else k)
    if model.config.decoder == "autoregressive":
        return predict_autoregressive(model, source_ids, 1 if k is None else k)
    return predict(model, source_ids, 1 if k is None else k)
