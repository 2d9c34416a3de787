"""Transduction model with latent fertility and latent reordering.

The forward pass factors the map from a source sequence to per-position
output distributions through two marginalized discrete structures: a
fertility assignment (how many copies each source token contributes) and
a binary-tree reordering of those copies.  Both structures are summed out
exactly by dynamic programs, so the decoder sees dense mixture weights
and the whole pipeline stays differentiable.

Two composition orders are supported.  In the fertility-first order the
fertility marginal builds an expected intermediate sequence whose rows
are reordered; in the reorder-first order the source itself is softly
permuted and fertility applies to the permuted rows.  The decoder mixes
per-(source token, copy slot) output distributions with the joint
structure weights either way.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import fertility
from . import reordering
from .autodiff import Node, ParameterStore

COMPOSITION_ORDERS = ("fertility-first", "reorder-first")
DECODERS = ("independent", "copy", "autoregressive")

INIT_SCALE = 0.1


@dataclass
class ModelConfig:
    """Sizes and switches for every layer of the model."""

    source_vocab: int
    target_vocab: int
    embedding_dim: int = 32
    fertility_hidden: int = 32
    reorder_hidden: int = 48
    context_hidden: int = 32
    fertility_mlp: int = 32
    span_mlp: int = 48
    output_mlp: int = 48
    max_fertility: int = 4
    temperature: float = 1.0
    skip_scale: float = 1.0
    composition: str = "fertility-first"
    decoder: str = "independent"
    decoder_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("source_vocab", "target_vocab", "embedding_dim",
                     "fertility_hidden", "reorder_hidden", "context_hidden",
                     "fertility_mlp", "span_mlp", "output_mlp",
                     "max_fertility", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.composition not in COMPOSITION_ORDERS:
            raise ValueError(f"composition must be one of {COMPOSITION_ORDERS}")
        if self.decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return config_from_dict(cls, raw)


def config_from_dict(cls, raw: dict):
    """Build a config dataclass, rejecting unknown keys loudly."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**raw)


@dataclass
class EncodedInput:
    """Source-side tensors shared by every decoder variant."""

    source_ids: np.ndarray
    embeddings: Node       # x, one row per source token
    fertility_states: Node  # BiLSTM features feeding the fertility head
    context: Node          # h', the rows the decoder conditions on


@dataclass
class IntermediateSequence:
    """Expected copy sequence under the fertility marginal."""

    values: Node  # (length, embedding_dim)
    slots: Node   # (max_fertility, embedding_dim) copy-slot embeddings


@dataclass
class Prepared:
    """Length-independent forward state, reused across candidate lengths."""

    encoded: EncodedInput
    fertility: fertility.FertilityTable
    permutation: reordering.MarginalPermutation | None  # reorder-first only
    span_scores: reordering.SpanScores | None
    length_probs: Node


@dataclass
class TransductionOutput:
    """Everything the loss and the diagnostics need for one example."""

    encoded: EncodedInput
    fertility: fertility.FertilityTable
    marginal: fertility.MarginalFertility
    span_scores: reordering.SpanScores
    permutation: reordering.MarginalPermutation
    mixing: Node      # (d*n, length) joint structure weights, slot-major
    token_probs: Node
    probs: Node       # (length, target_vocab); rows sum to one
    log_length: Node  # scalar log P(length | source)


class Model:
    """Parameter container plus the differentiable forward pipeline."""

    def __init__(self, config: ModelConfig, copy_ids: np.ndarray | None = None):
        self.config = config
        if config.decoder == "copy":
            if copy_ids is None:
                raise ValueError("copy decoder requires a source-to-target id map")
            copy_ids = np.asarray(copy_ids, dtype=np.intp)
            if copy_ids.shape != (config.source_vocab,):
                raise ValueError("copy id map must cover the whole source vocabulary")
            if copy_ids.min() < 0 or copy_ids.max() >= config.target_vocab:
                raise ValueError("copy id map points outside the target vocabulary")
        self.copy_ids = copy_ids
        self.store = ParameterStore()
        self._rng = np.random.default_rng(config.seed)
        self._build()

    # -- parameter layout ---------------------------------------------------

    def _weight(self, name: str, shape: tuple) -> None:
        self.store.add(name, self._rng.uniform(-INIT_SCALE, INIT_SCALE, shape))

    def _bias(self, name: str, shape: tuple) -> None:
        self.store.add(name, np.zeros(shape))

    def _build(self) -> None:
        cfg = self.config
        e = cfg.embedding_dim
        self._weight("emb_src", (cfg.source_vocab, e))
        self._weight("slot_emb", (cfg.max_fertility, e))
        for tag, hidden in (("fert", cfg.fertility_hidden),
                            ("reorder", cfg.reorder_hidden),
                            ("ctx", cfg.context_hidden)):
            for direction in ("fw", "bw"):
                self._weight(f"{tag}.{direction}.W", (4 * hidden, e + hidden))
                self._bias(f"{tag}.{direction}.b", (4 * hidden,))
        if 2 * cfg.context_hidden != e:
            self._weight("ctx.proj", (e, 2 * cfg.context_hidden))
        self._weight("fert.mlp.W1", (cfg.fertility_mlp, 2 * cfg.fertility_hidden))
        self._bias("fert.mlp.b1", (cfg.fertility_mlp,))
        self._weight("fert.mlp.W2", (cfg.max_fertility + 1, cfg.fertility_mlp))
        self._bias("fert.mlp.b2", (cfg.max_fertility + 1,))
        self._weight("span.mlp.W1", (cfg.span_mlp, 2 * cfg.reorder_hidden))
        self._bias("span.mlp.b1", (cfg.span_mlp,))
        self._weight("span.mlp.W2", (2, cfg.span_mlp))
        self._bias("span.mlp.b2", (2,))
        self._weight("out.mlp.W1", (cfg.output_mlp, e))
        self._bias("out.mlp.b1", (cfg.output_mlp,))
        self._weight("out.proj", (cfg.max_fertility, cfg.target_vocab, cfg.output_mlp))
        if cfg.decoder == "copy":
            self._weight("copy.gate.w", (cfg.output_mlp,))
            self._bias("copy.gate.b", (cfg.max_fertility,))
        if cfg.decoder == "autoregressive":
            self._weight("emb_tgt", (cfg.target_vocab, e))
            self._weight("ar.W", (4 * cfg.decoder_hidden, e + cfg.decoder_hidden))
            self._bias("ar.b", (4 * cfg.decoder_hidden,))
            if cfg.decoder_hidden != e:
                self._weight("ar.proj", (e, cfg.decoder_hidden))

    # -- recurrent encoders -------------------------------------------------

    def _lstm(self, prefix: str, inputs: Node) -> Node:
        """States (T, H) of one LSTM direction over the rows of inputs."""
        w = self.store[prefix + ".W"]
        b = self.store[prefix + ".b"]
        hidden = w.value.shape[0] // 4
        in_dim = w.value.shape[1] - hidden
        wx = ad.slice_(w, (slice(None), slice(0, in_dim)))
        wh = ad.slice_(w, (slice(None), slice(in_dim, None)))
        # input contributions for every step at once
        zx = ad.matmul(inputs, ad.transpose(wx)) + b
        h = ad.constant(np.zeros(hidden))
        c = ad.constant(np.zeros(hidden))
        states = []
        for t in range(inputs.shape[0]):
            z = ad.slice_(zx, t) + ad.matmul(wh, h)
            packed = ad.lstm_cell(z, c)
            h = ad.slice_(packed, slice(0, hidden))
            c = ad.slice_(packed, slice(hidden, None))
            states.append(h)
        return ad.stack(states, axis=0)

    def _bilstm(self, tag: str, inputs: Node) -> tuple[Node, Node, Node]:
        """Per-row [fwd; bwd] states plus fencepost stacks.

        ff[k] is the forward state after k rows and bb[k] the backward
        state covering rows k..T-1; ff[0] and bb[T] are zero.
        """
        hidden = self.store[tag + ".fw.W"].value.shape[0] // 4
        fwd = self._lstm(tag + ".fw", inputs)
        bwd = self._lstm(tag + ".bw", ad.slice_(inputs, slice(None, None, -1)))
        aligned = ad.slice_(bwd, slice(None, None, -1))
        states = ad.concat([fwd, aligned], axis=1)
        zero = ad.constant(np.zeros((1, hidden)))
        ff = ad.concat([zero, fwd], axis=0)
        bb = ad.concat([aligned, zero], axis=0)
        return states, ff, bb

    def _mlp(self, prefix: str, inp: Node) -> Node:
        hid = ad.tanh(ad.matmul(inp, ad.transpose(self.store[prefix + ".W1"]))
                      + self.store[prefix + ".b1"])
        return ad.matmul(hid, ad.transpose(self.store[prefix + ".W2"])) \
            + self.store[prefix + ".b2"]

    def _decoder_features(self, inp: Node) -> Node:
        return ad.tanh(ad.matmul(inp, ad.transpose(self.store["out.mlp.W1"]))
                       + self.store["out.mlp.b1"])

    # -- pipeline stages ----------------------------------------------------

    def encode(self, source_ids: Sequence[int]) -> EncodedInput:
        cfg = self.config
        ids = np.asarray(source_ids, dtype=np.intp)
        if ids.ndim != 1 or ids.size == 0:
            raise ad.UsageError("encode expects a non-empty 1-D token id sequence")
        if ids.min() < 0 or ids.max() >= cfg.source_vocab:
            raise ad.DomainError(
                f"source token id outside the vocabulary of size {cfg.source_vocab}")
        x = ad.gather(self.store["emb_src"], ids)
        fert_states, _, _ = self._bilstm("fert", x)
        if cfg.skip_scale == 0.0:
            context = x
        else:
            ctx_states, _, _ = self._bilstm("ctx", x)
            if "ctx.proj" in self.store:
                ctx_states = ad.matmul(ctx_states, ad.transpose(self.store["ctx.proj"]))
            context = ctx_states * cfg.skip_scale + x
        return EncodedInput(ids, x, fert_states, context)

    def fertility_head(self, states: Node) -> fertility.FertilityTable:
        logits = self._mlp("fert.mlp", states)
        return fertility.FertilityTable(
            ad.softmax(logits, tau=self.config.temperature, axis=-1))

    def compose_intermediate(self, enc: EncodedInput,
                             marg: fertility.MarginalFertility) -> IntermediateSequence:
        """Expected copy row j is sum_{i,u} F[i,j,u] (x_i + w_u)."""
        n = enc.source_ids.shape[0]
        d = self.config.max_fertility
        slots = self.store["slot_emb"]
        rep = np.repeat(np.arange(n), d)
        tile = np.tile(np.arange(d), n)
        pairs = ad.gather(enc.embeddings, rep) + ad.gather(slots, tile)
        weights = ad.reshape(ad.transpose(marg.tensor, (1, 0, 2)), (marg.length, n * d))
        return IntermediateSequence(ad.matmul(weights, pairs), slots)

    def reordering_scores(self, seq: Node) -> reordering.SpanScores:
        """Orientation scores for every span of the given sequence."""
        length = seq.shape[0]
        if length == 1:
            return reordering.SpanScores(1, ad.constant(np.zeros((0, 2))))
        _, ff, bb = self._bilstm("reorder", seq)
        span_list = reordering.spans(length)
        left = np.array([i for i, _ in span_list], dtype=np.intp)
        right = np.array([j for _, j in span_list], dtype=np.intp)
        fdiff = ad.gather(ff, right) - ad.gather(ff, left)
        bdiff = ad.gather(bb, left) - ad.gather(bb, right)
        feats = ad.concat([fdiff, bdiff], axis=1)
        return reordering.SpanScores(length, self._mlp("span.mlp", feats))

    def mixing_weights(self, marg: fertility.MarginalFertility,
                       perm_matrix: Node) -> Node:
        """Joint structure weights as a (d*n, length) matrix.

        Row u*n + j at column i is the probability that output position i
        realizes copy slot u of source token j.  Columns sum to one.
        """
        d = self.config.max_fertility
        length = marg.length
        if self.config.composition == "fertility-first":
            n = marg.tensor.shape[0]
            fm = ad.reshape(ad.transpose(marg.tensor, (2, 0, 1)), (d * n, length))
            return ad.matmul(fm, perm_matrix)
        # reorder-first: the permutation acts on source positions and the
        # fertility marginal is indexed by reordered positions
        n = perm_matrix.shape[0]
        t = ad.matmul(perm_matrix, ad.reshape(marg.tensor, (n, length * d)))
        t = ad.transpose(ad.reshape(t, (n, length, d)), (2, 0, 1))
        return ad.reshape(t, (d * n, length))

    def token_distributions(self, enc: EncodedInput,
                            ar_states: Node | None = None) -> Node:
        """Per-slot token distributions P(y | x_j, u).

        Returns (d, n, V) for the position-independent decoders, or
        (d, length, n, V) when autoregressive states are supplied.
        """
        cfg = self.config
        n = enc.source_ids.shape[0]
        inp = enc.context
        length = None
        if ar_states is not None:
            length = ar_states.shape[0]
            inp = ad.reshape(ad.reshape(enc.context, (1, n, cfg.embedding_dim))
                             + ad.reshape(ar_states, (length, 1, cfg.embedding_dim)),
                             (length * n, cfg.embedding_dim))
        feats = self._decoder_features(inp)
        out_proj = self.store["out.proj"]
        per_slot = []
        for u in range(cfg.max_fertility):
            logits = ad.matmul(feats, ad.transpose(ad.slice_(out_proj, u)))
            probs = ad.softmax(logits, axis=-1)
            if cfg.decoder == "copy":
                onehot = np.zeros((n, cfg.target_vocab))
                onehot[np.arange(n), self.copy_ids[enc.source_ids]] = 1.0
                gate = ad.sigmoid(ad.matmul(feats, self.store["copy.gate.w"])
                                  + ad.slice_(self.store["copy.gate.b"], u))
                gate = ad.reshape(gate, (n, 1))
                probs = gate * ad.constant(onehot) + (1.0 - gate) * probs
            per_slot.append(probs)
        stacked = ad.stack(per_slot, axis=0)
        if ar_states is not None:
            return ad.reshape(stacked, (cfg.max_fertility, length, n, cfg.target_vocab))
        return stacked

    def output_distributions(self, token_probs: Node, mixing: Node) -> Node:
        """Mix per-slot distributions into per-position output rows."""
        if token_probs.ndim == 3:
            d, n, vocab = token_probs.shape
            flat = ad.reshape(token_probs, (d * n, vocab))
            return ad.matmul(ad.transpose(mixing), flat)
        d, length, n, vocab = token_probs.shape
        a4 = ad.reshape(ad.transpose(ad.reshape(mixing, (d, n, length)), (0, 2, 1)),
                        (d, length, n, 1))
        return ad.sum_(ad.sum_(a4 * token_probs, axis=2), axis=0)

    def ar_context(self, target_ids: Sequence[int], length: int) -> Node:
        """Decoder states summarizing y_{<i}; position 0 gets the zero state."""
        cfg = self.config
        ids = np.asarray(target_ids, dtype=np.intp)
        if ids.ndim != 1 or ids.shape[0] != length:
            raise ad.UsageError("teacher forcing needs one target id per position")
        if ids.min() < 0 or ids.max() >= cfg.target_vocab:
            raise ad.DomainError(
                f"target token id outside the vocabulary of size {cfg.target_vocab}")
        zero = ad.constant(np.zeros((1, cfg.decoder_hidden)))
        if length == 1:
            states = zero
        else:
            emb = ad.gather(self.store["emb_tgt"], ids[:-1])
            states = ad.concat([zero, self._lstm("ar", emb)], axis=0)
        if "ar.proj" in self.store:
            states = ad.matmul(states, ad.transpose(self.store["ar.proj"]))
        return states

    # -- orchestration ------------------------------------------------------

    def prepare(self, source_ids: Sequence[int]) -> Prepared:
        """Run every length-independent stage once per source."""
        enc = self.encode(source_ids)
        if self.config.composition == "fertility-first":
            ft = self.fertility_head(enc.fertility_states)
            return Prepared(enc, ft, None, None, fertility.length_distribution(ft))
        ss = self.reordering_scores(enc.embeddings)
        perm = reordering.expected_permutation(ss)
        reordered = ad.matmul(ad.transpose(perm.matrix), enc.embeddings)
        states, _, _ = self._bilstm("fert", reordered)
        ft = self.fertility_head(states)
        return Prepared(enc, ft, perm, ss, fertility.length_distribution(ft))

    def complete(self, prep: Prepared, length: int,
                 target_ids: Sequence[int] | None = None) -> TransductionOutput:
        """Finish the forward pass for one candidate output length."""
        cfg = self.config
        marg = fertility.marginal_fertility(prep.fertility, length)
        log_len = fertility.log_length_probability(prep.fertility, length)
        if cfg.composition == "fertility-first":
            inter = self.compose_intermediate(prep.encoded, marg)
            ss = self.reordering_scores(inter.values)
            perm = reordering.expected_permutation(ss)
        else:
            ss = prep.span_scores
            perm = prep.permutation
        mixing = self.mixing_weights(marg, perm.matrix)
        ar_states = None
        if cfg.decoder == "autoregressive":
            if target_ids is None:
                raise ad.UsageError("autoregressive decoder needs target ids "
                                    "for teacher forcing")
            ar_states = self.ar_context(target_ids, length)
        token_probs = self.token_distributions(prep.encoded, ar_states)
        probs = self.output_distributions(token_probs, mixing)
        return TransductionOutput(prep.encoded, prep.fertility, marg, ss, perm,
                                  mixing, token_probs, probs, log_len)

    def transduce(self, source_ids: Sequence[int], length: int,
                  target_ids: Sequence[int] | None = None) -> TransductionOutput:
        return self.complete(self.prepare(source_ids), length, target_ids)

    def guidance_mass(self, out: TransductionOutput) -> Node:
        """Alignment mass (n, length): P(output position i came from token j)."""
        d = self.config.max_fertility
        n = out.encoded.source_ids.shape[0]
        return ad.sum_(ad.reshape(out.mixing, (d, n, out.marginal.length)), axis=0)


def load_text_embeddings(path, token_to_id: dict, matrix: np.ndarray) -> int:
    """Overwrite embedding rows from a text file of token then floats.

    Lines for tokens absent from the vocabulary are skipped; a dimension
    mismatch raises.  Returns the number of rows loaded.
    """
    loaded = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            idx = token_to_id.get(token)
            if idx is None:
                continue
            if len(values) != matrix.shape[1]:
                raise ValueError(f"line {lineno}: expected {matrix.shape[1]} "
                                 f"values, got {len(values)}")
            matrix[idx] = np.asarray([float(v) for v in values])
            loaded += 1
    return loaded
