"""Turns hypotheses and turn context into fixed-width feature vectors.

Each hypothesis becomes the concatenation

    [sentence_vec(d) | asr_conf(1) | intent_conf(1) |
     domain_emb(d) | intent_emb(d) | slot_vec(d) | amb_type_emb(d)]

for a total width of 5*d + 2. The sentence vector is the masked sum of a
single-layer multi-head transformer encoder over the word embeddings, with
no positional encoding by default, so it is invariant under token
permutation. The reranker confidence (hyp_conf) is deliberately excluded:
it is not always available, so it feeds the detectors only.

Missing alternatives (SNR/TRUNC placeholder slots) substitute a learned
unknown vector per element block and zero confidences.

Batched paths carry caches for the manual backward pass; the single-item
operations wrap the batched kernels so there is exactly one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import layers
from .layers import Params, add_grad
from .types import (
    AmbiguityType,
    ClarigateError,
    DecisionInput,
    Hypothesis,
    OCCURRENCE_ORDER,
    PLACEHOLDER,
    ValidationError,
    _Placeholder,
)
from .vocab import PAD_ID, CategoryTable, Vocab


class EmptyTokenSequence(ClarigateError):
    pass


# Featurization tags in fixed id order; TOP marks the top-ranked hypothesis.
AMB_TAG_ORDER: tuple[AmbiguityType, ...] = (
    AmbiguityType.TOP,
    AmbiguityType.ASR,
    AmbiguityType.IC,
    AmbiguityType.HC,
    AmbiguityType.SNR,
    AmbiguityType.TRUNC,
)
AMB_TAG_ID = {t: i for i, t in enumerate(AMB_TAG_ORDER)}

CONTEXT_WIDTH = 7  # five occurrence bits, snr_norm, repetition


@dataclass(frozen=True)
class FeaturizerConfig:
    """Dimensions and knobs of the feature encoder.

    d_model is the width of every embedding block. The hypothesis-level
    attention runs at width 5*d_model + 2, so n_heads_hypothesis must divide
    that; the default of 2 does for any even d_model.
    """

    d_model: int = 100
    n_heads_sentence: int = 4
    n_heads_hypothesis: int = 2
    ffn_mult: int = 4
    layer_norm_eps: float = 1e-5
    sentence_positional: bool = False
    snr_norm_bounds: tuple[float, float] = (0.0, 40.0)

    def __post_init__(self):
        if self.d_model <= 0 or self.n_heads_sentence <= 0 or self.ffn_mult <= 0:
            raise ValidationError("d_model, heads, and ffn_mult must be positive")
        if self.d_model % self.n_heads_sentence:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by {self.n_heads_sentence} sentence heads"
            )
        if self.hyp_width % self.n_heads_hypothesis:
            raise ValidationError(
                f"hypothesis width {self.hyp_width} not divisible by "
                f"{self.n_heads_hypothesis} hypothesis heads"
            )

    @property
    def hyp_width(self) -> int:
        return 5 * self.d_model + 2


@dataclass
class EncodedBatch:
    """Dense padded representation of a batch of decision inputs.

    Shapes: N examples, up to H hypothesis slots (slot 0 is the top), up to
    L tokens per transcript, up to K slot keys per hypothesis. Boolean masks
    mark real entries.
    """

    tok: np.ndarray        # (N, H, L) int32 word ids
    tok_mask: np.ndarray   # (N, H, L) bool
    slot: np.ndarray       # (N, H, K) int32 slot-key ids
    slot_mask: np.ndarray  # (N, H, K) bool
    dom: np.ndarray        # (N, H) int32
    intent: np.ndarray     # (N, H) int32
    amb: np.ndarray        # (N, H) int32 featurization-tag ids
    conf: np.ndarray       # (N, H, 2) float64, (asr_conf, intent_conf)
    hyp_mask: np.ndarray   # (N, H) bool, real-or-placeholder slots
    ph_mask: np.ndarray    # (N, H) bool, placeholder slots
    ctx: np.ndarray        # (N, 7) float64
    labels: np.ndarray | None = None  # (N,) float64 in {0, 1}

    def __len__(self) -> int:
        return self.tok.shape[0]

    def take(self, idx: np.ndarray) -> "EncodedBatch":
        return EncodedBatch(
            tok=self.tok[idx],
            tok_mask=self.tok_mask[idx],
            slot=self.slot[idx],
            slot_mask=self.slot_mask[idx],
            dom=self.dom[idx],
            intent=self.intent[idx],
            amb=self.amb[idx],
            conf=self.conf[idx],
            hyp_mask=self.hyp_mask[idx],
            ph_mask=self.ph_mask[idx],
            ctx=self.ctx[idx],
            labels=None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class Featurizer:
    """Binds the config to concrete vocab and categorical tables."""

    config: FeaturizerConfig
    vocab: Vocab
    domains: CategoryTable
    intents: CategoryTable
    slot_keys: CategoryTable

    # -- parameters ---------------------------------------------------------

    def init_params(self, params: Params, rng: np.random.Generator) -> None:
        d = self.config.d_model
        # Word vectors start small, matching the usual replace-with-pretrained
        # workflow; categorical embeddings start at a scale comparable to the
        # confidence scalars so no single input block dominates the feature
        # vector's normalization statistics.
        params["word_emb"] = rng.uniform(-0.1, 0.1, size=(len(self.vocab), d))
        params["word_emb"][PAD_ID] = 0.0
        params["domain_emb"] = rng.uniform(-0.5, 0.5, size=(len(self.domains), d))
        params["intent_emb"] = rng.uniform(-0.5, 0.5, size=(len(self.intents), d))
        params["slot_emb"] = rng.uniform(-0.5, 0.5, size=(len(self.slot_keys), d))
        params["ambtype_emb"] = rng.uniform(-0.5, 0.5, size=(len(AMB_TAG_ORDER), d))
        # The placeholder sentence vector stands in for a summed encoder
        # output, so it starts at that scale rather than word-vector scale.
        params["sent_unk"] = rng.uniform(-1.0, 1.0, size=(d,))
        layers.init_encoder_stack(
            params, rng, "sent_enc", 1, d, self.config.n_heads_sentence, d * self.config.ffn_mult
        )

    def load_pretrained_words(self, params: Params, path: str) -> int:
        """Overlay plain-text word vectors onto the embedding table."""
        from .vocab import load_word_vectors

        matrix, loaded = load_word_vectors(path, self.vocab, self.config.d_model)
        present = (matrix != 0.0).any(axis=1)
        params["word_emb"][present] = matrix[present]
        return loaded

    # -- batch encoding -----------------------------------------------------

    def encode_inputs(
        self,
        inputs: Sequence[DecisionInput],
        labels: Sequence[bool] | None = None,
    ) -> EncodedBatch:
        n = len(inputs)
        h_max = max(1 + len(di.alternatives) for di in inputs)
        l_max = 1
        k_max = 1
        for di in inputs:
            for hyp in self._iter_real(di):
                l_max = max(l_max, len(hyp.transcript))
                k_max = max(k_max, max(1, len(hyp.slots)))

        tok = np.full((n, h_max, l_max), PAD_ID, dtype=np.int32)
        tok_mask = np.zeros((n, h_max, l_max), dtype=bool)
        slot = np.zeros((n, h_max, k_max), dtype=np.int32)
        slot_mask = np.zeros((n, h_max, k_max), dtype=bool)
        dom = np.zeros((n, h_max), dtype=np.int32)
        intent = np.zeros((n, h_max), dtype=np.int32)
        amb = np.zeros((n, h_max), dtype=np.int32)
        conf = np.zeros((n, h_max, 2))
        hyp_mask = np.zeros((n, h_max), dtype=bool)
        ph_mask = np.zeros((n, h_max), dtype=bool)
        ctx = np.zeros((n, CONTEXT_WIDTH))

        for i, di in enumerate(inputs):
            entries: list[tuple[AmbiguityType, Hypothesis | _Placeholder]] = [
                (AmbiguityType.TOP, di.top)
            ] + list(di.alternatives)
            for j, (tag, hyp) in enumerate(entries):
                hyp_mask[i, j] = True
                amb[i, j] = AMB_TAG_ID[tag]
                if hyp is PLACEHOLDER:
                    ph_mask[i, j] = True
                    slot[i, j, 0] = 0
                    slot_mask[i, j, 0] = True  # placeholder slot block = <unk> row
                    continue
                assert isinstance(hyp, Hypothesis)
                ids = self.vocab.encode(hyp.transcript)
                tok[i, j, : len(ids)] = ids
                tok_mask[i, j, : len(ids)] = True
                for s, (key, _value) in enumerate(hyp.slots):
                    slot[i, j, s] = self.slot_keys.id_of(key)
                    slot_mask[i, j, s] = True
                dom[i, j] = self.domains.id_of(hyp.domain)
                intent[i, j] = self.intents.id_of(hyp.intent)
                conf[i, j, 0] = hyp.asr_conf
                conf[i, j, 1] = hyp.intent_conf
            ctx[i, :5] = [float(b) for b in di.occurrence_vector]
            ctx[i, 5] = di.snr_norm
            ctx[i, 6] = float(di.repetition)

        lab = None
        if labels is not None:
            lab = np.asarray([1.0 if b else 0.0 for b in labels])
        return EncodedBatch(
            tok=tok, tok_mask=tok_mask, slot=slot, slot_mask=slot_mask,
            dom=dom, intent=intent, amb=amb, conf=conf,
            hyp_mask=hyp_mask, ph_mask=ph_mask, ctx=ctx, labels=lab,
        )

    @staticmethod
    def _iter_real(di: DecisionInput):
        yield di.top
        for _, hyp in di.alternatives:
            if hyp is not PLACEHOLDER:
                yield hyp

    # -- batched featurization ---------------------------------------------

    def featurize_batch(
        self,
        params: Params,
        enc: EncodedBatch,
        dropout_rate: float = 0.0,
        rng: np.random.Generator | None = None,
    ):
        """Produce the (N, H, 5d+2) feature grid plus a backward cache."""
        cfg = self.config
        d = cfg.d_model
        n, h_max = enc.hyp_mask.shape

        real = enc.hyp_mask & ~enc.ph_mask
        ri, rj = np.nonzero(real)
        tok_r = enc.tok[ri, rj]          # (R, L)
        # Transcripts repeat across hypotheses and examples; encode each
        # distinct one once. The token mask is derivable (pad id marks pads).
        tok_u, inv = np.unique(tok_r, axis=0, return_inverse=True)
        tmask_u = tok_u != PAD_ID

        emb, emb_cache = layers.embedding_fwd(params["word_emb"], tok_u)
        if cfg.sentence_positional:
            emb = emb + layers.sinusoidal_pe(emb.shape[1], d)[None, :, :]
        enc_out, enc_caches = layers.encoder_stack_fwd(
            emb, params, "sent_enc", 1, cfg.n_heads_sentence, tmask_u,
            cfg.layer_norm_eps, dropout_rate, rng,
        )
        sums_u, _ = layers.masked_sum_fwd(enc_out, tmask_u)  # (U, d)

        sent_block = np.zeros((n, h_max, d))
        sent_block[ri, rj] = sums_u[inv]
        pi, pj = np.nonzero(enc.ph_mask)
        sent_block[pi, pj] = params["sent_unk"]

        dom_emb, dom_cache = layers.embedding_fwd(params["domain_emb"], enc.dom)
        int_emb, int_cache = layers.embedding_fwd(params["intent_emb"], enc.intent)
        amb_emb, amb_cache = layers.embedding_fwd(params["ambtype_emb"], enc.amb)
        slot_rows, slot_cache = layers.embedding_fwd(params["slot_emb"], enc.slot)
        slot_block = (slot_rows * enc.slot_mask[..., None]).sum(axis=2)

        feat = np.concatenate(
            [sent_block, enc.conf, dom_emb, int_emb, slot_block, amb_emb], axis=-1
        )
        feat *= enc.hyp_mask[..., None]

        cache = (
            enc, (ri, rj), (pi, pj), inv, emb_cache, enc_caches, tmask_u,
            dom_cache, int_cache, amb_cache, slot_cache,
        )
        return feat, cache

    def featurize_batch_bwd(self, dfeat: np.ndarray, cache, params: Params, grads: Params):
        cfg = self.config
        d = cfg.d_model
        (enc, (ri, rj), (pi, pj), inv, emb_cache, enc_caches, tmask_u,
         dom_cache, int_cache, amb_cache, slot_cache) = cache

        dfeat = dfeat * enc.hyp_mask[..., None]
        dsent = dfeat[..., :d]
        ddom = dfeat[..., d + 2 : 2 * d + 2]
        dint = dfeat[..., 2 * d + 2 : 3 * d + 2]
        dslot_block = dfeat[..., 3 * d + 2 : 4 * d + 2]
        damb = dfeat[..., 4 * d + 2 :]

        add_grad(grads, "sent_unk", dsent[pi, pj].sum(axis=0))
        dsums = dsent[ri, rj]  # (R, d)
        dsums_u = np.zeros((tmask_u.shape[0], d))
        np.add.at(dsums_u, inv, dsums)
        denc_out = layers.masked_sum_bwd(dsums_u, tmask_u)
        demb = layers.encoder_stack_bwd(denc_out, enc_caches, params, "sent_enc", grads)
        add_grad(grads, "word_emb", layers.embedding_bwd(demb, emb_cache))

        add_grad(grads, "domain_emb", layers.embedding_bwd(ddom, dom_cache))
        add_grad(grads, "intent_emb", layers.embedding_bwd(dint, int_cache))
        add_grad(grads, "ambtype_emb", layers.embedding_bwd(damb, amb_cache))
        dslot_rows = dslot_block[:, :, None, :] * enc.slot_mask[..., None]
        add_grad(grads, "slot_emb", layers.embedding_bwd(dslot_rows, slot_cache))

    # -- single-item operations ---------------------------------------------

    def encode_sentence(self, tokens: Sequence[str], params: Params) -> np.ndarray:
        """Summed encoder output over one token sequence, shape (d_model,)."""
        if len(tokens) == 0:
            raise EmptyTokenSequence("cannot encode an empty token sequence")
        cfg = self.config
        ids = np.asarray([self.vocab.encode(tokens)], dtype=np.int32)
        mask = np.ones_like(ids, dtype=bool)
        emb = params["word_emb"][ids]
        if cfg.sentence_positional:
            emb = emb + layers.sinusoidal_pe(emb.shape[1], cfg.d_model)[None, :, :]
        out, _ = layers.encoder_stack_fwd(
            emb, params, "sent_enc", 1, cfg.n_heads_sentence, mask, cfg.layer_norm_eps
        )
        return out[0].sum(axis=0)

    def slot_vector(self, slot_keys: Sequence[str], params: Params) -> np.ndarray:
        """Sum of slot-key embeddings; unknown keys map to the <unk> row."""
        if len(slot_keys) == 0:
            return np.zeros(self.config.d_model)
        ids = [self.slot_keys.id_of(k) for k in slot_keys]
        return params["slot_emb"][ids].sum(axis=0)

    def featurize_hypothesis(
        self,
        hyp: Hypothesis | _Placeholder,
        amb_type: AmbiguityType,
        params: Params,
    ) -> np.ndarray:
        """One hypothesis vector of width 5*d_model + 2."""
        d = self.config.d_model
        if hyp is PLACEHOLDER:
            return np.concatenate(
                [
                    params["sent_unk"],
                    np.zeros(2),
                    params["domain_emb"][0],
                    params["intent_emb"][0],
                    params["slot_emb"][0],
                    params["ambtype_emb"][AMB_TAG_ID[amb_type]],
                ]
            )
        assert isinstance(hyp, Hypothesis)
        return np.concatenate(
            [
                self.encode_sentence(hyp.transcript, params),
                np.asarray([hyp.asr_conf, hyp.intent_conf]),
                params["domain_emb"][self.domains.id_of(hyp.domain)],
                params["intent_emb"][self.intents.id_of(hyp.intent)],
                self.slot_vector([k for k, _ in hyp.slots], params),
                params["ambtype_emb"][AMB_TAG_ID[amb_type]],
            ]
        )


def context_vector(di: DecisionInput) -> np.ndarray:
    """[occ_ASR..occ_TRUNC, snr_norm, repetition] as a float vector."""
    out = np.zeros(CONTEXT_WIDTH)
    out[:5] = [float(b) for b in di.occurrence_vector]
    out[5] = di.snr_norm
    out[6] = float(di.repetition)
    return out


def build_featurizer_tables(
    config: FeaturizerConfig,
    examples,
) -> Featurizer:
    """Derive vocab and categorical tables from training examples."""
    token_seqs = []
    domains: list[str] = []
    intents: list[str] = []
    slot_keys: list[str] = []
    for ex in examples:
        for hyp in ex.hypotheses.hypotheses:
            token_seqs.append(hyp.transcript)
            domains.append(hyp.domain)
            intents.append(hyp.intent)
            slot_keys.extend(k for k, _ in hyp.slots)
    return Featurizer(
        config=config,
        vocab=Vocab.build(token_seqs),
        domains=CategoryTable.build(domains),
        intents=CategoryTable.build(intents),
        slot_keys=CategoryTable.build(slot_keys),
    )
