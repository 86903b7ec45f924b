"""The ask/no-ask decision model and its architecture variants.

The featurized hypothesis sequence (top first, then one alternative per
detected ambiguity) is contextualized by self-attention WITHOUT positional
encoding: the order of alternatives carries no information, so the model is
permutation invariant over them by construction. The top hypothesis
representation and the summed alternative representations are kept as two
separate blocks, concatenated with the occurrence bits, normalized SNR, and
repetition flag, and passed through a one-hidden-layer feed-forward head
with a logistic output.

Variants:

* ``always``   -- asks for every input (untrainable baseline).
* ``no-alt``   -- raw top vector only; the alternative block is zeroed.
* ``alt-avg``  -- raw top vector plus the plain average of the raw
  alternative vectors, no attention.
* ``crs-att``  -- single-head cross-attention, top as the query over the
  alternatives; the weighted value sum is the alternative block.
* ``self-att`` / ``self-att2`` -- one / two self-attention encoder layers
  over the whole sequence; top output and summed alternative outputs.
* ``self-sum`` -- like self-att but the two blocks are summed instead of
  concatenated before the head.

Ablation flags zero feature blocks (no_hyp, asr_only, no_sent, no_rpt)
without changing shapes, except diff_att, which runs two separate attention
stacks over the sentence block and the remaining features.

All gradients are exact and hand-derived; see tests for the central
finite-difference checks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import layers
from .featurizer import (
    CONTEXT_WIDTH,
    EncodedBatch,
    Featurizer,
    FeaturizerConfig,
)
from .layers import Params, ShapeMismatch, add_grad
from .types import ClarigateError, DecisionInput, ValidationError
from .vocab import CategoryTable, Vocab

CHECKPOINT_FORMAT = 1


class Variant(Enum):
    ALWAYS = "always"
    NO_ALT = "no-alt"
    ALT_AVG = "alt-avg"
    CRS_ATT = "crs-att"
    SELF_SUM = "self-sum"
    SELF_ATT = "self-att"
    SELF_ATT2 = "self-att2"


SELF_ATTENTION_VARIANTS = frozenset(
    {Variant.SELF_SUM, Variant.SELF_ATT, Variant.SELF_ATT2}
)
TRAINABLE_VARIANTS = tuple(v for v in Variant if v is not Variant.ALWAYS)


def encoder_depth(variant: Variant) -> int:
    return 2 if variant is Variant.SELF_ATT2 else 1


@dataclass(frozen=True)
class AblationFlags:
    """Feature ablations applied at the model input.

    no_hyp keeps only the sentence vector; asr_only keeps the sentence
    vector and the ASR confidence scalar; no_sent drops the sentence vector;
    no_rpt drops the repetition flag; diff_att attends separately over the
    sentence block and the remaining hypothesis features.
    """

    no_hyp: bool = False
    asr_only: bool = False
    no_sent: bool = False
    diff_att: bool = False
    no_rpt: bool = False

    def __post_init__(self):
        if self.no_hyp and self.asr_only:
            raise ValidationError("no_hyp and asr_only are mutually exclusive")

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        values = {}
        for part in text.replace(",", " ").split():
            name = part.strip().lower()
            if name not in cls.__dataclass_fields__:
                raise ValidationError(f"unknown ablation flag {name!r}")
            values[name] = True
        return cls(**values)

    def active(self) -> tuple[str, ...]:
        return tuple(n for n in self.__dataclass_fields__ if getattr(self, n))

    def __str__(self) -> str:
        return ",".join(self.active()) or "-"


NO_FLAGS = AblationFlags()


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to rebuild a model's architecture."""

    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    variant: Variant = Variant.SELF_ATT
    flags: AblationFlags = NO_FLAGS
    threshold: float = 0.5
    dropout: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold {self.threshold} outside (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout {self.dropout} outside [0, 1)")
        if self.flags.diff_att and self.variant not in SELF_ATTENTION_VARIANTS:
            raise ValidationError(
                f"diff_att requires a self-attention variant, not {self.variant.value}"
            )


@dataclass(frozen=True)
class ModelOutput:
    p_ask: float
    decision: bool


def feature_mask(flags: AblationFlags, d_model: int) -> np.ndarray:
    """Multiplicative (5d+2,) mask realizing the zeroing ablations."""
    width = 5 * d_model + 2
    mask = np.ones(width)
    if flags.no_hyp:
        mask[d_model:] = 0.0
    if flags.asr_only:
        mask[d_model + 1 :] = 0.0
    if flags.no_sent:
        mask[:d_model] = 0.0
    return mask


class UnknownCheckpoint(ClarigateError):
    pass


@dataclass
class DecisionModel:
    """Spec + featurizer tables + parameter store."""

    spec: ModelSpec
    featurizer: Featurizer
    params: Params
    seed: int | None = None

    # -- construction --------------------------------------------------------

    @classmethod
    def build(cls, spec: ModelSpec, featurizer: Featurizer, seed: int) -> "DecisionModel":
        cfg = spec.featurizer
        if featurizer.config != cfg:
            raise ValidationError("featurizer config mismatch between spec and tables")
        d = cfg.d_model
        width = cfg.hyp_width
        params: Params = {}
        rng = np.random.default_rng(seed)
        if spec.variant is not Variant.ALWAYS:
            featurizer.init_params(params, rng)
            if spec.variant in SELF_ATTENTION_VARIANTS:
                heads = cfg.n_heads_hypothesis
                depth = encoder_depth(spec.variant)
                if spec.flags.diff_att:
                    rest = width - d
                    for name, dim in (("hyp_enc_s", d), ("hyp_enc_h", rest)):
                        if dim % heads:
                            raise ValidationError(
                                f"diff_att block width {dim} not divisible by {heads} heads"
                            )
                        layers.init_encoder_stack(
                            params, rng, name, depth, dim, heads, dim * cfg.ffn_mult
                        )
                else:
                    layers.init_encoder_stack(
                        params, rng, "hyp_enc", depth, width, heads, width * cfg.ffn_mult
                    )
            elif spec.variant is Variant.CRS_ATT:
                for proj in ("Wq", "Wk", "Wv"):
                    params[f"cross.{proj}"] = layers.glorot(rng, width, width)
                for bias in ("bq", "bk", "bv"):
                    params[f"cross.{bias}"] = np.zeros(width)
            zdim = (width if spec.variant is Variant.SELF_SUM else 2 * width) + CONTEXT_WIDTH
            params["head.W1"] = layers.glorot(rng, zdim, d)
            params["head.b1"] = np.zeros(d)
            params["head.W2"] = layers.glorot(rng, d, 1)
            params["head.b2"] = np.zeros(1)
        return cls(spec=spec, featurizer=featurizer, params=params, seed=seed)

    # -- forward/backward -----------------------------------------------------

    def _forward(
        self,
        enc: EncodedBatch,
        dropout_rng: np.random.Generator | None = None,
    ):
        """Logits plus backward cache; not valid for the always variant."""
        if self.spec.variant is Variant.ALWAYS:
            raise ValidationError("the always variant has no logits to compute")
        spec = self.spec
        cfg = spec.featurizer
        d = cfg.d_model
        width = cfg.hyp_width
        drop = spec.dropout if dropout_rng is not None else 0.0

        feat, fcache = self.featurizer.featurize_batch(self.params, enc, drop, dropout_rng)
        fmask = feature_mask(spec.flags, d)
        feat = feat * fmask

        ctx = enc.ctx
        if spec.flags.no_rpt:
            ctx = ctx.copy()
            ctx[:, 6] = 0.0

        alt_mask = enc.hyp_mask[:, 1:]
        n, h_max = enc.hyp_mask.shape
        vcache: tuple = ()

        if spec.variant in SELF_ATTENTION_VARIANTS:
            depth = encoder_depth(spec.variant)
            if spec.flags.diff_att:
                out_s, caches_s = layers.encoder_stack_fwd(
                    feat[..., :d], self.params, "hyp_enc_s", depth,
                    cfg.n_heads_hypothesis, enc.hyp_mask, cfg.layer_norm_eps, drop, dropout_rng,
                )
                out_h, caches_h = layers.encoder_stack_fwd(
                    feat[..., d:], self.params, "hyp_enc_h", depth,
                    cfg.n_heads_hypothesis, enc.hyp_mask, cfg.layer_norm_eps, drop, dropout_rng,
                )
                out = np.concatenate([out_s, out_h], axis=-1)
                vcache = ("diff", caches_s, caches_h)
            else:
                out, caches = layers.encoder_stack_fwd(
                    feat, self.params, "hyp_enc", depth,
                    cfg.n_heads_hypothesis, enc.hyp_mask, cfg.layer_norm_eps, drop, dropout_rng,
                )
                vcache = ("solid", caches)
            top_vec = out[:, 0]
            alt_vec, _ = layers.masked_sum_fwd(out[:, 1:], alt_mask)
        elif spec.variant is Variant.NO_ALT:
            top_vec = feat[:, 0]
            alt_vec = np.zeros_like(top_vec)
        elif spec.variant is Variant.ALT_AVG:
            top_vec = feat[:, 0]
            counts = alt_mask.sum(axis=1)
            denom = np.maximum(counts, 1)
            alt_vec = (feat[:, 1:] * alt_mask[..., None]).sum(axis=1) / denom[:, None]
            vcache = ("avg", denom)
        elif spec.variant is Variant.CRS_ATT:
            top_vec = feat[:, 0]
            alt_vec, cross_cache = self._cross_fwd(feat, alt_mask)
            vcache = ("cross", cross_cache)
        else:  # pragma: no cover - enum is exhaustive
            raise ShapeMismatch(f"unhandled variant {spec.variant}")

        if spec.variant is Variant.SELF_SUM:
            z = np.concatenate([top_vec + alt_vec, ctx], axis=-1)
        else:
            z = np.concatenate([top_vec, alt_vec, ctx], axis=-1)

        h_pre, h1_c = layers.linear_fwd(z, self.params["head.W1"], self.params["head.b1"])
        h_act, relu_mask = layers.relu_fwd(h_pre)
        h_out, hdrop = layers.dropout_fwd(h_act, drop, dropout_rng)
        logit2, h2_c = layers.linear_fwd(h_out, self.params["head.W2"], self.params["head.b2"])
        logits = logit2[:, 0]

        cache = (enc, fcache, fmask, alt_mask, vcache, h1_c, relu_mask, hdrop, h2_c)
        return logits, cache

    def _cross_fwd(self, feat: np.ndarray, alt_mask: np.ndarray):
        p = self.params
        width = feat.shape[-1]
        top = feat[:, 0]
        alts = feat[:, 1:]
        q, q_c = layers.linear_fwd(top, p["cross.Wq"], p["cross.bq"])
        if alts.shape[1] == 0:
            return np.zeros_like(top), ("empty", q_c)
        k, k_c = layers.linear_fwd(alts, p["cross.Wk"], p["cross.bk"])
        v, v_c = layers.linear_fwd(alts, p["cross.Wv"], p["cross.bv"])
        scale = 1.0 / np.sqrt(width)
        scores = (q[:, None, :] * k).sum(axis=-1) * scale
        scores = np.where(alt_mask, scores, -1e30)
        scores = scores - scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        attn = expd / expd.sum(axis=-1, keepdims=True)
        has = alt_mask.any(axis=1).astype(float)
        alt_vec = (attn[..., None] * v).sum(axis=1) * has[:, None]
        return alt_vec, ("full", q_c, k_c, v_c, q, k, v, attn, has, scale)

    def _cross_bwd(self, dalt_vec: np.ndarray, cross_cache, grads: Params):
        kind = cross_cache[0]
        if kind == "empty":
            _, q_c = cross_cache
            dq = np.zeros((dalt_vec.shape[0], q_c[1].shape[0]))
            dtop, dWq, dbq = layers.linear_bwd(dq, q_c)
            add_grad(grads, "cross.Wq", dWq)
            add_grad(grads, "cross.bq", dbq)
            return dtop, np.zeros((dalt_vec.shape[0], 0, dalt_vec.shape[1]))
        _, q_c, k_c, v_c, q, k, v, attn, has, scale = cross_cache
        dalt_vec = dalt_vec * has[:, None]
        dattn = (dalt_vec[:, None, :] * v).sum(axis=-1)
        dv = attn[..., None] * dalt_vec[:, None, :]
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dscores = dscores * scale
        dq = (dscores[..., None] * k).sum(axis=1)
        dk = dscores[..., None] * q[:, None, :]
        dtop, dWq, dbq = layers.linear_bwd(dq, q_c)
        dalts_k, dWk, dbk = layers.linear_bwd(dk, k_c)
        dalts_v, dWv, dbv = layers.linear_bwd(dv, v_c)
        for name, val in (
            ("cross.Wq", dWq), ("cross.bq", dbq),
            ("cross.Wk", dWk), ("cross.bk", dbk),
            ("cross.Wv", dWv), ("cross.bv", dbv),
        ):
            add_grad(grads, name, val)
        return dtop, dalts_k + dalts_v

    def _backward(self, dlogits: np.ndarray, cache) -> Params:
        spec = self.spec
        cfg = spec.featurizer
        d = cfg.d_model
        width = cfg.hyp_width
        enc, fcache, fmask, alt_mask, vcache, h1_c, relu_mask, hdrop, h2_c = cache
        grads: Params = {}

        dh_out, dW2, db2 = layers.linear_bwd(dlogits[:, None], h2_c)
        add_grad(grads, "head.W2", dW2)
        add_grad(grads, "head.b2", db2)
        dh_act = layers.dropout_bwd(dh_out, hdrop)
        dh_pre = layers.relu_bwd(dh_act, relu_mask)
        dz, dW1, db1 = layers.linear_bwd(dh_pre, h1_c)
        add_grad(grads, "head.W1", dW1)
        add_grad(grads, "head.b1", db1)

        if spec.variant is Variant.SELF_SUM:
            dtop = dz[:, :width]
            dalt = dz[:, :width]
        else:
            dtop = dz[:, :width]
            dalt = dz[:, width : 2 * width]

        n, h_max = enc.hyp_mask.shape
        if spec.variant in SELF_ATTENTION_VARIANTS:
            dout = np.zeros((n, h_max, width))
            dout[:, 0] = dtop
            dout[:, 1:] = layers.masked_sum_bwd(dalt, alt_mask)
            if vcache[0] == "diff":
                _, caches_s, caches_h = vcache
                dfeat_s = layers.encoder_stack_bwd(dout[..., :d], caches_s, self.params, "hyp_enc_s", grads)
                dfeat_h = layers.encoder_stack_bwd(dout[..., d:], caches_h, self.params, "hyp_enc_h", grads)
                dfeat = np.concatenate([dfeat_s, dfeat_h], axis=-1)
            else:
                _, caches = vcache
                dfeat = layers.encoder_stack_bwd(dout, caches, self.params, "hyp_enc", grads)
        elif spec.variant is Variant.NO_ALT:
            dfeat = np.zeros((n, h_max, width))
            dfeat[:, 0] = dtop
        elif spec.variant is Variant.ALT_AVG:
            _, denom = vcache
            dfeat = np.zeros((n, h_max, width))
            dfeat[:, 0] = dtop
            dfeat[:, 1:] = dalt[:, None, :] * alt_mask[..., None] / denom[:, None, None]
        elif spec.variant is Variant.CRS_ATT:
            dtop_cross, dalts = self._cross_bwd(dalt, vcache[1], grads)
            dfeat = np.zeros((n, h_max, width))
            dfeat[:, 0] = dtop + dtop_cross
            dfeat[:, 1:] = dalts
        else:  # pragma: no cover
            raise ShapeMismatch(f"unhandled variant {spec.variant}")

        dfeat = dfeat * fmask
        self.featurizer.featurize_batch_bwd(dfeat, fcache, self.params, grads)
        return grads

    # -- public API -----------------------------------------------------------

    def loss_and_grads(
        self,
        enc: EncodedBatch,
        pos_weight: float = 1.0,
        dropout_rng: np.random.Generator | None = None,
    ) -> tuple[float, Params]:
        if enc.labels is None:
            raise ValidationError("batch carries no labels")
        logits, cache = self._forward(enc, dropout_rng)
        loss, dlogits = layers.bce_loss_and_dlogit(logits, enc.labels, pos_weight)
        grads = self._backward(dlogits, cache)
        return loss, grads

    def predict_proba(self, enc: EncodedBatch, batch_size: int = 1024) -> np.ndarray:
        n = len(enc)
        if self.spec.variant is Variant.ALWAYS:
            return np.ones(n)
        out = np.empty(n)
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            logits, _ = self._forward(enc.take(idx))
            out[idx] = layers.sigmoid(logits)
        return out

    def decide(self, proba: np.ndarray) -> np.ndarray:
        return proba >= self.spec.threshold

    def forward(self, di: DecisionInput) -> ModelOutput:
        if self.spec.variant is Variant.ALWAYS:
            return ModelOutput(p_ask=1.0, decision=True)
        enc = self.featurizer.encode_inputs([di])
        p = float(self.predict_proba(enc)[0])
        return ModelOutput(p_ask=p, decision=p >= self.spec.threshold)

    # -- checkpointing ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        meta = {
            "format": CHECKPOINT_FORMAT,
            "spec": {
                "featurizer": asdict(self.spec.featurizer),
                "variant": self.spec.variant.value,
                "flags": asdict(self.spec.flags),
                "threshold": self.spec.threshold,
                "dropout": self.spec.dropout,
            },
            "tables": {
                "vocab": list(self.featurizer.vocab.words),
                "domains": list(self.featurizer.domains.names),
                "intents": list(self.featurizer.intents.names),
                "slot_keys": list(self.featurizer.slot_keys.names),
            },
            "hashes": {
                "vocab": self.featurizer.vocab.sha256(),
                "domains": self.featurizer.domains.sha256(),
                "intents": self.featurizer.intents.sha256(),
                "slot_keys": self.featurizer.slot_keys.sha256(),
            },
            "seed": self.seed,
        }
        arrays = {f"p::{name}": arr for name, arr in self.params.items()}
        np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DecisionModel":
        with np.load(path, allow_pickle=False) as npz:
            if "meta" not in npz:
                raise UnknownCheckpoint(f"{path} is not a model checkpoint")
            meta = json.loads(str(npz["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise UnknownCheckpoint(f"unsupported checkpoint format {meta.get('format')}")
            params = {
                key[len("p::") :]: npz[key] for key in npz.files if key.startswith("p::")
            }
        fz = meta["spec"]["featurizer"]
        fz["snr_norm_bounds"] = tuple(fz["snr_norm_bounds"])
        spec = ModelSpec(
            featurizer=FeaturizerConfig(**fz),
            variant=Variant(meta["spec"]["variant"]),
            flags=AblationFlags(**meta["spec"]["flags"]),
            threshold=meta["spec"]["threshold"],
            dropout=meta["spec"]["dropout"],
        )
        featurizer = Featurizer(
            config=spec.featurizer,
            vocab=Vocab(tuple(meta["tables"]["vocab"])),
            domains=CategoryTable(tuple(meta["tables"]["domains"])),
            intents=CategoryTable(tuple(meta["tables"]["intents"])),
            slot_keys=CategoryTable(tuple(meta["tables"]["slot_keys"])),
        )
        return cls(spec=spec, featurizer=featurizer, params=params, seed=meta.get("seed"))


# ---------------------------------------------------------------------------
# free-standing operations on plain vector sequences
# ---------------------------------------------------------------------------


def hypothesis_self_attention(
    vectors: np.ndarray,
    n_layers: int,
    params: Params,
    n_heads: int,
    eps: float = 1e-5,
    prefix: str = "hyp_enc",
) -> np.ndarray:
    """Contextualize an (H, width) sequence; no positional encoding."""
    x = np.asarray(vectors, dtype=float)[None, :, :]
    mask = np.ones(x.shape[:2], dtype=bool)
    out, _ = layers.encoder_stack_fwd(x, params, prefix, n_layers, n_heads, mask, eps)
    return out[0]


def aggregate(seq: np.ndarray, variant: Variant):
    """Split a contextualized sequence into (top, alternatives) blocks.

    self-sum returns the single summed representation; all other variants
    return a (top_vec, alt_vec) pair, with a zero alternative block when the
    sequence holds no alternatives.
    """
    seq = np.asarray(seq, dtype=float)
    top = seq[0]
    rest = seq[1:]
    if variant is Variant.SELF_SUM:
        return top + rest.sum(axis=0)
    if variant is Variant.NO_ALT:
        return top, np.zeros_like(top)
    if variant is Variant.ALT_AVG:
        return top, (rest.mean(axis=0) if len(rest) else np.zeros_like(top))
    return top, rest.sum(axis=0)


def cross_attention(top_vec: np.ndarray, alt_vectors: np.ndarray, params: Params) -> np.ndarray:
    """Attention with the top as query over the alternatives; zero if none."""
    top_vec = np.asarray(top_vec, dtype=float)
    alt_vectors = np.asarray(alt_vectors, dtype=float)
    if alt_vectors.size == 0:
        return np.zeros_like(top_vec)
    width = top_vec.shape[-1]
    q = top_vec @ params["cross.Wq"] + params["cross.bq"]
    k = alt_vectors @ params["cross.Wk"] + params["cross.bk"]
    v = alt_vectors @ params["cross.Wv"] + params["cross.bv"]
    scores = (k @ q) / np.sqrt(width)
    scores -= scores.max()
    expd = np.exp(scores)
    attn = expd / expd.sum()
    return attn @ v


def cross_attention_weights(
    top_vec: np.ndarray, alt_vectors: np.ndarray, params: Params
) -> np.ndarray:
    """The softmax weights of :func:`cross_attention`, for inspection."""
    top_vec = np.asarray(top_vec, dtype=float)
    alt_vectors = np.asarray(alt_vectors, dtype=float)
    width = top_vec.shape[-1]
    q = top_vec @ params["cross.Wq"] + params["cross.bq"]
    k = alt_vectors @ params["cross.Wk"] + params["cross.bk"]
    scores = (k @ q) / np.sqrt(width)
    scores -= scores.max()
    expd = np.exp(scores)
    return expd / expd.sum()
