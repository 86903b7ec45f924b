"""Deterministic Adam training with validation-based model selection.

Every source of randomness (parameter init, epoch shuffling, dropout) is
derived from the configured seed, so identical config+seed runs produce
bit-identical parameters. The best checkpoint is the earliest epoch whose
validation F1 attains the maximum.

Also home to the gradient verification harness: analytic gradients from the
manual backward pass are compared against central finite differences of the
loss on a fixed micro-batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .featurizer import Featurizer, FeaturizerConfig, build_featurizer_tables
from .layers import Params
from .metrics import Prf1, prf1
from .model import AblationFlags, DecisionModel, ModelSpec, Variant
from .types import (
    ClarigateError,
    LabeledExample,
    TurnContext,
    assemble_decision_input,
)


class EmptyDataset(ClarigateError):
    pass


class UntrainableVariant(ClarigateError):
    pass


class NonFiniteGradient(ClarigateError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings; defaults follow the training recipe."""

    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ClarigateError("epochs must be >= 1")
        if self.lr <= 0:
            raise ClarigateError("lr must be positive")
        if self.batch_size < 1:
            raise ClarigateError("batch_size must be >= 1")


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Parameters without a gradient this step (for example cross-attention
    projections on a batch with no alternatives) still decay their moments.
    """
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        params[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    valid: Prf1


@dataclass
class TrainResult:
    model: DecisionModel
    metrics: list[EpochMetrics]
    best_epoch: int

    @property
    def best_valid_f1(self) -> float:
        return self.metrics[self.best_epoch - 1].valid.f1


def examples_to_inputs(examples: Sequence[LabeledExample], bounds: tuple[float, float]):
    """Assemble decision inputs, renormalizing SNR with the given bounds."""
    inputs = []
    for ex in examples:
        ctx = TurnContext(ex.context.snr_raw, ex.context.repetition, bounds)
        inputs.append(assemble_decision_input(ex.hypotheses, ex.occurrences, ctx))
    return inputs


def encode_labeled(featurizer: Featurizer, examples: Sequence[LabeledExample]):
    inputs = examples_to_inputs(examples, featurizer.config.snr_norm_bounds)
    return featurizer.encode_inputs(inputs, [ex.label for ex in examples])


def train(
    train_set: Sequence[LabeledExample],
    valid_set: Sequence[LabeledExample],
    spec: ModelSpec,
    cfg: TrainConfig,
    featurizer: Featurizer | None = None,
    progress: Callable[[EpochMetrics], None] | None = None,
) -> TrainResult:
    """Train a model and return the best-validation-F1 checkpoint.

    The vocab and categorical tables are derived from the training set
    unless a prebuilt featurizer is supplied.
    """
    if spec.variant is Variant.ALWAYS:
        raise UntrainableVariant("the always baseline has nothing to train")
    if len(train_set) == 0 or len(valid_set) == 0:
        raise EmptyDataset("train and valid sets must be non-empty")

    if featurizer is None:
        featurizer = build_featurizer_tables(spec.featurizer, train_set)
    model = DecisionModel.build(spec, featurizer, cfg.seed)
    enc_train = encode_labeled(featurizer, train_set)
    enc_valid = encode_labeled(featurizer, valid_set)
    valid_labels = np.asarray([bool(ex.label) for ex in valid_set])

    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    n = len(enc_train)
    metrics: list[EpochMetrics] = []
    best_f1 = -1.0
    best_epoch = 0
    best_params: Params = {}

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = enc_train.take(idx)
            dropout_rng = rng if spec.dropout > 0 else None
            loss, grads = model.loss_and_grads(batch, cfg.pos_weight, dropout_rng)
            adam_step(model.params, grads, state, cfg)
            total_loss += loss * len(idx)
        proba = model.predict_proba(enc_valid)
        valid = prf1(proba >= spec.threshold, valid_labels)
        em = EpochMetrics(epoch=epoch, loss=total_loss / n, valid=valid)
        metrics.append(em)
        if progress is not None:
            progress(em)
        if valid.f1 > best_f1:
            best_f1 = valid.f1
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}

    model.params = best_params
    return TrainResult(model=model, metrics=metrics, best_epoch=best_epoch)


def write_metrics_csv(path: str | Path, metrics: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "valid_P", "valid_R", "valid_F1"])
        for em in metrics:
            writer.writerow(
                [em.epoch, f"{em.loss:.10f}", f"{em.valid.precision:.10f}",
                 f"{em.valid.recall:.10f}", f"{em.valid.f1:.10f}"]
            )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

GRADCHECK_EPSILON = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# Relative error is |analytic - fd| / max(|analytic|, |fd|, FLOOR). The
# floor makes the criterion meaningful for near-zero gradients: coordinates
# below it (e.g. dead ReLU units, whose central difference can straddle the
# kink and read off by ~1e-8) are held to an absolute error of
# TOLERANCE * FLOOR = 1e-7 instead of a 0/0 ratio. Any real backward-pass
# defect shows up at the scale of the gradients themselves (1e-3 and up
# here), far above both bounds.
GRADCHECK_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    variant: Variant
    flags: AblationFlags
    seed: int
    tolerance: float
    per_param: dict[str, float]
    max_rel_error: float
    passed: bool

    def format_lines(self) -> list[str]:
        lines = [
            f"gradient check: variant={self.variant.value} flags={self.flags} seed={self.seed}"
        ]
        width = max(len(name) for name in self.per_param)
        for name in sorted(self.per_param):
            lines.append(f"  {name:<{width}}  max_rel_err={self.per_param[name]:.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"  overall max_rel_err={self.max_rel_error:.3e} tolerance={self.tolerance:.1e} -> {verdict}"
        )
        return lines


def _microbatch() -> list[LabeledExample]:
    """Fixed hand-written batch exercising every input pathway.

    Transcripts are deliberately short: the summed sentence vectors then sit
    at moderate magnitude, where the loss surface is tame enough for
    eps=1e-5 central differences to be a trustworthy oracle. (The analytic
    gradients are scale-independent; only the finite-difference truncation
    error is not.)
    """
    from .types import AmbiguityOccurrence, AmbiguityType, HypothesisList, hypothesis

    h_top = hypothesis(
        "play harry potter", 0.9, "Video", "PlayVideo", 0.95,
        [("videotitle", "harry potter")], 0.9, 1,
    )
    h_book = hypothesis(
        "play harry potter", 0.9, "Books", "ReadBook", 0.80,
        [("booktitle", "harry potter")], 0.8, 2,
    )
    h_asr = hypothesis(
        "play larry potter", 0.85, "Video", "PlayVideo", 0.93,
        [("videotitle", "larry potter")], 0.5, 3,
    )
    h_timer = hypothesis(
        "fifteen minute timer", 0.88, "Timer", "SetTimer", 0.91,
        [("duration", "fifteen")], 0.85, 1,
    )
    h_trunc = hypothesis("turn on the", 0.7, "SmartHome", "TurnOnDevice", 0.45, [], 0.6, 1)
    occ = AmbiguityOccurrence
    t = AmbiguityType
    return [
        LabeledExample(
            HypothesisList((h_top, h_book, h_asr)),
            (occ(t.ASR, 2), occ(t.IC, 1), occ(t.HC, 1)),
            TurnContext(22.0, False),
            True,
        ),
        LabeledExample(
            HypothesisList((h_top, h_book)),
            (occ(t.IC, 1), occ(t.SNR)),
            TurnContext(4.0, True),
            False,
        ),
        LabeledExample(
            HypothesisList((h_trunc,)),
            (occ(t.SNR), occ(t.TRUNC)),
            TurnContext(3.0, True),
            True,
        ),
        LabeledExample(HypothesisList((h_timer,)), (), TurnContext(30.0, False), False),
        LabeledExample(
            HypothesisList((
                h_timer,
                hypothesis(
                    "fifty minute timer", 0.86, "Timer", "SetTimer", 0.9,
                    [("duration", "fifty")], 0.55, 2,
                ),
            )),
            (occ(t.ASR, 1),),
            TurnContext(18.0, False),
            True,
        ),
        LabeledExample(
            HypothesisList((h_trunc,)),
            (occ(t.TRUNC),),
            TurnContext(25.0, False),
            False,
        ),
    ]


def gradcheck_spec(variant: Variant, flags: AblationFlags) -> ModelSpec:
    """Compact dimensions keep the finite-difference sweep fast."""
    return ModelSpec(
        featurizer=FeaturizerConfig(d_model=8, n_heads_sentence=4, n_heads_hypothesis=2),
        variant=variant,
        flags=flags,
    )


def grad_check(
    variant: Variant,
    flags: AblationFlags = AblationFlags(),
    seed: int = 7,
    samples_per_param: int = 6,
    tolerance: float = GRADCHECK_TOLERANCE,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on a micro-batch.

    For each parameter array the largest-magnitude coordinate plus a seeded
    random sample are probed with eps=1e-5 central differences in double
    precision.
    """
    if variant is Variant.ALWAYS:
        raise UntrainableVariant("the always baseline has no gradients")
    examples = _microbatch()
    spec = gradcheck_spec(variant, flags)
    featurizer = build_featurizer_tables(spec.featurizer, examples)
    model = DecisionModel.build(spec, featurizer, seed)
    enc = encode_labeled(featurizer, examples)

    _, grads = model.loss_and_grads(enc)
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name in sorted(model.params):
        arr = model.params[name]
        flat = arr.reshape(-1)
        gflat = grads.get(name, np.zeros_like(arr)).reshape(-1)
        coords = set(rng.choice(flat.size, size=min(samples_per_param, flat.size), replace=False).tolist())
        coords.add(int(np.argmax(np.abs(gflat))))
        worst = 0.0
        for i in sorted(coords):
            original = flat[i]
            flat[i] = original + GRADCHECK_EPSILON
            loss_plus, _ = model.loss_and_grads(enc)
            flat[i] = original - GRADCHECK_EPSILON
            loss_minus, _ = model.loss_and_grads(enc)
            flat[i] = original
            fd = (loss_plus - loss_minus) / (2.0 * GRADCHECK_EPSILON)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), GRADCHECK_FLOOR)
            worst = max(worst, rel)
        per_param[name] = worst
    max_rel = max(per_param.values())
    return GradCheckReport(
        variant=variant,
        flags=flags,
        seed=seed,
        tolerance=tolerance,
        per_param=per_param,
        max_rel_error=max_rel,
        passed=max_rel <= tolerance,
    )
