"""Threshold-based detectors for the five ambiguity kinds.

Each detector is a pure function of a validated hypothesis list (or turn
context) and a DetectorConfig, returning at most one occurrence per kind.
"closeness" of two confidences is an absolute gap bounded by the configured
threshold. The alternative chosen for a kind is the qualifying hypothesis
with the highest confidence native to that kind, lowest rank on ties.
"""

from __future__ import annotations

from dataclasses import dataclass

from .types import (
    AmbiguityOccurrence,
    AmbiguityType,
    ClarigateError,
    HypothesisList,
    TurnContext,
    ValidationError,
    validate_hypothesis_list,
)


class EmptyTranscript(ClarigateError):
    pass

DEFAULT_TRUNC_LEXICON = frozenset(
    {
        "a", "an", "the",
        "my", "your", "his", "her", "its", "our", "their",
        "by", "to", "of", "for", "on", "in", "at", "with", "from",
    }
)


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds governing when each ambiguity kind fires.

    Floors are minimum confidences for an alternative to qualify; gaps are
    the maximum absolute confidence difference still considered "close".
    """

    asr_conf_floor: float = 0.8
    asr_conf_gap: float = 0.2
    ic_conf_gap: float = 0.2
    ic_conf_floor: float = 0.5
    hc_conf_gap: float = 0.2
    snr_threshold: float = 10.0
    trunc_lexicon: frozenset[str] = DEFAULT_TRUNC_LEXICON

    def __post_init__(self):
        for name in ("asr_conf_gap", "ic_conf_gap", "hc_conf_gap"):
            gap = getattr(self, name)
            if not 0.0 < gap <= 1.0:
                raise ValidationError(f"{name}={gap} outside (0, 1]")
        for name in ("asr_conf_floor", "ic_conf_floor"):
            floor = getattr(self, name)
            if not 0.0 <= floor <= 1.0:
                raise ValidationError(f"{name}={floor} outside [0, 1]")


def token_edit_distance(a: tuple[str, ...] | list[str], b: tuple[str, ...] | list[str]) -> int:
    """Levenshtein distance over whole tokens (insert/delete/substitute)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, tb in enumerate(b, start=1):
            cur[j] = min(
                prev[j] + 1,          # delete from a
                cur[j - 1] + 1,       # insert into a
                prev[j - 1] + (ta != tb),
            )
        prev = cur
    return prev[len(b)]


def detect_asr(hlist: HypothesisList, cfg: DetectorConfig) -> AmbiguityOccurrence | None:
    """Near-identical transcript with close confidence and different slot values.

    A non-top hypothesis qualifies when its transcript is one token edit
    away from the top's, its ASR confidence is both close to the top's and
    above the floor, and its set of slot values differs from the top's.
    """
    top = hlist.top
    best: tuple[float, int] | None = None  # (asr_conf, index), max conf then min rank
    for i, h in enumerate(hlist.hypotheses[1:], start=1):
        if token_edit_distance(top.transcript, h.transcript) != 1:
            continue
        if abs(top.asr_conf - h.asr_conf) > cfg.asr_conf_gap:
            continue
        if h.asr_conf < cfg.asr_conf_floor:
            continue
        if h.slot_values() == top.slot_values():
            continue
        if best is None or h.asr_conf > best[0]:
            best = (h.asr_conf, i)
    if best is None:
        return None
    return AmbiguityOccurrence(AmbiguityType.ASR, alt_index=best[1])


def detect_ic(hlist: HypothesisList, cfg: DetectorConfig) -> AmbiguityOccurrence | None:
    """Competing intent with close confidence for the same transcript.

    Only same-transcript hypotheses compete, which isolates intent ambiguity
    from ASR ambiguity.
    """
    top = hlist.top
    best: tuple[float, int] | None = None
    for i, h in enumerate(hlist.hypotheses[1:], start=1):
        if h.transcript != top.transcript:
            continue
        if h.intent == top.intent:
            continue
        if h.intent_conf < cfg.ic_conf_floor:
            continue
        if abs(top.intent_conf - h.intent_conf) > cfg.ic_conf_gap:
            continue
        if best is None or h.intent_conf > best[0]:
            best = (h.intent_conf, i)
    if best is None:
        return None
    return AmbiguityOccurrence(AmbiguityType.IC, alt_index=best[1])


def detect_hc(hlist: HypothesisList, cfg: DetectorConfig) -> AmbiguityOccurrence | None:
    """Final reranker confidences too close to trust the ranking.

    Never fires when the top hypothesis carries no reranker confidence.
    """
    top = hlist.top
    if top.hyp_conf is None:
        return None
    best: tuple[float, int] | None = None
    for i, h in enumerate(hlist.hypotheses[1:], start=1):
        if h.hyp_conf is None:
            continue
        if abs(top.hyp_conf - h.hyp_conf) > cfg.hc_conf_gap:
            continue
        if best is None or h.hyp_conf > best[0]:
            best = (h.hyp_conf, i)
    if best is None:
        return None
    return AmbiguityOccurrence(AmbiguityType.HC, alt_index=best[1])


def detect_snr(ctx: TurnContext, cfg: DetectorConfig) -> AmbiguityOccurrence | None:
    """Noise level too high to trust recognition; strict inequality."""
    if ctx.snr_raw < cfg.snr_threshold:
        return AmbiguityOccurrence(AmbiguityType.SNR)
    return None


def detect_trunc(
    transcript: tuple[str, ...] | list[str], cfg: DetectorConfig
) -> AmbiguityOccurrence | None:
    """Utterance ending in an article, possessive, or preposition."""
    if len(transcript) == 0:
        raise EmptyTranscript("cannot test truncation of an empty transcript")
    if transcript[-1] in cfg.trunc_lexicon:
        return AmbiguityOccurrence(AmbiguityType.TRUNC)
    return None


def detect_all(
    hlist: HypothesisList, ctx: TurnContext, cfg: DetectorConfig
) -> list[AmbiguityOccurrence]:
    """Run every detector; output order is fixed (ASR, IC, HC, SNR, TRUNC)."""
    validate_hypothesis_list(hlist)
    found = [
        detect_asr(hlist, cfg),
        detect_ic(hlist, cfg),
        detect_hc(hlist, cfg),
        detect_snr(ctx, cfg),
        detect_trunc(hlist.top.transcript, cfg),
    ]
    return [occ for occ in found if occ is not None]
