"""Domain model for n-best interpretation lists and assembled decision inputs.

A spoken-language-understanding stack hands us a ranked list of hypotheses
(transcript + NLU interpretation + confidences). When ambiguity detectors
flag the turn, the decision model consumes one assembled ``DecisionInput``:
the top hypothesis, one alternative hypothesis per detected ambiguity, the
ambiguity occurrence bits, a normalized SNR scalar, and a repetition flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence


class ClarigateError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ClarigateError):
    """A value violates a documented invariant."""


class ConfidenceOutOfRange(ValidationError):
    pass


class EmptyList(ValidationError):
    pass


class RankNotUnique(ValidationError):
    pass


class NonMonotoneHypConf(ValidationError):
    pass


class DuplicateOccurrenceType(ValidationError):
    pass


class AltIndexOutOfRange(ValidationError):
    pass


class MalformedRecord(ValidationError):
    """A JSON-lines dataset record could not be decoded.

    Carries the 1-based line number so batch loaders can point at the
    offending line.
    """

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class AmbiguityType(Enum):
    """The five detectable ambiguity kinds, plus the TOP tag.

    TOP is only ever used as a featurization tag for the top-ranked
    hypothesis; it never appears in an occurrence record.
    """

    ASR = "ASR"
    IC = "IC"
    HC = "HC"
    SNR = "SNR"
    TRUNC = "TRUNC"
    TOP = "TOP"


# Canonical ordering of the occurrence vector and of detector output.
OCCURRENCE_ORDER: tuple[AmbiguityType, ...] = (
    AmbiguityType.ASR,
    AmbiguityType.IC,
    AmbiguityType.HC,
    AmbiguityType.SNR,
    AmbiguityType.TRUNC,
)

# Ambiguity kinds that never carry an alternative hypothesis; their slot in
# the model input is the PLACEHOLDER sentinel.
PLACEHOLDER_KINDS = frozenset({AmbiguityType.SNR, AmbiguityType.TRUNC})


class _Placeholder:
    """Sentinel standing in for a missing alternative hypothesis.

    Kept distinct from a fake Hypothesis so the featurizer can substitute
    its learned unknown-element vectors cleanly.
    """

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "PLACEHOLDER"


PLACEHOLDER = _Placeholder()


def _check_conf(value: float, name: str) -> None:
    if not (0.0 <= value <= 1.0):
        raise ConfidenceOutOfRange(f"{name}={value!r} outside [0, 1]")


@dataclass(frozen=True)
class Hypothesis:
    """One candidate interpretation of a user utterance.

    transcript and slot values are token sequences (lowercased words).
    hyp_conf may be absent for rule-based hypotheses that carry no final
    reranker score.
    """

    transcript: tuple[str, ...]
    asr_conf: float
    domain: str
    intent: str
    intent_conf: float
    slots: tuple[tuple[str, tuple[str, ...]], ...] = ()
    hyp_conf: float | None = None
    rank: int = 1

    def __post_init__(self):
        if len(self.transcript) == 0:
            raise ValidationError("transcript must contain at least one token")
        _check_conf(self.asr_conf, "asr_conf")
        _check_conf(self.intent_conf, "intent_conf")
        if self.hyp_conf is not None:
            _check_conf(self.hyp_conf, "hyp_conf")
        if self.rank < 1:
            raise ValidationError(f"rank must be >= 1, got {self.rank}")

    def slot_values(self) -> frozenset[tuple[str, ...]]:
        return frozenset(value for _, value in self.slots)


def hypothesis(
    transcript: str,
    asr_conf: float,
    domain: str,
    intent: str,
    intent_conf: float,
    slots: Sequence[tuple[str, str]] = (),
    hyp_conf: float | None = None,
    rank: int = 1,
) -> Hypothesis:
    """Convenience constructor taking whitespace-joined strings."""
    return Hypothesis(
        transcript=tuple(transcript.split()),
        asr_conf=asr_conf,
        domain=domain,
        intent=intent,
        intent_conf=intent_conf,
        slots=tuple((k, tuple(v.split())) for k, v in slots),
        hyp_conf=hyp_conf,
        rank=rank,
    )


@dataclass(frozen=True)
class HypothesisList:
    """Non-empty hypothesis list, normalized to ascending rank order."""

    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "hypotheses", tuple(sorted(self.hypotheses, key=lambda h: h.rank))
        )

    @property
    def top(self) -> Hypothesis:
        return self.hypotheses[0]

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __getitem__(self, i: int) -> Hypothesis:
        return self.hypotheses[i]


@dataclass(frozen=True)
class TurnContext:
    """Acoustic and dialog context for one turn.

    snr_norm_bounds are the (lo, hi) decibels mapped onto [-1, 1]; raw
    values outside the bounds clamp.
    """

    snr_raw: float
    repetition: bool
    snr_norm_bounds: tuple[float, float] = (0.0, 40.0)

    def __post_init__(self):
        lo, hi = self.snr_norm_bounds
        if not lo < hi:
            raise ValidationError(f"snr_norm_bounds must satisfy lo < hi, got {self.snr_norm_bounds}")


@dataclass(frozen=True)
class AmbiguityOccurrence:
    """A detected ambiguity and, when one exists, its alternative hypothesis.

    alt_index is an index into the hypothesis list; it is absent exactly for
    the SNR and TRUNC kinds, which have no corresponding alternative.
    """

    kind: AmbiguityType
    alt_index: int | None = None

    def __post_init__(self):
        if self.kind is AmbiguityType.TOP:
            raise ValidationError("TOP is a featurization tag, not an occurrence kind")
        if self.kind in PLACEHOLDER_KINDS:
            if self.alt_index is not None:
                raise ValidationError(f"{self.kind.value} occurrences carry no alternative")
        else:
            if self.alt_index is None:
                raise ValidationError(f"{self.kind.value} occurrences require alt_index")
            if self.alt_index < 1:
                raise AltIndexOutOfRange(
                    f"alt_index {self.alt_index} points at or before the top hypothesis"
                )


@dataclass(frozen=True)
class DecisionInput:
    """Assembled model input for one turn.

    alternatives holds one (kind, hypothesis-or-PLACEHOLDER) entry per
    detected ambiguity, in the order the occurrences were given. The
    occurrence vector is ordered (ASR, IC, HC, SNR, TRUNC).
    """

    top: Hypothesis
    alternatives: tuple[tuple[AmbiguityType, Hypothesis | _Placeholder], ...]
    occurrence_vector: tuple[bool, bool, bool, bool, bool]
    snr_norm: float
    repetition: bool

    def __post_init__(self):
        if len(self.alternatives) != sum(self.occurrence_vector):
            raise ValidationError("alternatives count must equal occurrence popcount")
        kinds = [k for k, _ in self.alternatives]
        if len(set(kinds)) != len(kinds):
            raise DuplicateOccurrenceType(f"duplicate kinds in {kinds}")
        if not -1.0 <= self.snr_norm <= 1.0:
            raise ValidationError(f"snr_norm {self.snr_norm} outside [-1, 1]")


@dataclass(frozen=True)
class LabeledExample:
    """One dataset row: a turn plus its ask/no-ask supervision label.

    Stores the raw turn (full hypothesis list, detected occurrences, raw
    SNR) so records round-trip losslessly; the model-ready DecisionInput is
    assembled on demand via :func:`assemble_decision_input`.
    """

    hypotheses: HypothesisList
    occurrences: tuple[AmbiguityOccurrence, ...]
    context: TurnContext
    label: bool

    @property
    def type_tags(self) -> frozenset[AmbiguityType]:
        return frozenset(o.kind for o in self.occurrences)

    def decision_input(self) -> DecisionInput:
        return assemble_decision_input(self.hypotheses, self.occurrences, self.context)


def validate_hypothesis_list(hlist: HypothesisList) -> None:
    """Check the list-level invariants, raising the specific violation.

    Ranks must be unique and consecutive present hyp_conf values must be
    non-increasing. Per-hypothesis range checks happen at construction.
    """
    if len(hlist) == 0:
        raise EmptyList("hypothesis list is empty")
    ranks = [h.rank for h in hlist.hypotheses]
    if len(set(ranks)) != len(ranks):
        raise RankNotUnique(f"duplicate ranks in {ranks}")
    prev: float | None = None
    for h in hlist.hypotheses:
        if h.hyp_conf is None:
            continue
        if prev is not None and h.hyp_conf > prev:
            raise NonMonotoneHypConf(
                f"hyp_conf {h.hyp_conf} at rank {h.rank} exceeds earlier value {prev}"
            )
        prev = h.hyp_conf


def normalize_snr(snr_raw: float, bounds: tuple[float, float]) -> float:
    """Affinely map [lo, hi] onto [-1, 1], clamping outside values."""
    lo, hi = bounds
    x = 2.0 * (snr_raw - lo) / (hi - lo) - 1.0
    return max(-1.0, min(1.0, x))


def assemble_decision_input(
    hlist: HypothesisList,
    occurrences: Iterable[AmbiguityOccurrence],
    ctx: TurnContext,
) -> DecisionInput:
    """Build the model input from a validated list and detected occurrences.

    Each occurrence contributes one alternative entry: the referenced
    hypothesis for ASR/IC/HC, the PLACEHOLDER sentinel for SNR/TRUNC.
    """
    validate_hypothesis_list(hlist)
    occs = tuple(occurrences)
    kinds = [o.kind for o in occs]
    if len(set(kinds)) != len(kinds):
        raise DuplicateOccurrenceType(f"duplicate occurrence kinds: {kinds}")
    alternatives: list[tuple[AmbiguityType, Hypothesis | _Placeholder]] = []
    for occ in occs:
        if occ.kind in PLACEHOLDER_KINDS:
            alternatives.append((occ.kind, PLACEHOLDER))
        else:
            assert occ.alt_index is not None
            if occ.alt_index >= len(hlist):
                raise AltIndexOutOfRange(
                    f"alt_index {occ.alt_index} out of range for list of {len(hlist)}"
                )
            alternatives.append((occ.kind, hlist[occ.alt_index]))
    present = {o.kind for o in occs}
    vector = tuple(kind in present for kind in OCCURRENCE_ORDER)
    return DecisionInput(
        top=hlist.top,
        alternatives=tuple(alternatives),
        occurrence_vector=vector,  # type: ignore[arg-type]
        snr_norm=normalize_snr(ctx.snr_raw, ctx.snr_norm_bounds),
        repetition=ctx.repetition,
    )


# ---------------------------------------------------------------------------
# JSON-lines record schema
# ---------------------------------------------------------------------------
# One object per line. Hypothesis-level field names: transcript, asr_conf,
# domain, intent, intent_conf, slots, hyp_conf, rank (under "hypotheses");
# turn-level: occurrences, snr_raw, repetition, label.


def example_to_record(ex: LabeledExample) -> dict:
    return {
        "hypotheses": [
            {
                "transcript": " ".join(h.transcript),
                "asr_conf": h.asr_conf,
                "domain": h.domain,
                "intent": h.intent,
                "intent_conf": h.intent_conf,
                "slots": [[k, " ".join(v)] for k, v in h.slots],
                "hyp_conf": h.hyp_conf,
                "rank": h.rank,
            }
            for h in ex.hypotheses.hypotheses
        ],
        "occurrences": [
            {"kind": o.kind.value, "alt_index": o.alt_index} for o in ex.occurrences
        ],
        "snr_raw": ex.context.snr_raw,
        "repetition": ex.context.repetition,
        "label": ex.label,
    }


def example_to_json(ex: LabeledExample) -> str:
    return json.dumps(example_to_record(ex), sort_keys=True)


_REQUIRED_TURN_FIELDS = ("hypotheses", "occurrences", "snr_raw", "repetition", "label")
_REQUIRED_HYP_FIELDS = (
    "transcript",
    "asr_conf",
    "domain",
    "intent",
    "intent_conf",
    "slots",
    "hyp_conf",
    "rank",
)


def record_to_example(
    record: dict,
    line_no: int = 0,
    snr_norm_bounds: tuple[float, float] = (0.0, 40.0),
) -> LabeledExample:
    """Decode one record dict; raises MalformedRecord with the line number.

    The record stores the raw SNR; normalization bounds are configuration
    and must be supplied by the reader.
    """
    try:
        for name in _REQUIRED_TURN_FIELDS:
            if name not in record:
                raise KeyError(name)
        hyps = []
        for hrec in record["hypotheses"]:
            for name in _REQUIRED_HYP_FIELDS:
                if name not in hrec:
                    raise KeyError(name)
            hyps.append(
                Hypothesis(
                    transcript=tuple(str(hrec["transcript"]).split()),
                    asr_conf=float(hrec["asr_conf"]),
                    domain=str(hrec["domain"]),
                    intent=str(hrec["intent"]),
                    intent_conf=float(hrec["intent_conf"]),
                    slots=tuple(
                        (str(k), tuple(str(v).split())) for k, v in hrec["slots"]
                    ),
                    hyp_conf=None if hrec["hyp_conf"] is None else float(hrec["hyp_conf"]),
                    rank=int(hrec["rank"]),
                )
            )
        occs = tuple(
            AmbiguityOccurrence(
                kind=AmbiguityType(orec["kind"]),
                alt_index=None if orec.get("alt_index") is None else int(orec["alt_index"]),
            )
            for orec in record["occurrences"]
        )
        return LabeledExample(
            hypotheses=HypothesisList(tuple(hyps)),
            occurrences=occs,
            context=TurnContext(
                snr_raw=float(record["snr_raw"]),
                repetition=bool(record["repetition"]),
                snr_norm_bounds=snr_norm_bounds,
            ),
            label=bool(record["label"]),
        )
    except MalformedRecord:
        raise
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise MalformedRecord(line_no, f"{type(exc).__name__}: {exc}") from exc


def json_to_example(
    line: str,
    line_no: int = 0,
    snr_norm_bounds: tuple[float, float] = (0.0, 40.0),
) -> LabeledExample:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(line_no, f"invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise MalformedRecord(line_no, "record is not a JSON object")
    return record_to_example(record, line_no, snr_norm_bounds)
