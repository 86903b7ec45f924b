"""Synthetic SLU-log generator with weak ask/no-ask supervision.

Each generated turn starts from a latent truth (what the user wanted: a
rendered template with a domain, intent, and slot filler). The generator
injects one primary ambiguity, optionally one compatible co-occurring
ambiguity, and realizes them as hypothesis rows that the threshold
detectors provably fire on; generation re-runs the detectors and raises
InjectionFailed on any mismatch.

Labeling follows the weak-supervision rule: a turn is labeled ask exactly
when at least one ambiguity occurred AND the (noisy) satisfaction signal
says the user was not satisfied. Satisfaction is the planted rule "the top
interpretation matches the latent truth". Wrongness of the top is encoded
in feature-visible patterns so the decision model has something to learn:

* ASR / IC: when the top is wrong, the alternative's native confidence
  (ASR confidence / intent confidence) lands ABOVE the top's, still inside
  the detector window; when right, below. The window placement keeps the
  direction balanced, so the top's own confidence carries no signal.
* HC: competing provider domains; the alternative's intent confidence
  lands far above or below the top's (outside the IC window, so no
  cross-firing), directed the same way.
* SNR: the raw SNR lands in a lower band when the top is wrong; a wrong
  top also swaps the slot filler for another uniformly drawn one, so
  transcript content itself leaks nothing.
* TRUNC: the truncated top keeps or loses user satisfaction via the intent
  confidence band.

Configured per-type ask rates are the OBSERVED post-noise rates: the
internal pre-noise rate is adjusted for the label-flip rate, which models
satisfaction-model error and is applied to the satisfaction bit only, so a
turn without ambiguity is never labeled ask.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .detectors import DetectorConfig, detect_all
from .types import (
    AmbiguityOccurrence,
    AmbiguityType,
    ClarigateError,
    Hypothesis,
    HypothesisList,
    LabeledExample,
    MalformedRecord,
    TurnContext,
    example_to_json,
    json_to_example,
)


class InjectionFailed(ClarigateError):
    """A configured ambiguity cannot be realized under the detector thresholds."""


class GrammarError(ClarigateError):
    pass


# ---------------------------------------------------------------------------
# template grammar
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Template:
    """One utterance pattern; the optional {slot} expands from fillers."""

    domain: str
    intent: str
    text: str
    slot_key: str | None = None
    competitors: tuple[str, ...] = ()
    providers: tuple[str, ...] = ()


@dataclass(frozen=True)
class Grammar:
    templates: tuple[Template, ...]
    fillers: dict[str, tuple[str, ...]]
    confusions: tuple[tuple[str, str], ...]
    intent_slot_keys: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "_confusable", _confusion_map(self.confusions))
        object.__setattr__(self, "_intent_domain", _intent_domains(self.templates))

    def confusion_partner(self, token: str) -> str | None:
        return self._confusable.get(token)

    def domain_of_intent(self, intent: str) -> str:
        return self._intent_domain[intent]


def _confusion_map(pairs: Iterable[tuple[str, str]]) -> dict[str, str]:
    out: dict[str, str] = {}
    for a, b in pairs:
        out[a] = b
        out[b] = a
    return out


def _intent_domains(templates: Iterable[Template]) -> dict[str, str]:
    out: dict[str, str] = {}
    for t in templates:
        existing = out.get(t.intent)
        if existing is not None and existing != t.domain:
            raise GrammarError(f"intent {t.intent} appears in domains {existing} and {t.domain}")
        out[t.intent] = t.domain
    return out


def default_grammar() -> Grammar:
    templates = (
        Template("Timer", "SetTimer", "set a timer for {duration} minutes", "duration", ("SetAlarm",)),
        Template("Timer", "SetTimer", "set a {duration} minute timer", "duration", ("SetAlarm",)),
        Template("Timer", "CancelTimer", "cancel the timer", None, ("PauseTimer",)),
        Template("Timer", "PauseTimer", "pause the timer", None, ("CancelTimer",)),
        Template("Alarm", "SetAlarm", "set an alarm for {clock} am", "clock", ("SetTimer",)),
        Template("Alarm", "CancelAlarm", "cancel my {clock} am alarm", "clock", ()),
        Template("Music", "PlayMusic", "play {songname}", "songname", ("PlayVideo", "ReadBook")),
        Template("Music", "PlayMusic", "play some {genre}", "genre", ()),
        Template("Music", "PlayComposer", "music composed by {artist}", "artist", ()),
        Template("Music", "NextTrack", "skip to the next song", None, ()),
        Template("Music", "PauseMusic", "pause the music", None, ()),
        Template("Video", "PlayVideo", "watch {videotitle}", "videotitle", ("ReadBook", "PlayMusic")),
        Template("Video", "PlayVideo", "put on {videotitle}", "videotitle", ("PlayMusic",)),
        Template("Books", "ReadBook", "read {booktitle}", "booktitle", ("PlayVideo",)),
        Template("SmartHome", "TurnOnDevice", "turn on the {device}", "device", ("TurnOffDevice",)),
        Template("SmartHome", "TurnOffDevice", "turn off the {device}", "device", ("TurnOnDevice",)),
        Template("SmartHome", "DimLights", "dim the lights in the {room}", "room", ()),
        Template("SmartHome", "LockDoor", "lock the {entrance} door", "entrance", ()),
        Template("Weather", "GetWeather", "what is the weather in {city}", "city", ("GetForecast",)),
        Template("Weather", "GetForecast", "what is the forecast for {city}", "city", ("GetWeather",)),
        Template("Shopping", "AddToList", "add {item} to my list", "item", ("RemoveFromList",)),
        Template("Shopping", "RemoveFromList", "remove {item} from my list", "item", ("AddToList",)),
        Template("Shopping", "ReorderItem", "order more {item}", "item", ()),
        Template("Rides", "BookRide", "get me a ride to the {place}", "place", (), ("MetroCab", "CityRide")),
        Template("Rides", "BookRide", "book a cab to the {place}", "place", (), ("MetroCab", "CityRide")),
        Template("Food", "OrderFood", "order a {dish} for dinner", "dish", (), ("QuickEats", "DashFood")),
        Template("Knowledge", "GetWiki", "who is {person}", "person", ()),
        Template("Knowledge", "AskFact", "how tall is {person}", "person", ()),
        Template("Comms", "CallContact", "call {contact} for me", "contact", ("SendText",)),
        Template("Comms", "SendText", "text {contact} for me", "contact", ("CallContact",)),
    )
    fillers = {
        "duration": ("fifteen", "fifty", "thirteen", "thirty", "fourteen", "forty",
                     "sixteen", "sixty", "seventeen", "seventy", "ten", "twenty"),
        "clock": ("six", "seven", "eight", "nine", "five"),
        "songname": ("thriller", "yesterday", "hallelujah", "wonderwall", "firework"),
        "genre": ("jazz", "rock", "blues", "classical", "country"),
        "artist": ("mozart", "beethoven", "bach", "adele", "prince"),
        "videotitle": ("frozen", "inception", "coco", "moana", "harry potter", "brave"),
        "booktitle": ("harry potter", "dune", "emma", "holes", "matilda"),
        "device": ("light", "fan", "tv", "heater", "radio", "lamp"),
        "room": ("kitchen", "bedroom", "garage", "office"),
        "entrance": ("front", "back", "side"),
        "city": ("boston", "austin", "seattle", "denver", "paris", "london"),
        "item": ("milk", "eggs", "bread", "coffee", "rice", "soap"),
        "place": ("airport", "station", "mall", "stadium"),
        "dish": ("pizza", "sushi", "burger", "tacos", "salad"),
        "person": ("lincoln", "einstein", "curie", "tesla", "cleopatra"),
        "contact": ("mom", "dad", "alex", "sam", "jordan", "taylor"),
    }
    confusions = (
        ("fifteen", "fifty"), ("thirteen", "thirty"), ("fourteen", "forty"),
        ("sixteen", "sixty"), ("seventeen", "seventy"),
        ("harry", "larry"), ("moana", "mona"), ("dune", "june"), ("brave", "grave"),
        ("light", "night"), ("fan", "van"), ("lamp", "camp"),
        ("boston", "austin"), ("milk", "silk"), ("rice", "ice"),
        ("six", "sticks"), ("nine", "wine"),
    )
    intent_slot_keys = {
        "PlayVideo": "videotitle",
        "ReadBook": "booktitle",
        "PlayMusic": "songname",
        "SetAlarm": "clock",
        "SetTimer": "duration",
        "RemoveFromList": "item",
        "AddToList": "item",
        "GetForecast": "city",
        "GetWeather": "city",
        "TurnOnDevice": "device",
        "TurnOffDevice": "device",
        "SendText": "contact",
        "CallContact": "contact",
    }
    return Grammar(templates, fillers, confusions, intent_slot_keys)


def validate_grammar(grammar: Grammar, trunc_lexicon: frozenset[str]) -> None:
    """A rendered utterance must never end in a truncation-lexicon word,
    otherwise clean turns would fire the truncation detector."""
    for t in grammar.templates:
        tokens = t.text.split()
        if not tokens:
            raise GrammarError(f"empty template in {t.domain}/{t.intent}")
        if t.intent in t.competitors:
            raise GrammarError(f"template {t.text!r} lists its own intent as a competitor")
        if t.slot_key is not None:
            if "{" + t.slot_key + "}" not in tokens:
                raise GrammarError(f"template {t.text!r} does not mention slot {t.slot_key}")
            if t.slot_key not in grammar.fillers or not grammar.fillers[t.slot_key]:
                raise GrammarError(f"no fillers for slot {t.slot_key}")
        last = tokens[-1]
        if last.startswith("{"):
            key = last[1:-1]
            for filler in grammar.fillers.get(key, ()):
                if filler.split()[-1] in trunc_lexicon:
                    raise GrammarError(
                        f"filler {filler!r} would end template {t.text!r} in a truncation word"
                    )
        elif last in trunc_lexicon:
            raise GrammarError(f"template {t.text!r} ends in truncation word {last!r}")


def save_grammar(path: str | Path, grammar: Grammar) -> None:
    payload = {
        "templates": [
            {
                "domain": t.domain,
                "intent": t.intent,
                "text": t.text,
                "slot_key": t.slot_key,
                "competitors": list(t.competitors),
                "providers": list(t.providers),
            }
            for t in grammar.templates
        ],
        "fillers": {k: list(v) for k, v in grammar.fillers.items()},
        "confusions": [list(pair) for pair in grammar.confusions],
        "intent_slot_keys": grammar.intent_slot_keys,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_grammar(path: str | Path) -> Grammar:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return Grammar(
            templates=tuple(
                Template(
                    domain=t["domain"],
                    intent=t["intent"],
                    text=t["text"],
                    slot_key=t.get("slot_key"),
                    competitors=tuple(t.get("competitors", ())),
                    providers=tuple(t.get("providers", ())),
                )
                for t in payload["templates"]
            ),
            fillers={k: tuple(v) for k, v in payload["fillers"].items()},
            confusions=tuple((a, b) for a, b in payload["confusions"]),
            intent_slot_keys=dict(payload["intent_slot_keys"]),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise GrammarError(f"cannot load grammar from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# the planted satisfaction rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatentTruth:
    """What the user actually wanted, as the satisfaction model sees it."""

    transcript: tuple[str, ...]
    domain: str
    intent: str


def planted_rule(truth: LatentTruth, top: Hypothesis) -> bool:
    """Satisfied exactly when the top interpretation matches the truth."""
    return (
        truth.transcript == top.transcript
        and truth.domain == top.domain
        and truth.intent == top.intent
    )


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

INJECTABLE = (
    AmbiguityType.ASR,
    AmbiguityType.IC,
    AmbiguityType.HC,
    AmbiguityType.SNR,
    AmbiguityType.TRUNC,
)

# Which kinds may co-occur with a given primary kind. Directional, so the
# transcript is owned by at most one injector (ASR and TRUNC both rewrite it).
PARTNERS: dict[AmbiguityType, tuple[AmbiguityType, ...]] = {
    AmbiguityType.ASR: (AmbiguityType.IC, AmbiguityType.HC, AmbiguityType.SNR),
    AmbiguityType.IC: (AmbiguityType.HC, AmbiguityType.SNR),
    AmbiguityType.HC: (AmbiguityType.IC, AmbiguityType.SNR),
    AmbiguityType.SNR: (AmbiguityType.IC, AmbiguityType.HC),
    AmbiguityType.TRUNC: (AmbiguityType.IC, AmbiguityType.SNR),
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Mix, rates, and noise knobs of the generator.

    Injection rates are mixture weights over the primary ambiguity kind
    (normalized internally; all-zero means no ambiguity at all). Ask rates
    are the target OBSERVED per-kind ask rates; defaults follow the
    dataset-size ratios of the production traffic mix, which lands the
    overall ask rate near 0.23.
    """

    n_examples: int = 10000
    seed: int = 0
    inject_asr: float = 0.151
    inject_ic: float = 0.148
    inject_hc: float = 0.011
    inject_snr: float = 0.599
    inject_trunc: float = 0.092
    ask_asr: float = 0.170
    ask_ic: float = 0.109
    ask_hc: float = 0.268
    ask_snr: float = 0.209
    ask_trunc: float = 0.607
    cooccur_rate: float = 0.1
    label_flip_rate: float = 0.05
    hyp_conf_missing_rate: float = 0.05
    rep_rate_sat: float = 0.05
    rep_rate_unsat: float = 0.25

    def __post_init__(self):
        if self.n_examples < 1:
            raise ClarigateError("n_examples must be >= 1")
        for name in (
            "inject_asr", "inject_ic", "inject_hc", "inject_snr", "inject_trunc",
            "ask_asr", "ask_ic", "ask_hc", "ask_snr", "ask_trunc",
            "cooccur_rate", "label_flip_rate", "hyp_conf_missing_rate",
            "rep_rate_sat", "rep_rate_unsat",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ClarigateError(f"{name}={value} outside [0, 1]")
        if self.label_flip_rate >= 0.5:
            raise ClarigateError("label_flip_rate must be < 0.5")

    def injection_weights(self) -> dict[AmbiguityType, float]:
        return {
            AmbiguityType.ASR: self.inject_asr,
            AmbiguityType.IC: self.inject_ic,
            AmbiguityType.HC: self.inject_hc,
            AmbiguityType.SNR: self.inject_snr,
            AmbiguityType.TRUNC: self.inject_trunc,
        }

    def ask_rate(self, kind: AmbiguityType) -> float:
        return {
            AmbiguityType.ASR: self.ask_asr,
            AmbiguityType.IC: self.ask_ic,
            AmbiguityType.HC: self.ask_hc,
            AmbiguityType.SNR: self.ask_snr,
            AmbiguityType.TRUNC: self.ask_trunc,
        }[kind]

    def preflip_rate(self, kind: AmbiguityType) -> float:
        """Pre-noise unsatisfied rate whose post-flip observation hits the target."""
        f = self.label_flip_rate
        target = self.ask_rate(kind)
        if not f <= target <= 1.0 - f:
            raise InjectionFailed(
                f"ask rate {target} for {kind.value} unreachable under label_flip_rate {f}"
            )
        return (target - f) / (1.0 - 2.0 * f)


# ---------------------------------------------------------------------------
# confidence windows derived from the detector thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Windows:
    asr_top: tuple[float, float]
    asr_delta: tuple[float, float]
    ic_top: tuple[float, float]
    ic_delta: tuple[float, float]
    hc_hyp_top: tuple[float, float]
    hc_hyp_delta: tuple[float, float]
    hc_ic_top: tuple[float, float]
    hc_ic_delta: tuple[float, float]
    trunc_ic_unsat: tuple[float, float]
    trunc_ic_sat: tuple[float, float]
    snr_unsat: tuple[float, float]
    snr_sat: tuple[float, float]
    snr_clean: tuple[float, float]
    hyp_top: tuple[float, float]
    hyp_low_ceiling_gap: float  # non-HC alt hyp_conf stays this far below top - hc gap


def build_windows(det: DetectorConfig) -> _Windows:
    asr_dmax = min(0.05, 0.8 * det.asr_conf_gap)
    asr_dmin = min(0.02, asr_dmax / 2)
    asr_top = (det.asr_conf_floor + asr_dmax + 0.01, 0.98 - asr_dmax)
    if asr_top[0] >= asr_top[1]:
        raise InjectionFailed(
            f"ASR window empty for floor={det.asr_conf_floor} gap={det.asr_conf_gap}"
        )
    ic_dmax = min(0.16, 0.8 * det.ic_conf_gap)
    ic_dmin = min(0.04, ic_dmax / 2)
    ic_top = (det.ic_conf_floor + ic_dmax + 0.02, 0.97 - ic_dmax)
    if ic_top[0] >= ic_top[1]:
        raise InjectionFailed(
            f"IC window empty for floor={det.ic_conf_floor} gap={det.ic_conf_gap}"
        )
    hyp_top = (0.72, 0.92)
    if hyp_top[0] - det.hc_conf_gap - 0.06 <= 0.12:
        raise InjectionFailed(f"hc_conf_gap {det.hc_conf_gap} leaves no room for low-rank rows")
    hc_ic_delta = (det.ic_conf_gap + 0.05, det.ic_conf_gap + 0.15)
    hc_ic_top = (hc_ic_delta[1] + 0.02, 0.97 - hc_ic_delta[1])
    if hc_ic_top[0] >= hc_ic_top[1]:
        raise InjectionFailed(f"ic_conf_gap {det.ic_conf_gap} leaves no HC confidence band")
    thr = det.snr_threshold
    if thr <= 0:
        raise InjectionFailed(f"snr_threshold {thr} must be positive to inject SNR ambiguity")
    return _Windows(
        asr_top=asr_top,
        asr_delta=(asr_dmin, asr_dmax),
        ic_top=ic_top,
        ic_delta=(ic_dmin, ic_dmax),
        hc_hyp_top=hyp_top,
        hc_hyp_delta=(min(0.01, 0.45 * det.hc_conf_gap), 0.9 * det.hc_conf_gap),
        hc_ic_top=hc_ic_top,
        hc_ic_delta=hc_ic_delta,
        trunc_ic_unsat=(0.25, 0.45),
        trunc_ic_sat=(0.65, 0.85),
        snr_unsat=(0.05 * thr, 0.35 * thr),
        snr_sat=(0.65 * thr, 0.95 * thr),
        snr_clean=(thr + 5.0, thr + 30.0),
        hyp_top=hyp_top,
        hyp_low_ceiling_gap=det.hc_conf_gap + 0.06,
    )


def _u(rng: random.Random, band: tuple[float, float]) -> float:
    return rng.uniform(band[0], band[1])


def _rng_for(seed: int, tag) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _weighted_choice(rng: random.Random, weights: dict[AmbiguityType, float]):
    total = sum(weights.values())
    if total <= 0.0:
        return None
    x = rng.random() * total
    acc = 0.0
    last = None
    for kind in INJECTABLE:
        w = weights.get(kind, 0.0)
        if w <= 0.0:
            continue
        acc += w
        last = kind
        if x < acc:
            return kind
    return last


# ---------------------------------------------------------------------------
# per-kind template support
# ---------------------------------------------------------------------------


def _confusable_fillers(grammar: Grammar, slot_key: str) -> tuple[str, ...]:
    out = []
    for filler in grammar.fillers.get(slot_key, ()):
        if any(grammar.confusion_partner(tok) for tok in filler.split()):
            out.append(filler)
    return tuple(out)


def _supports(grammar: Grammar, t: Template, kind: AmbiguityType, lexicon: frozenset[str]) -> bool:
    if kind is AmbiguityType.ASR:
        return t.slot_key is not None and bool(_confusable_fillers(grammar, t.slot_key))
    if kind is AmbiguityType.IC:
        return bool(t.competitors)
    if kind is AmbiguityType.HC:
        return len(t.providers) >= 2
    if kind is AmbiguityType.SNR:
        return t.slot_key is not None
    if kind is AmbiguityType.TRUNC:
        return any(tok in lexicon for tok in t.text.split()[:-1])
    return False


# ---------------------------------------------------------------------------
# example construction
# ---------------------------------------------------------------------------


@dataclass
class _Row:
    """Mutable hypothesis row under construction; marker ties it to its kind."""

    transcript: tuple[str, ...]
    asr_conf: float
    domain: str
    intent: str
    intent_conf: float
    slots: tuple[tuple[str, tuple[str, ...]], ...]
    hyp_conf: float | None
    marker: AmbiguityType | None = None


class Generator:
    """Deterministic example factory; every draw derives from (seed, index)."""

    def __init__(
        self,
        cfg: GeneratorConfig,
        det: DetectorConfig | None = None,
        grammar: Grammar | None = None,
    ):
        self.cfg = cfg
        self.det = det if det is not None else DetectorConfig()
        self.grammar = grammar if grammar is not None else default_grammar()
        validate_grammar(self.grammar, self.det.trunc_lexicon)
        self.windows = build_windows(self.det)
        weights = cfg.injection_weights()
        self._by_kind: dict[AmbiguityType, tuple[Template, ...]] = {}
        for kind in INJECTABLE:
            if weights.get(kind, 0.0) > 0.0:
                supported = tuple(
                    t for t in self.grammar.templates
                    if _supports(self.grammar, t, kind, self.det.trunc_lexicon)
                )
                if not supported:
                    raise InjectionFailed(f"no template supports {kind.value} ambiguity")
                self._by_kind[kind] = supported
        # preflip rates validated eagerly
        for kind in INJECTABLE:
            if weights.get(kind, 0.0) > 0.0:
                cfg.preflip_rate(kind)

    # -- public -----------------------------------------------------------

    def generate(self, n: int | None = None) -> list[LabeledExample]:
        n = self.cfg.n_examples if n is None else n
        return [self.example(i) for i in range(n)]

    def example(self, index: int) -> LabeledExample:
        rng = _rng_for(self.cfg.seed, index)
        cfg, det, win, grammar = self.cfg, self.det, self.windows, self.grammar

        primary = _weighted_choice(rng, cfg.injection_weights())
        template: Template | None = None
        partner = None
        if primary is not None:
            template = self._pick_template(rng, primary)
            if rng.random() < cfg.cooccur_rate:
                options = [
                    u for u in PARTNERS[primary]
                    if _supports(grammar, template, u, det.trunc_lexicon)
                ]
                if options:
                    partner = rng.choice(options)
        else:
            template = rng.choice(grammar.templates)
        kinds = {k for k in (primary, partner) if k is not None}

        unsat = primary is not None and rng.random() < cfg.preflip_rate(primary)

        # latent truth rendering
        filler: str | None = None
        if template.slot_key is not None:
            if AmbiguityType.ASR in kinds:
                filler = rng.choice(_confusable_fillers(grammar, template.slot_key))
            else:
                filler = rng.choice(grammar.fillers[template.slot_key])
        truth_tokens = _render(template, filler)

        top = self._base_top(rng, template, truth_tokens, filler, kinds, primary, unsat)
        truth = LatentTruth(truth_tokens, template.domain, template.intent)

        # Injectors that rewrite the top transcript run before any
        # alternative row copies it.
        alts: list[_Row] = []
        if AmbiguityType.TRUNC in kinds:
            self._inject_trunc(rng, top)
        if primary is AmbiguityType.SNR:
            truth = self._corrupt_for_snr(rng, template, top, truth, unsat)
        if AmbiguityType.ASR in kinds:
            truth = self._inject_asr(rng, top, alts, truth, unsat, primary)
        if AmbiguityType.IC in kinds:
            truth = self._inject_ic(rng, template, top, alts, truth, unsat, primary)
        if AmbiguityType.HC in kinds:
            truth = self._inject_hc(rng, template, top, alts, truth, unsat, primary)
        if primary is AmbiguityType.TRUNC and unsat:
            truth = LatentTruth(truth_tokens, template.domain, template.intent)
        if primary is None or not unsat:
            truth = LatentTruth(top.transcript, top.domain, top.intent)
        snr_raw = _u(
            rng,
            (win.snr_unsat if unsat else win.snr_sat)
            if AmbiguityType.SNR in kinds
            else win.snr_clean,
        )

        assert planted_rule(truth, _row_to_hypothesis(top, 1)) == (not unsat)
        hlist, occurrences = self._finalize(rng, top, alts, snr_raw, kinds)

        rep_rate = cfg.rep_rate_unsat if unsat else cfg.rep_rate_sat
        repetition = rng.random() < rep_rate
        context = TurnContext(snr_raw=snr_raw, repetition=repetition)

        unsat_observed = unsat != (rng.random() < cfg.label_flip_rate)
        label = bool(kinds) and unsat_observed
        return LabeledExample(
            hypotheses=hlist, occurrences=occurrences, context=context, label=label
        )

    # -- internals ----------------------------------------------------------

    def _pick_template(self, rng: random.Random, kind: AmbiguityType) -> Template:
        return rng.choice(self._by_kind[kind])

    def _base_top(
        self,
        rng: random.Random,
        template: Template,
        truth_tokens: tuple[str, ...],
        filler: str | None,
        kinds: set[AmbiguityType],
        primary: AmbiguityType | None,
        unsat: bool,
    ) -> _Row:
        win = self.windows
        if AmbiguityType.ASR in kinds:
            asr_conf = _u(rng, win.asr_top)
        else:
            asr_conf = rng.uniform(0.84, 0.98)
        if AmbiguityType.IC in kinds:
            intent_conf = _u(rng, win.ic_top)
        elif AmbiguityType.HC in kinds:
            intent_conf = _u(rng, win.hc_ic_top)
        elif primary is AmbiguityType.TRUNC:
            intent_conf = _u(rng, win.trunc_ic_unsat if unsat else win.trunc_ic_sat)
        else:
            intent_conf = rng.uniform(0.80, 0.97)
        if AmbiguityType.HC not in kinds and rng.random() < self.cfg.hyp_conf_missing_rate:
            hyp_conf = None
        else:
            hyp_conf = _u(rng, win.hyp_top)
        domain = template.domain
        slots = ((template.slot_key, tuple(filler.split())),) if filler is not None else ()
        return _Row(
            transcript=truth_tokens,
            asr_conf=asr_conf,
            domain=domain,
            intent=template.intent,
            intent_conf=intent_conf,
            slots=slots,
            hyp_conf=hyp_conf,
        )

    def _alt_hyp_conf(self, rng: random.Random, top: _Row) -> float | None:
        if top.hyp_conf is None:
            return None
        ceiling = top.hyp_conf - self.windows.hyp_low_ceiling_gap
        return rng.uniform(0.12, ceiling)

    def _inject_trunc(self, rng: random.Random, top: _Row) -> None:
        tokens = top.transcript
        cuts = [
            i for i in range(len(tokens) - 1) if tokens[i] in self.det.trunc_lexicon
        ]
        if not cuts:
            raise InjectionFailed(f"no truncation point in {' '.join(tokens)!r}")
        cut = rng.choice(cuts)
        top.transcript = tokens[: cut + 1]
        top.slots = ()

    def _inject_asr(
        self,
        rng: random.Random,
        top: _Row,
        alts: list[_Row],
        truth: LatentTruth,
        unsat: bool,
        primary: AmbiguityType | None,
    ) -> LatentTruth:
        grammar = self.grammar
        win = self.windows
        value_tokens = {tok for _, value in top.slots for tok in value}
        swap_positions = [
            i
            for i, tok in enumerate(top.transcript)
            if tok in value_tokens and grammar.confusion_partner(tok)
        ]
        if not swap_positions:
            raise InjectionFailed(f"no confusable slot token in {' '.join(top.transcript)!r}")
        pos = rng.choice(swap_positions)
        old = top.transcript[pos]
        new = grammar.confusion_partner(old)
        alt_tokens = top.transcript[:pos] + (new,) + top.transcript[pos + 1 :]
        alt_slots = tuple(
            (key, tuple(new if v == old else v for v in value)) for key, value in top.slots
        )
        delta = _u(rng, win.asr_delta)
        alt_asr = top.asr_conf + delta if unsat else top.asr_conf - delta
        alt = _Row(
            transcript=alt_tokens,
            asr_conf=alt_asr,
            domain=top.domain,
            intent=top.intent,
            intent_conf=max(0.0, top.intent_conf - rng.uniform(0.0, 0.04)),
            slots=alt_slots,
            hyp_conf=self._alt_hyp_conf(rng, top),
            marker=AmbiguityType.ASR,
        )
        alts.append(alt)
        if unsat and primary is AmbiguityType.ASR:
            return LatentTruth(alt_tokens, top.domain, top.intent)
        return truth

    def _inject_ic(
        self,
        rng: random.Random,
        template: Template,
        top: _Row,
        alts: list[_Row],
        truth: LatentTruth,
        unsat: bool,
        primary: AmbiguityType | None,
    ) -> LatentTruth:
        grammar = self.grammar
        win = self.windows
        competitor = rng.choice(template.competitors)
        comp_domain = grammar.domain_of_intent(competitor)
        if top.slots:
            comp_key = grammar.intent_slot_keys.get(competitor, top.slots[0][0])
            comp_slots = ((comp_key, top.slots[0][1]),)
        else:
            comp_slots = ()
        delta = _u(rng, win.ic_delta)
        alt_ic = top.intent_conf + delta if unsat else top.intent_conf - delta
        alt = _Row(
            transcript=top.transcript,
            asr_conf=top.asr_conf,
            domain=comp_domain,
            intent=competitor,
            intent_conf=alt_ic,
            slots=comp_slots,
            hyp_conf=self._alt_hyp_conf(rng, top),
            marker=AmbiguityType.IC,
        )
        alts.append(alt)
        if unsat and primary is AmbiguityType.IC:
            return LatentTruth(top.transcript, comp_domain, competitor)
        return truth

    def _inject_hc(
        self,
        rng: random.Random,
        template: Template,
        top: _Row,
        alts: list[_Row],
        truth: LatentTruth,
        unsat: bool,
        primary: AmbiguityType | None,
    ) -> LatentTruth:
        win = self.windows
        top_provider, alt_provider = rng.sample(list(template.providers), 2)
        top.domain = top_provider
        if top.hyp_conf is None:
            top.hyp_conf = _u(rng, win.hc_hyp_top)
        delta_ic = _u(rng, win.hc_ic_delta)
        alt_ic = top.intent_conf + delta_ic if unsat else top.intent_conf - delta_ic
        alt = _Row(
            transcript=top.transcript,
            asr_conf=top.asr_conf,
            domain=alt_provider,
            intent=top.intent,
            intent_conf=min(0.99, max(0.01, alt_ic)),
            slots=top.slots,
            hyp_conf=top.hyp_conf - _u(rng, win.hc_hyp_delta),
            marker=AmbiguityType.HC,
        )
        alts.append(alt)
        if unsat and primary is AmbiguityType.HC:
            return LatentTruth(top.transcript, alt_provider, top.intent)
        return truth

    def _corrupt_for_snr(
        self,
        rng: random.Random,
        template: Template,
        top: _Row,
        truth: LatentTruth,
        unsat: bool,
    ) -> LatentTruth:
        """A wrong top under noise heard a different same-slot filler.

        The replacement is drawn uniformly from the other fillers, so the
        realized transcript distribution is identical for satisfied and
        unsatisfied turns; only the SNR scalar carries the signal.
        """
        if not unsat:
            return truth
        assert template.slot_key is not None
        old_value = top.slots[0][1]
        candidates = [
            f for f in self.grammar.fillers[template.slot_key] if tuple(f.split()) != old_value
        ]
        if not candidates:
            raise InjectionFailed(f"slot {template.slot_key} has a single filler")
        heard = tuple(rng.choice(candidates).split())
        truth_tokens = top.transcript
        heard_tokens = _splice(top.transcript, old_value, heard)
        top.transcript = heard_tokens
        top.slots = ((template.slot_key, heard),)
        return LatentTruth(truth_tokens, top.domain, top.intent)

    def _finalize(
        self,
        rng: random.Random,
        top: _Row,
        alts: list[_Row],
        snr_raw: float,
        kinds: set[AmbiguityType],
    ):
        rows = [top] + sorted(
            alts, key=lambda r: -1.0 if r.hyp_conf is None else -r.hyp_conf
        )
        hyps = tuple(_row_to_hypothesis(row, rank) for rank, row in enumerate(rows, start=1))
        hlist = HypothesisList(hyps)
        context = TurnContext(snr_raw=snr_raw, repetition=False)
        detected = detect_all(hlist, context, self.det)
        detected_kinds = {occ.kind for occ in detected}
        if detected_kinds != kinds:
            raise InjectionFailed(
                f"injected {sorted(k.value for k in kinds)} but detected "
                f"{sorted(k.value for k in detected_kinds)} on {' '.join(top.transcript)!r}"
            )
        for occ in detected:
            if occ.alt_index is None:
                continue
            expected = next(i for i, row in enumerate(rows) if row.marker is occ.kind)
            if occ.alt_index != expected:
                raise InjectionFailed(
                    f"{occ.kind.value} detector chose row {occ.alt_index}, injected row {expected}"
                )
        return hlist, tuple(detected)


def _render(template: Template, filler: str | None) -> tuple[str, ...]:
    tokens: list[str] = []
    for tok in template.text.split():
        if tok.startswith("{"):
            assert filler is not None
            tokens.extend(filler.split())
        else:
            tokens.append(tok)
    return tuple(tokens)


def _splice(
    tokens: tuple[str, ...], old_value: tuple[str, ...], new_value: tuple[str, ...]
) -> tuple[str, ...]:
    """Replace the first occurrence of the old slot value span."""
    n = len(old_value)
    for i in range(len(tokens) - n + 1):
        if tokens[i : i + n] == old_value:
            return tokens[:i] + new_value + tokens[i + n :]
    raise InjectionFailed(f"slot value {' '.join(old_value)!r} not found in transcript")


def _row_to_hypothesis(row: _Row, rank: int) -> Hypothesis:
    return Hypothesis(
        transcript=row.transcript,
        asr_conf=min(0.995, max(0.0, row.asr_conf)),
        domain=row.domain,
        intent=row.intent,
        intent_conf=min(0.995, max(0.0, row.intent_conf)),
        slots=row.slots,
        hyp_conf=row.hyp_conf,
        rank=rank,
    )


# ---------------------------------------------------------------------------
# dataset assembly and IO
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplits:
    train: list[LabeledExample]
    valid: list[LabeledExample]
    test: list[LabeledExample]

    def all_examples(self) -> list[LabeledExample]:
        return self.train + self.valid + self.test


def generate_dataset(
    cfg: GeneratorConfig,
    det: DetectorConfig | None = None,
    grammar: Grammar | None = None,
) -> DatasetSplits:
    """Generate and split: second half (by index order, the stand-in for
    time) is the test set; the first half splits 9:1 into train/valid."""
    examples = Generator(cfg, det, grammar).generate()
    half = len(examples) // 2
    first, test = examples[:half], examples[half:]
    order = list(range(len(first)))
    _rng_for(cfg.seed, "split").shuffle(order)
    n_train = round(0.9 * len(first))
    train = [first[i] for i in order[:n_train]]
    valid = [first[i] for i in order[n_train:]]
    return DatasetSplits(train=train, valid=valid, test=test)


def write_dataset(path: str | Path, examples: Sequence[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


def read_dataset(
    path: str | Path, snr_norm_bounds: tuple[float, float] = (0.0, 40.0)
) -> list[LabeledExample]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(json_to_example(line, line_no, snr_norm_bounds))
    return out


def dataset_stats(examples: Sequence[LabeledExample]) -> dict:
    """Counts and ask rates, overall and per ambiguity kind."""
    n = len(examples)
    asks = sum(1 for ex in examples if ex.label)
    per_kind = {}
    for kind in INJECTABLE:
        members = [ex for ex in examples if kind in ex.type_tags]
        kind_asks = sum(1 for ex in members if ex.label)
        per_kind[kind.value] = {
            "total": len(members),
            "ask": kind_asks,
            "ask_rate": kind_asks / len(members) if members else 0.0,
        }
    return {
        "n_examples": n,
        "ask": asks,
        "ask_rate": asks / n if n else 0.0,
        "per_type": per_kind,
    }
