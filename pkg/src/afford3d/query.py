"""Functional query decomposition.

A query such as "the handle of the second drawer from the top" is split into a
context label ("drawer"), an interaction label ("handle"), a spatial
descriptor (ordinal 2 from the top) and an action class. With a language-model
backend the fixed Stage-1 prompt is used; without one a small keyword grammar
handles the descriptor classes the resolver understands.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources

from .errors import ContractViolation, ParseError

MAX_RETRIES = 2


class ActionClass(str, enum.Enum):
    ROTATE = "rotate"
    KEY_PRESS = "key_press"
    TIP_PUSH = "tip_push"
    HOOK_PULL = "hook_pull"
    PINCH_PULL = "pinch_pull"
    HOOK_TURN = "hook_turn"
    FOOT_PUSH = "foot_push"
    PLUG_IN = "plug_in"
    UNPLUG = "unplug"

    @classmethod
    def parse(cls, token: str) -> "ActionClass":
        tok = token.strip().strip("\"'`.").lower()
        try:
            return cls(tok)
        except ValueError:
            raise ParseError(f"unknown action {token!r}", raw=token) from None


DIRECTIONS = ("top", "bottom", "left", "right", "front", "back")
RELATIONS = ("left_of", "right_of", "above", "below", "next_to")


@dataclass(frozen=True)
class SpatialDescriptor:
    kind: str = "none"
    ordinal_rank: int | None = None
    direction: str | None = None
    relation: str | None = None
    reference_label: str | None = None

    def __post_init__(self):
        if self.kind == "ordinal":
            if not (self.ordinal_rank and self.ordinal_rank >= 1 and self.direction in DIRECTIONS):
                raise ContractViolation(f"bad ordinal descriptor {self}")
        elif self.kind == "relation":
            if self.relation not in RELATIONS or not self.reference_label:
                raise ContractViolation(f"bad relation descriptor {self}")
        elif self.kind == "nearest":
            if not self.reference_label:
                raise ContractViolation("nearest descriptor needs a reference label")
        elif self.kind != "none":
            raise ContractViolation(f"unknown descriptor kind {self.kind!r}")

    @classmethod
    def ordinal(cls, rank: int, direction: str) -> "SpatialDescriptor":
        return cls("ordinal", ordinal_rank=rank, direction=direction)

    @classmethod
    def related(cls, relation: str, reference: str) -> "SpatialDescriptor":
        return cls("relation", relation=relation, reference_label=reference)

    @classmethod
    def nearest(cls, reference: str) -> "SpatialDescriptor":
        return cls("nearest", reference_label=reference)

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class ParsedQuery:
    interaction_label: str
    action: ActionClass
    original_prompt: str
    context_label: str | None = None
    spatial: SpatialDescriptor = field(default_factory=SpatialDescriptor)
    functional_candidates: tuple = ()

    def __post_init__(self):
        if not self.interaction_label:
            raise ContractViolation("interaction label must be non-empty")

    def to_dict(self):
        return {"context_label": self.context_label, "interaction_label": self.interaction_label,
                "functional_candidates": list(self.functional_candidates), "action": self.action.value,
                "spatial": self.spatial.to_dict(), "original_prompt": self.original_prompt}

    @classmethod
    def from_dict(cls, d):
        return cls(d["interaction_label"], ActionClass(d["action"]), d["original_prompt"],
                   d["context_label"], SpatialDescriptor.from_dict(d["spatial"]),
                   tuple(d["functional_candidates"]))


# ---------------------------------------------------------------------------
# grammar

_ORDINAL_WORDS = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth", "ninth", "tenth"]
_ORDINAL_NUMS = ["1st", "2nd", "3rd", "4th", "5th", "6th", "7th", "8th", "9th", "10th"]
_RANK = {w: i + 1 for i, w in enumerate(_ORDINAL_WORDS)} | {w: i + 1 for i, w in enumerate(_ORDINAL_NUMS)}
_ORD = "|".join(_ORDINAL_WORDS + _ORDINAL_NUMS)
_STOP = {"on", "in", "at", "with", "and", "that", "which", "near", "from", "of", "to", "by", "for", "then"}

_ORDINAL_RE = re.compile(rf"\b({_ORD})\b(?:\s+[a-z\-]+){{0,3}}?\s+from\s+the\s+({'|'.join(DIRECTIONS)})\b")
_EXTREME_RE = re.compile(r"\b(top|bottom|upper|lower|leftmost|rightmost|topmost|bottommost)\b\s+[a-z]")
_NP = r"((?:[a-z][a-z\-]*\s*){1,4})"
_NEAREST_RE = re.compile(rf"\b(?:nearest|closest)\s+(?:to\s+)?the\s+{_NP}")
_RELATION_RE = re.compile(rf"\b(?:to\s+the\s+)?(left|right)\s+(?:of|to)\s+the\s+{_NP}")
_VERTICAL_RE = re.compile(rf"\b(above|below|under|beneath|over)\s+(?:of\s+)?the\s+{_NP}")
_NEXT_RE = re.compile(rf"\b(?:next\s+to|beside)\s+the\s+{_NP}")

_EXTREME = {"top": "top", "upper": "top", "topmost": "top", "bottom": "bottom", "lower": "bottom",
            "bottommost": "bottom", "leftmost": "left", "rightmost": "right"}


def _noun_phrase(words: str) -> str:
    out = []
    for w in words.split():
        if w in _STOP:
            break
        out.append(w)
    return singular(" ".join(out).strip(" -"))


def singular(word: str) -> str:
    w = word.strip().lower()
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    if w.endswith(("ches", "shes", "xes")) and len(w) > 4:
        return w[:-2]
    if w.endswith("s") and not w.endswith("ss") and len(w) > 3:
        return w[:-1]
    return w


def parse_spatial_descriptor(text: str) -> SpatialDescriptor:
    """Deterministic descriptor grammar; anything unmatched maps to kind ``none``."""
    t = " ".join((text or "").lower().replace(",", " , ").split())
    if not t or t in ("n/a", "na", "none"):
        return SpatialDescriptor()
    m = _ORDINAL_RE.search(t)
    if m:
        return SpatialDescriptor.ordinal(_RANK[m.group(1)], m.group(2))
    m = _NEAREST_RE.search(t)
    if m and _noun_phrase(m.group(1)):
        return SpatialDescriptor.nearest(_noun_phrase(m.group(1)))
    m = _RELATION_RE.search(t)
    if m and _noun_phrase(m.group(2)):
        return SpatialDescriptor.related(f"{m.group(1)}_of", _noun_phrase(m.group(2)))
    m = _VERTICAL_RE.search(t)
    if m and _noun_phrase(m.group(2)):
        rel = "above" if m.group(1) in ("above", "over") else "below"
        return SpatialDescriptor.related(rel, _noun_phrase(m.group(2)))
    m = _NEXT_RE.search(t)
    if m and _noun_phrase(m.group(1)):
        return SpatialDescriptor.related("next_to", _noun_phrase(m.group(1)))
    m = _EXTREME_RE.search(t)
    if m:
        return SpatialDescriptor.ordinal(1, _EXTREME[m.group(1)])
    return SpatialDescriptor()


# ---------------------------------------------------------------------------
# keyword fallback for labels and action

INTERACTIVE_WORDS = ("handle", "knob", "button", "switch", "socket", "outlet", "port", "keyhole",
                     "remote", "pedal", "lever", "latch", "dial", "valve", "faucet", "tap", "plug",
                     "key", "trigger", "pull")
CONTEXT_WORDS = ("drawer", "cabinet", "cupboard", "door", "window", "oven", "microwave", "fridge",
                 "refrigerator", "dishwasher", "wardrobe", "closet", "radiator", "toilet", "sink",
                 "lamp", "light", "tv", "television", "desk", "nightstand", "dresser", "shelf",
                 "stove", "bin", "wall", "bed", "table", "chair")

_ACTION_HINTS = [
    (r"\bunplug\b", ActionClass.UNPLUG),
    (r"\bplug\b.*\bin\b|\binsert\b|\bcharge\b", ActionClass.PLUG_IN),
    (r"\bpedal\b|\bstep on\b", ActionClass.FOOT_PUSH),
    (r"\btype\b|\bkey(?:board|pad)?\b", ActionClass.KEY_PRESS),
    (r"\bpress\b|\bpush\b|\bswitch (?:on|off)\b|\bturn (?:on|off) the light\b|\bbutton\b", ActionClass.TIP_PUSH),
    (r"\bpinch\b", ActionClass.PINCH_PULL),
    (r"\bknob\b|\bdial\b|\bvalve\b|\brotate\b|\btwist\b", ActionClass.ROTATE),
    (r"\bturn\b.*\bhandle\b|\bunlock\b", ActionClass.HOOK_TURN),
    (r"\bopen\b|\bclose\b|\bpull\b|\bhandle\b", ActionClass.HOOK_PULL),
]


def _find_words(text: str, vocab) -> list[tuple[int, str]]:
    hits = []
    for w in vocab:
        for m in re.finditer(rf"\b{re.escape(w)}(?:e?s)?\b", text):
            hits.append((m.start(), w))
    return sorted(hits)


def _heuristic_parse(q: str) -> ParsedQuery:
    t = q.lower()
    spatial = parse_spatial_descriptor(q)
    ints = [w for _, w in _find_words(t, INTERACTIVE_WORDS)]
    if not ints:
        raise ParseError(f"no interactive element found in {q!r}", raw=q)
    interaction = ints[0]
    ref = spatial.reference_label
    ctx = None
    m = re.search(r"\bof\s+the\s+(?:(?:" + _ORD + r"|top|bottom|upper|lower|left|right)\s+)?([a-z]+)", t)
    if m and singular(m.group(1)) in CONTEXT_WORDS and singular(m.group(1)) != ref:
        ctx = singular(m.group(1))
    if ctx is None:
        for _, w in _find_words(t, CONTEXT_WORDS):
            if w != ref:
                ctx = w
                break
    action = next((a for pat, a in _ACTION_HINTS if re.search(pat, t)), ActionClass.HOOK_PULL)
    cands = tuple(dict.fromkeys(ints))
    return ParsedQuery(interaction, action, q, ctx, spatial, cands)


# ---------------------------------------------------------------------------
# Stage-1 response


def stage1_prompt() -> str:
    return resources.files("afford3d.backends").joinpath("templates/stage1_parse.txt").read_text()


_FIELDS = ("contextual_object", "interactive_objects", "functional_object_candidates", "action",
           "spatial_relation", "original_prompt")


def _split_list(value: str) -> list[str]:
    v = value.strip().strip("[]")
    items = [singular(x.strip().strip("\"'`")) for x in re.split(r"[,;]", v)]
    return [x for x in items if x and x not in ("none", "n/a")]


def parse_stage1_response(raw: str, q: str) -> ParsedQuery:
    """Parse the fixed-order field lines of a Stage-1 reply."""
    lines = [ln.strip() for ln in raw.strip().splitlines() if ln.strip()]
    named = {}
    positional = []
    for ln in lines:
        m = re.match(r"^(?:\d+[.)]\s*)?([a-z_]+)(?:\s*\[x,\s*y\])?\s*:\s*(.*)$", ln, re.I)
        if m and m.group(1).lower() in _FIELDS:
            named[m.group(1).lower()] = m.group(2).strip()
        else:
            positional.append(ln)
    if named:
        fields = named
    elif len(positional) in (5, 6):
        keys = _FIELDS if len(positional) == 6 else _FIELDS[:2] + _FIELDS[3:]
        fields = dict(zip(keys, positional))
    else:
        raise ParseError(f"expected 6 field lines, got {len(lines)}", raw=raw)
    for required in ("contextual_object", "interactive_objects", "action", "spatial_relation"):
        if required not in fields:
            raise ParseError(f"missing field {required!r}", raw=raw)

    ints = _split_list(fields["interactive_objects"])
    if not ints:
        raise ParseError("no interactive object in response", raw=raw)
    ctx_raw = fields["contextual_object"].strip().strip("\"'`")
    ctx = None if ctx_raw.lower() in ("none", "n/a", "") else singular(ctx_raw)
    funcs = _split_list(fields.get("functional_object_candidates", ""))
    action = ActionClass.parse(fields["action"])

    spatial = parse_spatial_descriptor(q)
    rel = fields["spatial_relation"].strip()
    if rel.upper() not in ("N/A", "NA", "NONE"):
        parts = [p.strip().strip("\"'`") for p in rel.strip("[]").split(",")]
        if len(parts) != 2:
            raise ParseError(f"spatial_relation must be [X, Y] or N/A, got {rel!r}", raw=raw)
        ref = singular(parts[1])
        if ctx is None and parts[0].lower() not in ("none", "n/a", ""):
            ctx = singular(parts[0])
        if ref and ref not in ("none", "n/a"):
            if spatial.kind == "relation":
                spatial = SpatialDescriptor.related(spatial.relation, ref)
            elif spatial.kind in ("nearest", "none"):
                spatial = SpatialDescriptor.nearest(ref)
    candidates = tuple(dict.fromkeys(ints[1:] + funcs))
    return ParsedQuery(ints[0], action, q, ctx, spatial, candidates)


def parse_query(q: str, backend=None) -> ParsedQuery:
    """Decompose ``q``; ``backend`` needs ``complete(system_prompt, text) -> str``."""
    if not q or not q.strip():
        raise ContractViolation("query must be non-empty")
    if backend is None:
        return _heuristic_parse(q)
    prompt = stage1_prompt()
    last = None
    for _ in range(MAX_RETRIES + 1):
        raw = backend.complete(prompt, q)
        try:
            return parse_stage1_response(raw, q)
        except ParseError as exc:
            last = exc
    raise ParseError(f"unparseable Stage-1 response after {MAX_RETRIES} retries: {last}", raw=last.raw)
