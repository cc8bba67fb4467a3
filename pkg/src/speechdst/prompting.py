"""Prompt construction and parsing.

Builds the ASR and DST prompt/token/loss-mask records, renders dialogue
history with optional speaker tags, and (de)serializes the per-turn dialogue
state JSON. The JSON layout here is the wire format between inference and
evaluation, so rendering is canonical and byte-stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .tokenizer import ByteTokenizer

ASR_PREFIX = '{"transcription": '
DST_HISTORY_KEY = '{"dialogue_history": '
DST_CURRENT_KEY = '"current_turn": '

USER = "USER"
AGENT = "AGENT"


@dataclass
class DialogueState:
    """Active domains plus 'domain-slotname' -> value mapping for one turn."""
    domains: list[str] = field(default_factory=list)
    slots: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for key, value in self.slots.items():
            domain = key.split("-", 1)[0]
            if domain not in self.domains:
                raise ValueError(f"slot {key!r}: domain {domain!r} not in domains list")
            if not value.strip():
                raise ValueError(f"slot {key!r} has empty value")

    def copy(self) -> "DialogueState":
        return DialogueState(list(self.domains), dict(self.slots))

    def to_dict(self) -> dict:
        return {"domains": list(self.domains), "slots": dict(self.slots)}

    @classmethod
    def from_dict(cls, d: dict) -> "DialogueState":
        return cls(list(d.get("domains", [])), dict(d.get("slots", {})))


@dataclass
class HistoryTurnText:
    speaker: str  # USER | AGENT
    text: str

    def __post_init__(self):
        if self.speaker not in (USER, AGENT):
            raise ValueError(f"speaker must be USER or AGENT, got {self.speaker!r}")
        self.text = " ".join(self.text.split())  # no embedded newlines


@dataclass
class PromptRecord:
    token_ids: list[int]
    loss_mask: list[bool]
    text: str
    prefix_source: str | None = None

    def __post_init__(self):
        if len(self.token_ids) != len(self.loss_mask):
            raise ValueError("token_ids and loss_mask lengths differ")


def render_history(turns: list[HistoryTurnText], include_agent: bool) -> str:
    if include_agent:
        return " ".join(f"{t.speaker}: {t.text}" for t in turns)
    return " ".join(t.text for t in turns if t.speaker == USER)


def serialize_state(state: DialogueState) -> str:
    """Canonical `"domains": [...], "slots": {...}` fragment.

    Order is first-mention order from the state itself; single space after
    each colon and comma.
    """
    state.validate()
    domains = json.dumps(list(state.domains))
    slots = json.dumps(dict(state.slots))
    # json.dumps default separators are ", " / ": " already
    return f'"domains": {domains}, "slots": {slots}'


def build_asr_prompt(transcript: str, tokenizer: ByteTokenizer,
                     prefix_source: str | None = None) -> PromptRecord:
    """Training record for stage-1 ASR: `{"transcription": "<transcript>"}`.

    Loss covers every text token (plus EOS); the soft speech prefix carries
    the conditioning.
    """
    if not transcript:
        raise ValueError("empty transcript")
    text = ASR_PREFIX + json.dumps(transcript) + "}"
    ids = tokenizer.encode(text, add_bos=True, add_eos=True)
    mask = [False] + [True] * (len(ids) - 1)  # BOS masked out
    return PromptRecord(ids, mask, text, prefix_source)


def dst_prompt_text(history: str, current_turn: str, state: DialogueState) -> str:
    """Full single-line DST JSON in canonical field order."""
    return (DST_HISTORY_KEY + json.dumps(history) + ", "
            + DST_CURRENT_KEY + json.dumps(current_turn) + ", "
            + serialize_state(state) + "}")


def dst_inference_prefix(history: str, current_turn: str | None = None) -> str:
    """Prompt text the model completes at inference.

    With current_turn=None the text ends right after `"current_turn": "` and
    the model produces the transcription itself. With an external transcript
    (text-only / cascade mode) the text ends after the closed current_turn
    field and the model generates only domains/slots.
    """
    base = DST_HISTORY_KEY + json.dumps(history) + ", " + DST_CURRENT_KEY
    if current_turn is None:
        return base + '"'
    return base + json.dumps(current_turn) + ", "


def build_dst_prompt(history: str, asr_hyp: str, state: DialogueState,
                     train: bool, tokenizer: ByteTokenizer,
                     prefix_source: str | None = None,
                     loss_on_history: bool = False) -> PromptRecord:
    """DST record. In training mode the loss mask is False over the
    dialogue_history segment (unless loss_on_history, the cascade-style
    variant) and True from the `"current_turn"` key through the closing
    brace. In inference mode the record stops right after `"current_turn": "`.
    """
    if not train:
        text = dst_inference_prefix(history)
        ids = tokenizer.encode(text, add_bos=True)
        return PromptRecord(ids, [False] * len(ids), text, prefix_source)
    state.validate()
    text = dst_prompt_text(history, asr_hyp, state)
    head = DST_HISTORY_KEY + json.dumps(history) + ", "
    assert text.startswith(head)
    n_head = len(tokenizer.encode(head))
    ids = tokenizer.encode(text, add_bos=True, add_eos=True)
    if loss_on_history:
        mask = [False] + [True] * (len(ids) - 1)
    else:
        mask = [False] + [False] * n_head + [True] * (len(ids) - 1 - n_head)
    return PromptRecord(ids, mask, text, prefix_source)


@dataclass
class ParsedTurn:
    ok: bool
    transcription: str = ""
    domains: list[str] = field(default_factory=list)
    slots: dict[str, str] = field(default_factory=dict)
    error: str | None = None
    duplicate_keys: bool = False


def _pairs_hook_flagging_duplicates(flag: dict):
    def hook(pairs):
        seen = set()
        out = {}
        for k, v in pairs:
            if k in seen:
                flag["dup"] = True  # last occurrence wins
            seen.add(k)
            out[k] = v
        return out
    return hook


def parse_turn_output(text: str) -> ParsedTurn:
    """Parse a model-emitted turn JSON into (transcription, domains, slots).

    Malformed input yields a parse-failure value (never an exception) whose
    error names the failing field or the longest valid prefix position.
    """
    flag: dict = {}
    try:
        obj = json.loads(text, object_pairs_hook=_pairs_hook_flagging_duplicates(flag))
    except json.JSONDecodeError as e:
        return ParsedTurn(ok=False, error=f"invalid JSON at char {e.pos}: {e.msg} "
                                          f"(longest valid prefix ends at {e.pos})")
    if not isinstance(obj, dict):
        return ParsedTurn(ok=False, error="top-level value is not an object")
    for fieldname in ("current_turn", "domains", "slots"):
        if fieldname not in obj:
            return ParsedTurn(ok=False, error=f"missing field: {fieldname}")
    if not isinstance(obj["current_turn"], str):
        return ParsedTurn(ok=False, error="current_turn is not a string")
    if not isinstance(obj["domains"], list) or not all(isinstance(d, str) for d in obj["domains"]):
        return ParsedTurn(ok=False, error="domains is not a list of strings")
    if not isinstance(obj["slots"], dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in obj["slots"].items()):
        return ParsedTurn(ok=False, error="slots is not a string-to-string mapping")
    return ParsedTurn(ok=True,
                      transcription=obj["current_turn"],
                      domains=list(obj["domains"]),
                      slots=dict(obj["slots"]),
                      duplicate_keys=bool(flag.get("dup")))
