"""Corpus and feature-file formats, loaders, and the deterministic synthetic
dialogue generator used for desk-scale training and verification.

Corpus format: JSONL, one dialogue per line:

    {"id": "dlg-0001",
     "turns": [{"transcript": "...", "agent": "...",
                "state": {"domains": [...], "slots": {...}},
                "symbols": [..]            # toy-encoder input, OR
                "features": "rel/path.f32" # precomputed feature file
                "asr_hyp": "..."}]}        # optional external ASR hypothesis

Feature files: little-endian binary, header of two uint32 (T, F) followed by
T*F row-major float32 values.
"""

from __future__ import annotations

import hashlib
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prompting import DialogueState

FEATURE_MAGIC = b"SDF1"


def write_feature_file(path: str | Path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    if feats.ndim != 2:
        raise ValueError("features must be a [T x F] matrix")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", feats.shape[0], feats.shape[1]))
        f.write(feats.tobytes())


def read_feature_file(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (bad magic {magic!r})")
        t, d = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(t * d * 4), dtype="<f4")
    if data.size != t * d:
        raise ValueError(f"{path}: truncated feature file")
    return data.reshape(t, d).copy()


@dataclass
class DialogueTurn:
    transcript: str
    agent: str
    state: DialogueState
    symbols: list[int] | None = None
    features: str | None = None
    asr_hyp: str | None = None


@dataclass
class Dialogue:
    id: str
    turns: list[DialogueTurn]


@dataclass
class DialogueCorpus:
    dialogues: list[Dialogue] = field(default_factory=list)

    def __len__(self):
        return len(self.dialogues)

    def turn_count(self) -> int:
        return sum(len(d.turns) for d in self.dialogues)

    def content_hash(self) -> str:
        return hashlib.sha256(dumps_corpus(self).encode()).hexdigest()


def _turn_to_dict(t: DialogueTurn) -> dict:
    d = {"transcript": t.transcript, "agent": t.agent, "state": t.state.to_dict()}
    if t.symbols is not None:
        d["symbols"] = list(t.symbols)
    if t.features is not None:
        d["features"] = t.features
    if t.asr_hyp is not None:
        d["asr_hyp"] = t.asr_hyp
    return d


def dumps_corpus(corpus: DialogueCorpus) -> str:
    lines = []
    for dlg in corpus.dialogues:
        lines.append(json.dumps({"id": dlg.id,
                                 "turns": [_turn_to_dict(t) for t in dlg.turns]}))
    return "\n".join(lines) + ("\n" if lines else "")


def save_corpus(corpus: DialogueCorpus, path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus))


class CorpusFormatError(ValueError):
    pass


def _require(cond: bool, lineno: int, path: str, msg: str) -> None:
    if not cond:
        raise CorpusFormatError(f"line {lineno}, {path}: {msg}")


def load_corpus(path: str | Path) -> DialogueCorpus:
    """Load and validate a JSONL corpus; errors carry line number and field path."""
    corpus = DialogueCorpus()
    text = Path(path).read_text()
    if not text.strip():
        import warnings
        warnings.warn(f"{path}: empty corpus file")
        return corpus
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"line {lineno}: invalid JSON: {e.msg}") from None
        _require(isinstance(obj, dict), lineno, "$", "dialogue must be an object")
        _require(isinstance(obj.get("id"), str), lineno, "id", "missing or non-string id")
        _require(isinstance(obj.get("turns"), list) and obj["turns"],
                 lineno, "turns", "missing or empty turns list")
        turns = []
        for i, t in enumerate(obj["turns"]):
            fp = f"turns[{i}]"
            _require(isinstance(t, dict), lineno, fp, "turn must be an object")
            _require(isinstance(t.get("transcript"), str), lineno,
                     f"{fp}.transcript", "missing or non-string transcript")
            _require(isinstance(t.get("agent"), str), lineno,
                     f"{fp}.agent", "missing or non-string agent")
            _require(isinstance(t.get("state"), dict), lineno,
                     f"{fp}.state", "missing gold state")
            st = t["state"]
            _require(isinstance(st.get("domains"), list), lineno,
                     f"{fp}.state.domains", "missing domains list")
            _require(isinstance(st.get("slots"), dict), lineno,
                     f"{fp}.state.slots", "missing slots mapping")
            state = DialogueState.from_dict(st)
            try:
                state.validate()
            except ValueError as e:
                raise CorpusFormatError(f"line {lineno}, {fp}.state: {e}") from None
            symbols = t.get("symbols")
            if symbols is not None:
                _require(isinstance(symbols, list) and all(isinstance(s, int) for s in symbols),
                         lineno, f"{fp}.symbols", "symbols must be a list of integers")
            features = t.get("features")
            if features is not None:
                _require(isinstance(features, str), lineno, f"{fp}.features",
                         "features must be a relative path string")
            turns.append(DialogueTurn(transcript=t["transcript"], agent=t["agent"],
                                      state=state, symbols=symbols, features=features,
                                      asr_hyp=t.get("asr_hyp")))
        corpus.dialogues.append(Dialogue(id=obj["id"], turns=turns))
    ids = [d.id for d in corpus.dialogues]
    if len(set(ids)) != len(ids):
        raise CorpusFormatError("duplicate dialogue ids")
    return corpus


# ---------------------------------------------------------------------------
# synthetic generation

DEFAULT_SCHEMA = {
    "eats": {"food": ["pasta", "sushi", "tacos", "curry"],
             "area": ["north", "south", "middle"]},
    "stay": {"kind": ["hotel", "hostel", "cabin"],
             "price": ["cheap", "costly"]},
}


@dataclass
class SynthSpec:
    seed: int = 7
    n_dialogues: int = 50
    turns_min: int = 1
    turns_max: int = 3
    schema: dict = field(default_factory=lambda: DEFAULT_SCHEMA)
    agent_proposal_rate: float = 0.3

    def __post_init__(self):
        if not (1 <= self.turns_min <= self.turns_max):
            raise ValueError("need 1 <= turns_min <= turns_max")


def text_to_symbols(text: str) -> list[int]:
    """Symbol ids for the toy encoder: plain 7-bit character codes."""
    return [min(ord(c), 127) for c in text]


def generate_synthetic(spec: SynthSpec) -> DialogueCorpus:
    """Deterministic templated dialogues with cumulative gold states.

    User turns verbalize one new slot assignment ("i want <value> <slot> in
    <domain>"). A fraction of turns instead confirm a value that only the
    *agent* proposed in the previous turn, so agent-side history is genuinely
    informative.
    """
    rng = random.Random(spec.seed)
    corpus = DialogueCorpus()
    pairs = [(dom, slot) for dom, slots in spec.schema.items() for slot in slots]
    for n in range(spec.n_dialogues):
        n_turns = rng.randint(spec.turns_min, spec.turns_max)
        used = []
        state = DialogueState()
        turns = []
        pending_proposal = None  # (domain, slot, value) proposed by the agent
        for _ in range(n_turns):
            if pending_proposal is not None:
                dom, slot, value = pending_proposal
                transcript = "yes do that"
                pending_proposal = None
            else:
                choices = [p for p in pairs if p not in used] or pairs
                dom, slot = rng.choice(choices)
                value = rng.choice(spec.schema[dom][slot])
                transcript = f"i want {value} {slot} in {dom}"
            used.append((dom, slot))
            if dom not in state.domains:
                state.domains.append(dom)
            state.slots[f"{dom}-{slot}"] = value
            agent = "ok"
            if (len(turns) + 1 < n_turns
                    and rng.random() < spec.agent_proposal_rate):
                choices = [p for p in pairs if p not in used] or pairs
                pdom, pslot = rng.choice(choices)
                pvalue = rng.choice(spec.schema[pdom][pslot])
                agent = f"how about {pvalue} {pslot} in {pdom}"
                pending_proposal = (pdom, pslot, pvalue)
            turns.append(DialogueTurn(transcript=transcript, agent=agent,
                                      state=state.copy(),
                                      symbols=text_to_symbols(transcript)))
        corpus.dialogues.append(Dialogue(id=f"dlg-{n:04d}", turns=turns))
    return corpus


def derive_ontology(corpus: DialogueCorpus) -> dict[str, list[str]]:
    """slot-name -> sorted unique gold values (case-insensitive dedup)."""
    values: dict[str, dict[str, str]] = {}
    for dlg in corpus.dialogues:
        for turn in dlg.turns:
            for slot, value in turn.state.slots.items():
                values.setdefault(slot, {}).setdefault(value.lower(), value)
    return {slot: sorted(v.values()) for slot, v in sorted(values.items())}
