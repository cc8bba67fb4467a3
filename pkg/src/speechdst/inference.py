"""Turn-by-turn dialogue decoding.

For each turn the prompt is built from the accumulated history (rendered per
the chosen history mode), the model greedily completes the JSON starting at
the transcription, the output is parsed, and the model's own transcription
(self-decoded mode) is fed back into the history for subsequent turns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .lm import generate
from .prompting import (DialogueState, HistoryTurnText, USER, AGENT,
                        dst_inference_prefix, parse_turn_output, render_history)

HISTORY_MODES = ("self_decoded", "oracle_user", "external_asr")


@dataclass
class HistoryMode:
    mode: str = "self_decoded"
    include_agent: bool = True

    def __post_init__(self):
        if self.mode not in HISTORY_MODES:
            raise ValueError(f"unknown history mode {self.mode!r}; "
                             f"expected one of {HISTORY_MODES}")


@dataclass
class TurnPrediction:
    dialogue_id: str
    turn_id: int
    transcription: str
    state: DialogueState
    raw_output: str
    parse_ok: bool
    truncated: bool = False

    def to_dict(self) -> dict:
        return {"dialogue_id": self.dialogue_id, "turn_id": self.turn_id,
                "transcription": self.transcription,
                "domains": list(self.state.domains),
                "slots": dict(self.state.slots),
                "parse_ok": self.parse_ok,
                "raw_output": self.raw_output}


def fallback_state(previous: TurnPrediction | None) -> DialogueState:
    """State used when a turn's output cannot be parsed: carry the previous
    turn's state forward, or the empty state at turn 1."""
    if previous is None:
        return DialogueState()
    return previous.state.copy()


def _history_user_text(mode: str, turn, prediction: TurnPrediction) -> str:
    if mode == "oracle_user":
        return turn.transcript
    if mode == "external_asr":
        if turn.asr_hyp is None:
            raise ValueError("external_asr history mode requires an ASR hypothesis "
                             "on every turn")
        return turn.asr_hyp
    return prediction.transcription  # self_decoded, re-fed verbatim


def run_dialogue(model, dialogue, hmode: HistoryMode,
                 max_new_tokens: int = 512) -> list[TurnPrediction]:
    """Decode one dialogue sequentially; turns depend on earlier predictions."""
    if not dialogue.turns:
        raise ValueError(f"dialogue {dialogue.id} has no turns")
    model.eval_mode()
    preds: list[TurnPrediction] = []
    history: list[HistoryTurnText] = []
    for i, turn in enumerate(dialogue.turns):
        prompt_text = dst_inference_prefix(render_history(history, hmode.include_agent))
        ids = model.tokenizer.encode(prompt_text, add_bos=True)
        with torch.no_grad():
            prefix = model.connector(model.encode_turn(turn))
            gen = generate(model.lm, prefix, ids, model.tokenizer,
                           max_new_tokens=max_new_tokens, prompt_text=prompt_text)
        full = prompt_text + gen.text
        parsed = parse_turn_output(full)
        if parsed.ok:
            state = DialogueState(parsed.domains, parsed.slots)
            pred = TurnPrediction(dialogue.id, i, parsed.transcription, state,
                                  gen.text, True, gen.truncated)
        else:
            prev = preds[-1] if preds else None
            pred = TurnPrediction(dialogue.id, i, "", fallback_state(prev),
                                  gen.text, False, gen.truncated)
        preds.append(pred)
        history.append(HistoryTurnText(USER, _history_user_text(hmode.mode, turn, pred)))
        history.append(HistoryTurnText(AGENT, turn.agent))
    return preds


def text_only_run(lm, tokenizer, dialogue, include_agent: bool = True,
                  max_new_tokens: int = 512) -> list[TurnPrediction]:
    """Cascade-style DST: an external transcript seeds current_turn, no soft
    speech prefix, and the model generates only the domains/slots tail."""
    if not dialogue.turns:
        raise ValueError(f"dialogue {dialogue.id} has no turns")
    preds: list[TurnPrediction] = []
    history: list[HistoryTurnText] = []
    for i, turn in enumerate(dialogue.turns):
        hyp = turn.asr_hyp
        if not hyp:
            raise ValueError(f"dialogue {dialogue.id} turn {i}: missing external transcript")
        prompt_text = dst_inference_prefix(render_history(history, include_agent),
                                           current_turn=hyp)
        ids = tokenizer.encode(prompt_text, add_bos=True)
        with torch.no_grad():
            gen = generate(lm, None, ids, tokenizer,
                           max_new_tokens=max_new_tokens, prompt_text=prompt_text)
        full = prompt_text + gen.text
        parsed = parse_turn_output(full)
        if parsed.ok:
            state = DialogueState(parsed.domains, parsed.slots)
            pred = TurnPrediction(dialogue.id, i, parsed.transcription, state,
                                  gen.text, True, gen.truncated)
        else:
            prev = preds[-1] if preds else None
            pred = TurnPrediction(dialogue.id, i, hyp, fallback_state(prev),
                                  gen.text, False, gen.truncated)
        preds.append(pred)
        history.append(HistoryTurnText(USER, hyp))
        history.append(HistoryTurnText(AGENT, turn.agent))
    return preds


def run_corpus(model, corpus, hmode: HistoryMode,
               max_new_tokens: int = 512) -> list[TurnPrediction]:
    out = []
    for dlg in corpus.dialogues:
        if hmode.mode == "oracle_user" and any(t.transcript is None for t in dlg.turns):
            raise ValueError("oracle_user mode requires gold transcripts")
        out.extend(run_dialogue(model, dlg, hmode, max_new_tokens))
    return out


def save_predictions(preds: list[TurnPrediction], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in preds:
            f.write(json.dumps(p.to_dict()) + "\n")


def load_predictions(path: str | Path) -> list[TurnPrediction]:
    preds = []
    seen = set()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        key = (d["dialogue_id"], d["turn_id"])
        if key in seen:
            raise ValueError(f"duplicate prediction for dialogue {key[0]} turn {key[1]}")
        seen.add(key)
        preds.append(TurnPrediction(
            d["dialogue_id"], d["turn_id"], d["transcription"],
            DialogueState(list(d["domains"]), dict(d["slots"])),
            d.get("raw_output", ""), bool(d["parse_ok"])))
    return preds
