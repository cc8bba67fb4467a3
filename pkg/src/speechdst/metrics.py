"""Joint Goal Accuracy and Slot Error Rate over aligned per-turn predictions.

JGA compares the canonicalized slot mapping only (the domains list is
reported but not matched). SER = (missing + spurious + wrong_value) / gold
slots, accumulated over all turns.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .prompting import DialogueState


def canonicalize_value(v: str, aliases: dict[str, str] | None = None) -> str:
    v = " ".join(v.lower().split())
    if aliases:
        v = aliases.get(v, v)
    return v


def canonicalize(state: DialogueState, aliases: dict[str, str] | None = None) -> dict[str, str]:
    """Order-insensitive canonical slot mapping: lowercase keys, trimmed and
    whitespace-collapsed lowercase values, optional value aliases applied."""
    return {" ".join(k.lower().split()): canonicalize_value(v, aliases)
            for k, v in state.slots.items()}


def joint_goal_accuracy(preds: list[DialogueState], golds: list[DialogueState],
                        aliases: dict[str, str] | None = None) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"misaligned inputs: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("no turns to evaluate")
    hits = sum(canonicalize(p, aliases) == canonicalize(g, aliases)
               for p, g in zip(preds, golds))
    return hits / len(golds)


@dataclass
class SlotCounts:
    gold: int = 0
    correct: int = 0
    missing: int = 0
    spurious: int = 0
    wrong_value: int = 0

    def add(self, other: "SlotCounts") -> None:
        self.gold += other.gold
        self.correct += other.correct
        self.missing += other.missing
        self.spurious += other.spurious
        self.wrong_value += other.wrong_value


def turn_slot_counts(pred: DialogueState, gold: DialogueState,
                     aliases: dict[str, str] | None = None) -> SlotCounts:
    p, g = canonicalize(pred, aliases), canonicalize(gold, aliases)
    c = SlotCounts(gold=len(g))
    for key, value in g.items():
        if key not in p:
            c.missing += 1
        elif p[key] == value:
            c.correct += 1
        else:
            c.wrong_value += 1
    c.spurious = sum(1 for key in p if key not in g)
    return c


def slot_error_rate(preds: list[DialogueState], golds: list[DialogueState],
                    aliases: dict[str, str] | None = None):
    """Returns (ser, counts). With zero gold slots SER is 0.0 when there are
    no spurious slots and None (undefined) otherwise."""
    if len(preds) != len(golds):
        raise ValueError(f"misaligned inputs: {len(preds)} predictions vs {len(golds)} golds")
    total = SlotCounts()
    for p, g in zip(preds, golds):
        total.add(turn_slot_counts(p, g, aliases))
    if total.gold == 0:
        ser = 0.0 if total.spurious == 0 else None
    else:
        ser = (total.missing + total.spurious + total.wrong_value) / total.gold
    return ser, total


@dataclass
class EvalReport:
    jga: float
    ser: float | None
    ser_undefined: bool
    counts: SlotCounts
    per_domain: dict[str, dict] = field(default_factory=dict)
    n_turns: int = 0
    n_dialogues: int = 0
    fuzzy: bool = False
    fuzzy_threshold: int | None = None
    config_hash: str | None = None

    def to_dict(self) -> dict:
        return {
            "jga": self.jga,
            "ser": self.ser,
            "ser_undefined": self.ser_undefined,
            "counts": {"turns": self.n_turns, "dialogues": self.n_dialogues,
                       "gold_slots": self.counts.gold, "correct": self.counts.correct,
                       "missing": self.counts.missing, "spurious": self.counts.spurious,
                       "wrong_value": self.counts.wrong_value},
            "per_domain": self.per_domain,
            "fuzzy": self.fuzzy,
            "fuzzy_threshold": self.fuzzy_threshold,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        ser = "undefined" if self.ser_undefined else f"{self.ser:.4f}"
        lines = [
            f"{'metric':<14}{'value':>12}",
            f"{'JGA':<14}{self.jga:>12.4f}",
            f"{'SER':<14}{ser:>12}",
            f"{'turns':<14}{self.n_turns:>12}",
            f"{'dialogues':<14}{self.n_dialogues:>12}",
            f"{'gold slots':<14}{self.counts.gold:>12}",
        ]
        for dom in sorted(self.per_domain):
            d = self.per_domain[dom]
            dser = "undef" if d["ser"] is None else f"{d['ser']:.4f}"
            lines.append(f"{dom:<14}jga={d['jga']:.4f} ser={dser}")
        return "\n".join(lines) + "\n"


def _domain_restricted(state: DialogueState, domain: str) -> DialogueState:
    slots = {k: v for k, v in state.slots.items()
             if k.split("-", 1)[0].lower() == domain}
    return DialogueState(domains=[domain], slots=slots)


def evaluate_states(pred_states: list[DialogueState], gold_states: list[DialogueState],
                    n_dialogues: int, aliases: dict[str, str] | None = None,
                    fuzzy: bool = False, fuzzy_threshold: int | None = None) -> EvalReport:
    jga = joint_goal_accuracy(pred_states, gold_states, aliases)
    ser, counts = slot_error_rate(pred_states, gold_states, aliases)
    domains = sorted({k.split("-", 1)[0].lower()
                      for s in (pred_states + gold_states) for k in s.slots})
    per_domain = {}
    for dom in domains:
        dp = [_domain_restricted(s, dom) for s in pred_states]
        dg = [_domain_restricted(s, dom) for s in gold_states]
        active = [(p, g) for p, g in zip(dp, dg) if p.slots or g.slots]
        if not active:
            continue
        d_jga = sum(canonicalize(p, aliases) == canonicalize(g, aliases)
                    for p, g in active) / len(active)
        d_ser, _ = slot_error_rate([p for p, _ in active], [g for _, g in active], aliases)
        per_domain[dom] = {"jga": d_jga, "ser": d_ser, "turns": len(active)}
    return EvalReport(jga=jga, ser=ser, ser_undefined=ser is None, counts=counts,
                      per_domain=per_domain, n_turns=len(gold_states),
                      n_dialogues=n_dialogues, fuzzy=fuzzy,
                      fuzzy_threshold=fuzzy_threshold)
