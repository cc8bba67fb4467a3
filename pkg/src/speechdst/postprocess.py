"""Fuzzy-matching normalization of predicted slot values against the
ontology (the legal-value database).

Similarity is the classic matching-blocks ratio round(100 * 2M / (|a|+|b|)),
computed on case-folded, punctuation-stripped, whitespace-collapsed strings.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from pathlib import Path

_PUNCT_RE = re.compile(r"[^\w\s]", re.UNICODE)

DEFAULT_THRESHOLD = 80


def _normalize_text(s: str) -> str:
    s = _PUNCT_RE.sub("", s.casefold())
    return " ".join(s.split())


def similarity_ratio(a: str, b: str) -> int:
    """Integer similarity in [0, 100]; symmetric, identity scores 100.

    Both strings empty (after normalization) score 100 by convention.
    """
    a, b = _normalize_text(a), _normalize_text(b)
    if not a and not b:
        return 100
    if a > b:
        a, b = b, a  # block decomposition has tie-break asymmetries; fix an order
    matcher = SequenceMatcher(None, a, b, autojunk=False)
    m = sum(block.size for block in matcher.get_matching_blocks())
    return int(round(100.0 * 2.0 * m / (len(a) + len(b))))


@dataclass
class Ontology:
    """slot-name -> legal values; slot-name lookup is case-insensitive."""
    values: dict[str, list[str]] = field(default_factory=dict)
    categorical: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        self._by_lower = {k.lower(): k for k in self.values}
        for slot, vals in self.values.items():
            if not vals:
                raise ValueError(f"ontology slot {slot!r} has an empty value list")

    def lookup(self, slot: str) -> str | None:
        return self._by_lower.get(slot.lower())

    def is_categorical(self, slot: str) -> bool:
        key = self.lookup(slot)
        if key is None:
            return False
        return self.categorical.get(key, True)

    def candidates(self, slot: str) -> list[str]:
        key = self.lookup(slot)
        return list(self.values[key]) if key is not None else []

    def to_dict(self) -> dict:
        out = {}
        for slot, vals in self.values.items():
            entry: dict = {"values": list(vals)}
            if slot in self.categorical:
                entry["categorical"] = self.categorical[slot]
            out[slot] = entry
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Ontology":
        values, categorical = {}, {}
        for slot, entry in d.items():
            if isinstance(entry, list):
                values[slot] = list(entry)
            else:
                values[slot] = list(entry["values"])
                if "categorical" in entry:
                    categorical[slot] = bool(entry["categorical"])
        return cls(values, categorical)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Ontology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fuzzy_normalize(slot: str, value: str, ont: Ontology,
                    threshold: int = DEFAULT_THRESHOLD) -> str:
    """Map `value` to the closest legal value for `slot`, if close enough.

    Uncovered or non-categorical slots pass through. Ties break on the
    lexicographically smallest candidate; below-threshold stays unchanged.
    """
    if not ont.is_categorical(slot):
        return value
    best_value, best_score = None, -1
    for cand in sorted(ont.candidates(slot)):
        score = similarity_ratio(value, cand)
        if score > best_score:
            best_value, best_score = cand, score
    if best_score >= threshold:
        return best_value
    return value


def normalize_prediction(pred, ont: Ontology,
                         threshold: int = DEFAULT_THRESHOLD):
    """Return a copy of a TurnPrediction with every slot value normalized.

    Domains are untouched; the operation is idempotent because normalized
    values are themselves ontology members.
    """
    import copy
    out = copy.deepcopy(pred)
    out.state.slots = {
        slot: fuzzy_normalize(slot, value, ont, threshold)
        for slot, value in pred.state.slots.items()
    }
    return out
