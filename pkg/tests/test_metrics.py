import random

import pytest

from speechdst import (DialogueState, canonicalize, evaluate_states,
                       joint_goal_accuracy, slot_error_rate)


# --- naive double-loop oracle ----------------------------------------------

def canon_oracle(state):
    out = {}
    for k, v in state.slots.items():
        out[" ".join(k.lower().split())] = " ".join(v.lower().split())
    return out


def oracle_jga(preds, golds):
    hits = 0
    for p, g in zip(preds, golds):
        if canon_oracle(p) == canon_oracle(g):
            hits += 1
    return hits / len(golds)


def oracle_ser(preds, golds):
    missing = spurious = wrong = gold_total = 0
    for p, g in zip(preds, golds):
        cp, cg = canon_oracle(p), canon_oracle(g)
        gold_total += len(cg)
        for k in cg:
            if k not in cp:
                missing += 1
            elif cp[k] != cg[k]:
                wrong += 1
        for k in cp:
            if k not in cg:
                spurious += 1
    if gold_total == 0:
        return 0.0 if spurious == 0 else None
    return (missing + spurious + wrong) / gold_total


# --- canonicalize -----------------------------------------------------------

def test_canonicalize_case_trim():
    st = DialogueState(["Restaurant"], {"Restaurant-Food": " Italian "})
    assert canonicalize(st) == {"restaurant-food": "italian"}


def test_canonicalize_empty():
    assert canonicalize(DialogueState()) == {}


def test_canonicalize_idempotent():
    st = DialogueState(["r"], {"R-A": "  Foo   Bar "})
    once = canonicalize(st)
    again = canonicalize(DialogueState(["r"], dict(once)))
    assert once == again


def test_alias_table():
    st = DialogueState(["r"], {"r-area": "centre"})
    assert canonicalize(st, {"centre": "center"}) == {"r-area": "center"}
    assert canonicalize(st) == {"r-area": "centre"}


# --- JGA --------------------------------------------------------------------

def S(**slots):
    doms = sorted({k.split("_")[0] for k in slots})
    return DialogueState(doms, {k.replace("_", "-"): v for k, v in slots.items()})


def test_jga_all_correct():
    golds = [S(r_food="thai"), S(r_food="thai", r_area="north")]
    assert joint_goal_accuracy(golds, [g.copy() for g in golds]) == 1.0


def test_jga_one_of_four_wrong():
    golds = [S(r_food="thai")] * 4
    preds = [S(r_food="thai")] * 3 + [S(r_food="lao")]
    assert joint_goal_accuracy(preds, golds) == 0.75


def test_jga_order_insensitive():
    g = DialogueState(["a", "b"], {"a-x": "1", "b-y": "2"})
    p = DialogueState(["b", "a"], {"b-y": "2", "a-x": "1"})
    assert joint_goal_accuracy([p], [g]) == 1.0


def test_jga_ignores_domains_list():
    g = DialogueState(["a"], {"a-x": "1"})
    p = DialogueState(["a", "zzz"], {"a-x": "1"})
    assert joint_goal_accuracy([p], [g]) == 1.0


def test_misalignment_error():
    with pytest.raises(ValueError, match="misaligned"):
        joint_goal_accuracy([S(r_x="1")], [])


# --- SER --------------------------------------------------------------------

def test_ser_perfect():
    golds = [S(r_food="thai", r_area="north")]
    ser, counts = slot_error_rate([g.copy() for g in golds], golds)
    assert ser == 0.0
    assert counts.correct == 2


def test_ser_all_missing():
    golds = [S(r_food="a", r_area="b"), S(r_food="a", r_area="b", h_x="c")]
    ser, _ = slot_error_rate([DialogueState(), DialogueState()], golds)
    assert ser == 1.0


def test_ser_undefined_marker():
    ser, _ = slot_error_rate([S(r_x="1")], [DialogueState()])
    assert ser is None
    ser, _ = slot_error_rate([DialogueState()], [DialogueState()])
    assert ser == 0.0


# --- pinned hand-built 6-turn mini-corpus -----------------------------------

MINI_GOLD = [
    S(r_food="thai"),
    S(r_food="thai", r_area="north"),
    S(r_food="thai", r_area="north", h_kind="hotel"),
    S(h_kind="hostel"),
    S(h_kind="hostel", h_price="cheap"),
    S(r_food="indian", r_area="south"),
]
MINI_PRED = [
    S(r_food="thai"),                                  # exact
    S(r_food="thai", r_area="south"),                  # wrong value
    S(r_food="thai", r_area="north", h_kind="hotel"),  # exact
    S(),                                               # missing 1
    S(h_kind="hostel", h_price="cheap", h_x="spur"),   # spurious 1
    S(r_food="indian"),                                # missing 1
]

# frozen from the double-loop oracle:
#   JGA = 2/6 (turns 1 and 3 exact); gold slots = 11
#   missing = 2; spurious = 1; wrong_value = 1; SER = 4/11
def test_mini_corpus_pinned_values():
    assert oracle_jga(MINI_PRED, MINI_GOLD) == pytest.approx(2 / 6)
    assert oracle_ser(MINI_PRED, MINI_GOLD) == pytest.approx(4 / 11)
    assert joint_goal_accuracy(MINI_PRED, MINI_GOLD) == pytest.approx(2 / 6)
    ser, counts = slot_error_rate(MINI_PRED, MINI_GOLD)
    assert ser == pytest.approx(4 / 11)
    assert counts.gold == 11
    assert (counts.missing, counts.spurious, counts.wrong_value) == (2, 1, 1)


def test_accounting_identity():
    _, c = slot_error_rate(MINI_PRED, MINI_GOLD)
    assert c.correct + c.missing + c.wrong_value == c.gold


# --- random agreement with the oracle ---------------------------------------

def random_state(rng):
    slots = {}
    for dom in ("aa", "bb"):
        for slot in ("x", "y"):
            if rng.random() < 0.5:
                slots[f"{dom}-{slot}"] = rng.choice(["p", "q", "R "])
    doms = sorted({k.split("-")[0] for k in slots})
    return DialogueState(doms, slots)


def test_random_corpora_match_oracle():
    rng = random.Random(42)
    for _ in range(200):
        n = rng.randint(1, 8)
        preds = [random_state(rng) for _ in range(n)]
        golds = [random_state(rng) for _ in range(n)]
        assert joint_goal_accuracy(preds, golds) == oracle_jga(preds, golds)
        ser, _ = slot_error_rate(preds, golds)
        assert ser == oracle_ser(preds, golds)


def test_evaluate_report_consistency():
    rep = evaluate_states(MINI_PRED, MINI_GOLD, n_dialogues=2)
    d = rep.to_dict()
    c = d["counts"]
    assert c["correct"] + c["missing"] + c["wrong_value"] == c["gold_slots"]
    assert d["jga"] == pytest.approx(2 / 6)
    assert set(rep.per_domain) == {"r", "h"}
    assert "JGA" in rep.to_table()
