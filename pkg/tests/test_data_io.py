import json
import random

import numpy as np
import pytest

from speechdst import (CorpusFormatError, DialogueCorpus, SynthSpec,
                       derive_ontology, dumps_corpus, generate_synthetic,
                       load_corpus, save_corpus)
from speechdst.data_io import (read_feature_file, text_to_symbols,
                               write_feature_file)


# --- feature files -----------------------------------------------------------

def test_feature_file_roundtrip(tmp_path):
    feats = np.random.RandomState(0).randn(17, 5).astype(np.float32)
    p = tmp_path / "u1.f32"
    write_feature_file(p, feats)
    back = read_feature_file(p)
    assert back.dtype == np.float32
    assert np.array_equal(back, feats)


def test_feature_file_bad_magic(tmp_path):
    p = tmp_path / "bad.f32"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="bad magic"):
        read_feature_file(p)


def test_feature_file_truncated(tmp_path):
    feats = np.zeros((4, 4), dtype=np.float32)
    p = tmp_path / "t.f32"
    write_feature_file(p, feats)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_feature_file(p)


def test_feature_file_rejects_non_matrix(tmp_path):
    with pytest.raises(ValueError, match="matrix"):
        write_feature_file(tmp_path / "x.f32", np.zeros(7, dtype=np.float32))


# --- synthetic generator -----------------------------------------------------

def test_same_seed_byte_identical():
    a = generate_synthetic(SynthSpec(seed=3, n_dialogues=20))
    b = generate_synthetic(SynthSpec(seed=3, n_dialogues=20))
    assert dumps_corpus(a) == dumps_corpus(b)
    assert a.content_hash() == b.content_hash()


def test_different_seed_differs():
    a = generate_synthetic(SynthSpec(seed=3, n_dialogues=20))
    b = generate_synthetic(SynthSpec(seed=4, n_dialogues=20))
    assert a.content_hash() != b.content_hash()


def test_states_are_cumulative():
    corpus = generate_synthetic(SynthSpec(seed=5, n_dialogues=30, turns_max=4))
    for dlg in corpus.dialogues:
        prev = {}
        for turn in dlg.turns:
            for k, v in prev.items():
                assert k in turn.state.slots
            # exactly one slot changes or is added per turn
            assert len(turn.state.slots) >= len(prev)
            prev = dict(turn.state.slots)


def test_turn_counts_within_bounds():
    corpus = generate_synthetic(SynthSpec(seed=5, n_dialogues=40,
                                          turns_min=2, turns_max=3))
    assert len(corpus) == 40
    for dlg in corpus.dialogues:
        assert 2 <= len(dlg.turns) <= 3


def test_symbols_match_transcript():
    corpus = generate_synthetic(SynthSpec(seed=5, n_dialogues=5))
    t = corpus.dialogues[0].turns[0]
    assert t.symbols == text_to_symbols(t.transcript)
    assert all(0 <= s <= 127 for s in t.symbols)


def test_agent_proposals_are_confirmed():
    """A turn saying 'yes do that' must add exactly the value the agent
    proposed in the previous turn."""
    corpus = generate_synthetic(SynthSpec(seed=9, n_dialogues=60, turns_max=4,
                                          agent_proposal_rate=0.9))
    n_confirms = 0
    for dlg in corpus.dialogues:
        for i, turn in enumerate(dlg.turns):
            if turn.transcript == "yes do that":
                n_confirms += 1
                prev_agent = dlg.turns[i - 1].agent
                assert prev_agent.startswith("how about ")
                # "how about <value> <slot> in <domain>"
                words = prev_agent.split()
                value, slot, dom = " ".join(words[2:-3]), words[-3], words[-1]
                assert turn.state.slots[f"{dom}-{slot}"] == value
    assert n_confirms > 10


# --- corpus save/load --------------------------------------------------------

def test_corpus_roundtrip(tmp_path):
    corpus = generate_synthetic(SynthSpec(seed=2, n_dialogues=10))
    p = tmp_path / "c.jsonl"
    save_corpus(corpus, p)
    back = load_corpus(p)
    assert dumps_corpus(back) == dumps_corpus(corpus)


def test_empty_file_warns(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    with pytest.warns(UserWarning, match="empty corpus"):
        corpus = load_corpus(p)
    assert len(corpus) == 0


def test_invalid_json_names_line(tmp_path):
    corpus = generate_synthetic(SynthSpec(seed=2, n_dialogues=2))
    lines = dumps_corpus(corpus).splitlines()
    lines[1] = lines[1][:-5]
    p = tmp_path / "c.jsonl"
    p.write_text("\n".join(lines))
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(p)


def test_duplicate_ids_rejected(tmp_path):
    corpus = generate_synthetic(SynthSpec(seed=2, n_dialogues=1))
    line = dumps_corpus(corpus).strip()
    p = tmp_path / "c.jsonl"
    p.write_text(line + "\n" + line + "\n")
    with pytest.raises(CorpusFormatError, match="duplicate dialogue ids"):
        load_corpus(p)


REQUIRED_FIELDS = ["id", "turns", "transcript", "agent", "state",
                   "domains", "slots"]


def _drop_field(obj, name):
    """Remove every occurrence of key `name` anywhere in the JSON tree."""
    if isinstance(obj, dict):
        obj.pop(name, None)
        for v in obj.values():
            _drop_field(v, name)
    elif isinstance(obj, list):
        for v in obj:
            _drop_field(v, name)


@pytest.mark.parametrize("field", REQUIRED_FIELDS)
def test_fuzz_dropped_field_rejected_with_path(tmp_path, field):
    corpus = generate_synthetic(SynthSpec(seed=2, n_dialogues=3))
    lines = dumps_corpus(corpus).splitlines()
    obj = json.loads(lines[1])
    _drop_field(obj, field)
    lines[1] = json.dumps(obj)
    p = tmp_path / "c.jsonl"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError, match="line 2"):
        load_corpus(p)


def test_fuzz_type_corruption_rejected(tmp_path):
    rng = random.Random(0)
    corpus = generate_synthetic(SynthSpec(seed=2, n_dialogues=1))
    base = json.loads(dumps_corpus(corpus).splitlines()[0])
    corruptions = [
        lambda o: o.update(id=42),
        lambda o: o.update(turns=[]),
        lambda o: o["turns"][0].update(transcript=None),
        lambda o: o["turns"][0].update(symbols=["a"]),
        lambda o: o["turns"][0].update(features=7),
        lambda o: o["turns"][0]["state"].update(slots=[1, 2]),
    ]
    for corrupt in corruptions:
        obj = json.loads(json.dumps(base))
        corrupt(obj)
        p = tmp_path / f"c{rng.random()}.jsonl"
        p.write_text(json.dumps(obj) + "\n")
        with pytest.raises(CorpusFormatError):
            load_corpus(p)


# --- ontology derivation -----------------------------------------------------

def test_derive_ontology_sorted_dedup():
    corpus = generate_synthetic(SynthSpec(seed=6, n_dialogues=40, turns_max=4))
    onto = derive_ontology(corpus)
    for slot, values in onto.items():
        assert values == sorted(values)
        assert len({v.lower() for v in values}) == len(values)
    assert any(slot.startswith("eats-") for slot in onto)
