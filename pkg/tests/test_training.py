import math

import pytest
import torch

from speechdst import (ByteTokenizer, Connector, ConnectorConfig, LmSpec,
                       LoraConfig, SpeechDstModel, StageConfig, SynthSpec,
                       ToyCausalLM, ToyEncoder, compute_nll, final_finetune,
                       generate_synthetic, load_checkpoint, pretrain_lm,
                       save_checkpoint, train_stage1, train_stage2)
from speechdst.prompting import build_asr_prompt
from speechdst.training import (_make_optimizer, batch_loss,
                                build_stage1_examples, build_stage2_examples,
                                eval_ce)
from conftest import tiny_model


def small_corpus(seed=3, n=4, turns_max=2):
    return generate_synthetic(SynthSpec(seed=seed, n_dialogues=n, turns_max=turns_max))


# --- StageConfig -------------------------------------------------------------

def test_stage_name_validated():
    with pytest.raises(ValueError, match="unknown stage"):
        StageConfig(stage="stage3")


def test_stage1_forbids_lora_and_freezes_lm():
    with pytest.raises(ValueError, match="must not carry LoRA"):
        StageConfig(stage="asr_pretrain", lora=LoraConfig(r=2))
    cfg = StageConfig(stage="asr_pretrain")
    assert "lm" in cfg.freeze


def test_stage2_freezes_encoder():
    cfg = StageConfig(stage="joint_dst", lora=LoraConfig(r=2))
    assert "encoder" in cfg.freeze


def test_full_finetune_exclusive_with_lora():
    with pytest.raises(ValueError, match="mutually exclusive"):
        StageConfig(stage="joint_dst", lora=LoraConfig(r=2), full_lm_finetune=True)


# --- compute_nll -------------------------------------------------------------

def test_uniform_logits_equal_log_vocab():
    v, n = 259, 12
    logits = torch.zeros(n, v)
    nll = compute_nll(logits, [5] * n, [True] * n)
    assert abs(float(nll) - math.log(v)) < 1e-6


def test_masked_positions_do_not_affect_loss():
    torch.manual_seed(0)
    logits = torch.randn(10, 50)
    targets = [3] * 10
    mask = [True] * 5 + [False] * 5
    a = compute_nll(logits, targets, mask)
    perturbed = [3] * 5 + [49] * 5  # change only masked-out targets
    b = compute_nll(logits, perturbed, mask)
    assert float(a) == float(b)


def test_masked_logit_gradients_exactly_zero():
    torch.manual_seed(0)
    logits = torch.randn(8, 20, requires_grad=True)
    mask = [True, False] * 4
    nll = compute_nll(logits, [1] * 8, mask)
    nll.backward()
    for i, m in enumerate(mask):
        if not m:
            assert torch.all(logits.grad[i] == 0)
        else:
            assert logits.grad[i].abs().sum() > 0


def test_all_masked_error():
    with pytest.raises(ValueError, match="masked out"):
        compute_nll(torch.zeros(3, 5), [0, 1, 2], [False] * 3)


def test_length_mismatch_error():
    with pytest.raises(ValueError, match="lengths differ"):
        compute_nll(torch.zeros(3, 5), [0, 1], [True, True])


def test_batch_loss_matches_compute_nll_single():
    """Batched loss on one no-prefix example equals the per-example path."""
    tok = ByteTokenizer()
    lm = ToyCausalLM(LmSpec(embed_dim=32, layers=1, heads=4, max_context=128))
    rec = build_asr_prompt("go north", tok)
    with torch.no_grad():
        batched = batch_loss(lm, [(None, rec)])
        logits = lm.forward_tokens(torch.tensor([rec.token_ids]))[0]
        # row i predicts token i+1
        nll = compute_nll(logits[:-1], rec.token_ids[1:], rec.loss_mask[1:])
    assert abs(float(batched) - float(nll)) < 1e-5


# --- optimizer / warmup ------------------------------------------------------

def test_linear_warmup_schedule():
    cfg = StageConfig(stage="joint_dst", learning_rate=1.0, warmup_steps=10)
    p = torch.nn.Parameter(torch.zeros(1))
    opt, sched = _make_optimizer([p], cfg)
    lrs = []
    for _ in range(12):
        lrs.append(sched.get_last_lr()[0])
        opt.step()
        sched.step()
    for s in range(10):
        assert lrs[s] == pytest.approx((s + 1) / 10)
    assert lrs[10] == pytest.approx(1.0)
    assert lrs[11] == pytest.approx(1.0)


# --- stage-1: LM frozen ------------------------------------------------------

def test_stage1_lm_checksum_unchanged_and_ce_decreases():
    torch.manual_seed(0)
    model = tiny_model()
    corpus = small_corpus()
    before = {k: v.clone() for k, v in model.lm.state_dict().items()}
    cfg = StageConfig(stage="asr_pretrain", batch_size=4, max_steps=30,
                      eval_interval=10, seed=0)
    res = train_stage1(model, corpus, cfg, dev_corpus=corpus)
    after = model.lm.state_dict()
    for k, v in before.items():
        assert torch.equal(v, after[k]), k
    assert res.steps == 30
    devs = [d for _, _, d in res.history]
    assert devs[-1] < devs[0]


def test_stage1_wrong_stage_rejected():
    model = tiny_model()
    cfg = StageConfig(stage="joint_dst")
    with pytest.raises(ValueError, match="asr_pretrain"):
        train_stage1(model, small_corpus(), cfg)


# --- stage-2: encoder frozen, LoRA on LM -------------------------------------

def test_stage2_encoder_frozen_and_lora_trains():
    torch.manual_seed(0)
    model = tiny_model()
    corpus = small_corpus()
    enc_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    lm_base_before = {k: v.clone() for k, v in model.lm.state_dict().items()}
    cfg = StageConfig(stage="joint_dst", batch_size=4, max_steps=10,
                      eval_interval=100, seed=0, lora=LoraConfig(r=2))
    train_stage2(model, corpus, cfg)
    for k, v in enc_before.items():
        assert torch.equal(v, model.encoder.state_dict()[k]), k
    lm_after = model.lm.state_dict()
    sites = {f"blocks.{i}.attn.{n}_proj"
             for i in range(len(model.lm.blocks)) for n in "qkvo"}
    for k, v in lm_base_before.items():
        # LoRA wrapping renames site params to <site>.base.<param>
        stem, _, leaf = k.rpartition(".")
        after_key = f"{stem}.base.{leaf}" if stem in sites else k
        assert torch.equal(v, lm_after[after_key]), k  # base LM untouched
    assert any(lm_after[k].abs().sum() > 0
               for k in lm_after if k.endswith("lora_b"))


def test_stage2_connector_only_supported():
    torch.manual_seed(0)
    model = tiny_model()
    before = {k: v.clone() for k, v in model.lm.state_dict().items()}
    conn_before = {k: v.clone() for k, v in model.connector.state_dict().items()}
    cfg = StageConfig(stage="joint_dst", batch_size=4, max_steps=5,
                      eval_interval=100, seed=0, lora=None)
    train_stage2(model, small_corpus(), cfg)
    for k, v in before.items():
        assert torch.equal(v, model.lm.state_dict()[k]), k
    assert any(not torch.equal(v, model.connector.state_dict()[k])
               for k, v in conn_before.items())


def test_stage2_corpus_mixing_histogram():
    """Batches drawn from the shuffled union: the long-run draw ratio matches
    the corpus size ratio."""
    import random as _random
    a = small_corpus(seed=1, n=6, turns_max=1)   # 6 examples
    b = small_corpus(seed=2, n=2, turns_max=1)   # 2 examples
    tok = ByteTokenizer()
    ex = (build_stage2_examples(a, tok) + build_stage2_examples(b, tok))
    n_a = len(build_stage2_examples(a, tok))
    # simulate the training loop's epoch-pool sampling over 1000 batches
    rng = _random.Random(0)
    order = list(range(len(ex)))
    pool, drawn_a, total = [], 0, 0
    for _ in range(1000):
        while len(pool) < 4:
            epoch = order[:]
            rng.shuffle(epoch)
            pool.extend(epoch)
        idx, pool = pool[:4], pool[4:]
        drawn_a += sum(1 for i in idx if i < n_a)
        total += 4
    assert drawn_a / total == pytest.approx(n_a / len(ex), abs=0.02)


def test_early_stopping_on_dev_plateau():
    torch.manual_seed(0)
    model = tiny_model()
    corpus = small_corpus(n=2, turns_max=1)
    cfg = StageConfig(stage="joint_dst", batch_size=2, max_steps=2000,
                      eval_interval=5, early_stop_patience=2, seed=0,
                      learning_rate=1e-12, lora=LoraConfig(r=1))
    # with a vanishing LR the dev CE plateaus immediately
    res = train_stage2(model, corpus, cfg, dev_corpora=corpus)
    assert res.stopped_early
    assert res.steps < 2000


def test_final_finetune_exactly_one_epoch():
    torch.manual_seed(0)
    model = tiny_model()
    corpus = small_corpus(n=5, turns_max=2)
    n_examples = sum(len(d.turns) for d in corpus.dialogues)
    cfg = StageConfig(stage="final_ft", batch_size=4, seed=0, lora=LoraConfig(r=2))
    res = final_finetune(model, corpus, cfg)
    assert res.steps == math.ceil(n_examples / 4)


# --- determinism -------------------------------------------------------------

def test_training_deterministic_across_runs():
    results = []
    for _ in range(2):
        torch.manual_seed(0)
        model = tiny_model()
        cfg = StageConfig(stage="asr_pretrain", batch_size=4, max_steps=8,
                          eval_interval=100, seed=0)
        train_stage1(model, small_corpus(), cfg)
        ex = build_stage1_examples(small_corpus(), model.tokenizer)
        results.append(eval_ce(model, ex))
    assert results[0] == results[1]


# --- pretrain_lm -------------------------------------------------------------

def test_pretrain_lm_loss_decreases():
    torch.manual_seed(0)
    lm = ToyCausalLM(LmSpec(embed_dim=32, layers=1, heads=4, max_context=128))
    losses = pretrain_lm(lm, ["go north", "go south"], steps=60, batch_size=4,
                         seed=0, position_jitter=8)
    assert sum(losses[-10:]) / 10 < sum(losses[:10]) / 10


# --- checkpointing -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    model = tiny_model()
    cfg = StageConfig(stage="joint_dst", batch_size=4, max_steps=5,
                      eval_interval=100, seed=0, lora=LoraConfig(r=2))
    train_stage2(model, small_corpus(), cfg)
    save_checkpoint(model, tmp_path / "ckpt", step=5, stage_config=cfg)
    loaded, manifest = load_checkpoint(tmp_path / "ckpt")
    assert manifest["step"] == 5
    assert manifest["lora"]["r"] == 2
    corpus = small_corpus()
    ex = build_stage2_examples(corpus, model.tokenizer)
    assert eval_ce(loaded, ex) == pytest.approx(eval_ce(model, ex), abs=1e-6)


def test_checkpoint_preserves_exact_outputs(tmp_path):
    torch.manual_seed(1)
    model = tiny_model()
    save_checkpoint(model, tmp_path / "c")
    loaded, _ = load_checkpoint(tmp_path / "c")
    corpus = small_corpus(n=1, turns_max=1)
    turn = corpus.dialogues[0].turns[0]
    model.eval_mode()  # loaded checkpoints come back in eval mode
    with torch.no_grad():
        a = model.soft_prefix(turn)
        b = loaded.soft_prefix(turn)
    assert torch.equal(a, b)
