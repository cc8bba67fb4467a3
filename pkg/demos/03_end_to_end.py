"""A miniature end-to-end run of the whole framework, via the Python API.

Pipeline: pretrain a byte-level toy LM on formatted dialogue text, run
stage-1 ASR alignment (LM frozen), stage-2 joint ASR-DST (encoder frozen,
LoRA on the LM), then decode a dialogue turn by turn in self-decoded mode.

Budgets here are deliberately tiny so the script finishes in about a minute;
the accuracy is what a minute of CPU buys, not a best effort. The acceptance
suite runs the same recipe with real budgets.
"""

import torch

from speechdst import (ByteTokenizer, Connector, ConnectorConfig, HistoryMode,
                       LmSpec, LoraConfig, SpeechDstModel, StageConfig,
                       SynthSpec, ToyCausalLM, ToyEncoder, evaluate_states,
                       generate_synthetic, pretrain_lm, run_corpus,
                       train_stage1, train_stage2)
from speechdst.training import build_stage2_examples

torch.manual_seed(0)
tok = ByteTokenizer()

# --- data: a deterministic synthetic corpus -----------------------------------
corpus = generate_synthetic(SynthSpec(seed=7, n_dialogues=8, turns_min=1,
                                      turns_max=2))
print(f"{len(corpus)} dialogues, {corpus.turn_count()} turns")

# --- model: toy encoder -> connector -> byte-level LM --------------------------
encoder = ToyEncoder(n_symbols=128, output_dim=32, expansion=4)
connector = Connector(ConnectorConfig(encoder_dim=32, lm_dim=64, stack_factor=4,
                                      hidden=64, heads=4, ffn_dim=128, layers=2,
                                      max_stacked_len=512))
lm = ToyCausalLM(LmSpec(embed_dim=64, layers=2, heads=4, max_context=768))
model = SpeechDstModel(encoder, connector, lm, tok)

# --- phase 0: give the LM its "pretrained" role --------------------------------
# A randomly initialized frozen LM cannot anchor stage-1 ASR; real systems
# start from a pretrained checkpoint, so the toy LM gets a quick text
# pretraining pass over formatted dialogue records first.
texts = [rec.text for _, rec in build_stage2_examples(corpus, tok)]
losses = pretrain_lm(lm, texts, steps=250, batch_size=8, learning_rate=1.5e-3)
print(f"LM pretraining: CE {losses[0]:.2f} -> {losses[-1]:.3f}")

# --- stage 1: ASR alignment, LM frozen -----------------------------------------
cfg1 = StageConfig(stage="asr_pretrain", batch_size=8, learning_rate=1e-3,
                   max_steps=150, eval_interval=75, seed=0)
res1 = train_stage1(model, corpus, cfg1, dev_corpus=corpus)
print(f"stage 1: {res1.steps} steps, dev CE {res1.best_dev_ce:.3f} "
      "(the connector has learned to spell)")

# --- stage 2: joint ASR-DST, encoder frozen, LoRA on the LM ---------------------
cfg2 = StageConfig(stage="joint_dst", batch_size=8, learning_rate=1e-3,
                   max_steps=250, eval_interval=125, seed=0,
                   lora=LoraConfig(r=8))
res2 = train_stage2(model, corpus, cfg2, dev_corpora=corpus)
print(f"stage 2: {res2.steps} steps, dev CE {res2.best_dev_ce:.4f}")

# --- inference: turn-by-turn, feeding its own ASR back into history -------------
preds = run_corpus(model, corpus, HistoryMode("self_decoded"), max_new_tokens=200)
golds = [t.state for d in corpus.dialogues for t in d.turns]
report = evaluate_states([p.state for p in preds], golds,
                         n_dialogues=len(corpus.dialogues))
print()
print(report.to_table())
dlg = corpus.dialogues[0]
print("\nfirst dialogue, decoded:")
for p, t in zip(preds, dlg.turns):
    print(f"  gold: {t.transcript!r:38s} asr: {p.transcription!r}")
    print(f"        gold state {t.state.slots} -> predicted {p.state.slots}")
