"""Soft prompts and low-rank adapters, step by step.

Walks through the two model-surgery pieces of the package: the connector
that turns encoder frame sequences into LM soft prompts, and LoRA injection
into the LM's attention projections.
"""

import torch

from speechdst import (Connector, ConnectorConfig, LmSpec, LoraConfig,
                       ToyCausalLM, ToyEncoder, forward_with_prefix,
                       inject_lora, merge_lora, stack_downsample)

torch.manual_seed(0)

# --- 1. frame stacking -------------------------------------------------------
# A speech encoder emits many frames per second; the LM wants far fewer soft
# tokens. stack_downsample concatenates k neighbouring frames into one vector.
frames = torch.randn(10, 8)            # 10 frames, 8 features each
stacked = stack_downsample(frames, 4)  # ceil(10/4) = 3 vectors of 4*8 dims
print(f"stacked {tuple(frames.shape)} -> {tuple(stacked.shape)} "
      "(last row zero-padded)")

# --- 2. encoder -> connector -> soft prompts ---------------------------------
encoder = ToyEncoder(n_symbols=128, output_dim=16, expansion=4)
connector = Connector(ConnectorConfig(encoder_dim=16, lm_dim=32, stack_factor=4,
                                      hidden=32, heads=4, ffn_dim=64, layers=1,
                                      max_stacked_len=128))
utterance = [ord(c) for c in "go north"]       # toy "audio": symbol ids
feats = encoder.encode(utterance)              # [len*expansion x 16]
prompt = connector(feats)                      # SoftPromptSequence
print(f"utterance of {len(utterance)} symbols -> {feats.shape[0]} frames "
      f"-> {prompt.embeddings.shape[0]} soft prompt vectors in LM space")

# --- 3. the soft prefix conditions the LM ------------------------------------
lm = ToyCausalLM(LmSpec(embed_dim=32, layers=2, heads=4, max_context=256))
ids = list(range(40, 50))
with torch.no_grad():
    plain = forward_with_prefix(lm, None, ids)
    prefixed = forward_with_prefix(lm, prompt.embeddings, ids)
print(f"mean |Δlogit| with vs without prefix: "
      f"{(plain - prefixed).abs().mean():.4f} (nonzero: the prefix matters)")

# --- 4. LoRA: identity at init, mergeable after training ---------------------
x = torch.randint(0, 259, (1, 12))
with torch.no_grad():
    base_logits = lm.forward_tokens(x)
inject_lora(lm, LoraConfig(r=4), seed=0)
with torch.no_grad():
    adapted = lm.forward_tokens(x)
print(f"adapted-at-init max |Δ| = {(adapted - base_logits).abs().max():.2e} "
      "(B=0 makes injection an exact identity)")

# train only the factors for a few steps; the base stays frozen
opt = torch.optim.SGD([p for p in lm.parameters() if p.requires_grad], lr=0.1)
for _ in range(10):
    loss = lm.forward_tokens(x).pow(2).mean()
    opt.zero_grad(); loss.backward(); opt.step()

merged = merge_lora(lm)  # W' = W + (alpha/r) A B, folded into plain Linears
with torch.no_grad():
    d = (merged.forward_tokens(x) - lm.forward_tokens(x)).abs().max()
print(f"merged vs adapted max |Δ| = {d:.2e} (merge is exact up to float error)")
