"""Toy byte-level causal transformer LM plus the soft-prefix forward and
greedy generation used by the whole pipeline.

The LM exposes named attention projection sites (q_proj/k_proj/v_proj/o_proj
per block) so low-rank adapters can be injected by site name, and supports a
simple KV cache for incremental greedy decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import ByteTokenizer


@dataclass
class LmSpec:
    vocab_size: int = 259
    embed_dim: int = 128
    layers: int = 4
    heads: int = 4
    max_context: int = 1024

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


class SelfAttention(nn.Module):
    def __init__(self, spec: LmSpec):
        super().__init__()
        self.heads = spec.heads
        self.head_dim = spec.embed_dim // spec.heads
        self.q_proj = nn.Linear(spec.embed_dim, spec.embed_dim)
        self.k_proj = nn.Linear(spec.embed_dim, spec.embed_dim)
        self.v_proj = nn.Linear(spec.embed_dim, spec.embed_dim)
        self.o_proj = nn.Linear(spec.embed_dim, spec.embed_dim)

    def forward(self, x, attn_bias=None, past_kv=None):
        # x: [B x N x D]; attn_bias: additive mask [B x 1 x N x N_total] or None
        b, n, d = x.shape

        def split(t):
            return t.view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        if past_kv is not None:
            pk, pv = past_kv
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        new_kv = (k, v)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_bias)
        out = out.transpose(1, 2).contiguous().view(b, n, d)
        return self.o_proj(out), new_kv


class Block(nn.Module):
    def __init__(self, spec: LmSpec):
        super().__init__()
        self.ln1 = nn.LayerNorm(spec.embed_dim)
        self.attn = SelfAttention(spec)
        self.ln2 = nn.LayerNorm(spec.embed_dim)
        self.mlp = nn.Sequential(
            nn.Linear(spec.embed_dim, 4 * spec.embed_dim),
            nn.GELU(),
            nn.Linear(4 * spec.embed_dim, spec.embed_dim),
        )

    def forward(self, x, attn_bias=None, past_kv=None):
        a, new_kv = self.attn(self.ln1(x), attn_bias, past_kv)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, new_kv


class ToyCausalLM(nn.Module):
    """Byte-level decoder-only transformer. Inputs may be token ids or
    already-embedded vectors (soft prompts)."""

    def __init__(self, spec: LmSpec | None = None):
        super().__init__()
        self.spec = spec or LmSpec()
        s = self.spec
        self.tok_emb = nn.Embedding(s.vocab_size, s.embed_dim)
        self.pos_emb = nn.Embedding(s.max_context, s.embed_dim)
        self.blocks = nn.ModuleList(Block(s) for _ in range(s.layers))
        self.ln_f = nn.LayerNorm(s.embed_dim)
        self.head = nn.Linear(s.embed_dim, s.vocab_size, bias=False)

    @property
    def embed_dim(self) -> int:
        return self.spec.embed_dim

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def attention_sites(self) -> dict[str, nn.Linear]:
        """Named injectable projection matrices."""
        sites = {}
        for i, blk in enumerate(self.blocks):
            for name in ("q_proj", "k_proj", "v_proj", "o_proj"):
                sites[f"blocks.{i}.attn.{name}"] = getattr(blk.attn, name)
        return sites

    def forward_embeddings(self, embs: torch.Tensor,
                           key_padding_mask: torch.Tensor | None = None,
                           past_kvs=None, past_len: int = 0,
                           return_hidden: bool = False,
                           pos_offset: int = 0):
        """embs: [B x N x D] -> (logits [B x N x V], new_kvs).

        key_padding_mask: [B x N_total] True at padded positions. With
        return_hidden the pre-head hidden states are returned instead of
        logits (callers apply ln_f + head themselves, e.g. only at loss
        positions).
        """
        b, n, _ = embs.shape
        total = past_len + n
        if total + pos_offset > self.spec.max_context:
            raise ValueError(
                f"context overflow: length {total + pos_offset} exceeds max_context "
                f"{self.spec.max_context} by {total + pos_offset - self.spec.max_context}")
        pos = torch.arange(past_len + pos_offset, total + pos_offset, device=embs.device)
        x = embs + self.pos_emb(pos)
        causal = torch.full((n, total), float("-inf"), device=embs.device)
        causal = torch.triu(causal, diagonal=past_len + 1)
        bias = causal.view(1, 1, n, total)
        if key_padding_mask is not None:
            pad = torch.where(key_padding_mask, float("-inf"), 0.0)
            bias = bias + pad.view(b, 1, 1, total)
        new_kvs = []
        for i, blk in enumerate(self.blocks):
            past = past_kvs[i] if past_kvs is not None else None
            x, kv = blk(x, bias, past)
            new_kvs.append(kv)
        if return_hidden:
            return x, new_kvs
        logits = self.head(self.ln_f(x))
        return logits, new_kvs

    def forward_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        """Plain LM forward: logits [B x N x V], row t predicting token t+1."""
        logits, _ = self.forward_embeddings(self.embed_tokens(ids))
        return logits


def forward_with_prefix(lm: ToyCausalLM, soft_prefix, token_ids) -> torch.Tensor:
    """Logits [L x vocab] over the token span of [prefix || tokens].

    With a non-empty prefix, row i is the logit vector predicting token i
    (row 0 comes from the last prefix position). With an empty prefix this is
    the plain LM forward (row i predicts token i+1).
    """
    ids = torch.as_tensor(list(token_ids), dtype=torch.long)
    tok_emb = lm.embed_tokens(ids)
    prefix = None
    if soft_prefix is not None:
        prefix = soft_prefix.embeddings if hasattr(soft_prefix, "embeddings") else soft_prefix
        if prefix is not None and prefix.shape[0] == 0:
            prefix = None
    if prefix is None:
        logits, _ = lm.forward_embeddings(tok_emb.unsqueeze(0))
        return logits.squeeze(0)
    if prefix.shape[1] != lm.embed_dim:
        raise ValueError(f"prefix dim {prefix.shape[1]} != lm embed_dim {lm.embed_dim}")
    p = prefix.shape[0]
    embs = torch.cat([prefix, tok_emb], dim=0).unsqueeze(0)
    logits, _ = lm.forward_embeddings(embs)
    return logits.squeeze(0)[p - 1: p - 1 + ids.shape[0]]


class JsonBalanceTracker:
    """Streams characters and reports when a top-level JSON object closes.

    Tracks brace depth outside of string literals, honoring escapes.
    """

    def __init__(self):
        self.depth = 0
        self.in_string = False
        self.escaped = False
        self.opened = False

    def feed(self, text: str) -> None:
        for ch in text:
            if self.in_string:
                if self.escaped:
                    self.escaped = False
                elif ch == "\\":
                    self.escaped = True
                elif ch == '"':
                    self.in_string = False
            elif ch == '"':
                self.in_string = True
            elif ch == "{":
                self.depth += 1
                self.opened = True
            elif ch == "}":
                self.depth -= 1

    @property
    def balanced(self) -> bool:
        return self.opened and self.depth <= 0


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: str
    truncated: bool


def generate(lm: ToyCausalLM, soft_prefix, prompt_token_ids,
             tokenizer: ByteTokenizer | None = None,
             max_new_tokens: int = 512,
             prompt_text: str = "") -> GenerationResult:
    """Greedy (temperature-0) decoding with KV cache.

    Stops when the running text (prompt_text + continuation) forms a balanced
    top-level JSON object, when EOS is produced, or at max_new_tokens (the
    last case sets truncated=True).
    """
    tokenizer = tokenizer or ByteTokenizer()
    tracker = JsonBalanceTracker()
    tracker.feed(prompt_text)
    was_training = lm.training
    lm.eval()
    try:
        with torch.no_grad():
            ids = torch.as_tensor(list(prompt_token_ids), dtype=torch.long)
            tok_emb = lm.embed_tokens(ids)
            prefix = None
            if soft_prefix is not None:
                prefix = (soft_prefix.embeddings
                          if hasattr(soft_prefix, "embeddings") else soft_prefix)
            embs = tok_emb if prefix is None else torch.cat([prefix, tok_emb], dim=0)
            logits, kvs = lm.forward_embeddings(embs.unsqueeze(0))
            past_len = embs.shape[0]
            out: list[int] = []
            truncated = True
            for _ in range(max_new_tokens):
                nxt = int(logits[0, -1].argmax())
                if nxt == tokenizer.EOS:
                    truncated = False
                    break
                out.append(nxt)
                piece = tokenizer.decode([nxt])
                tracker.feed(piece)
                if tracker.balanced:
                    truncated = False
                    break
                step = lm.embed_tokens(torch.tensor([[nxt]]))
                logits, kvs = lm.forward_embeddings(step, past_kvs=kvs,
                                                    past_len=past_len)
                past_len += 1
            if max_new_tokens == 0:
                truncated = False
    finally:
        lm.train(was_training)
    return GenerationResult(out, tokenizer.decode(out), truncated)
