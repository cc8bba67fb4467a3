"""Low-rank adapter injection and merging for the LM's attention projections.

Adapted forward: y = x W + (alpha / r) * x A B, with A drawn from a small
Gaussian and B zero, so an adapted model is numerically identical to its
base at initialization.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn

ALL_ATTENTION_SITES = ("q_proj", "k_proj", "v_proj", "o_proj")


@dataclass
class LoraConfig:
    r: int = 16
    alpha: float | None = None  # defaults to 2 * r
    target_matrices: tuple[str, ...] = ALL_ATTENTION_SITES
    init_std: float = 0.02

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("rank r must be >= 1")
        if self.alpha is None:
            self.alpha = 2.0 * self.r

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_matrices"] = list(self.target_matrices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoraConfig":
        d = dict(d)
        d["target_matrices"] = tuple(d.get("target_matrices", ALL_ATTENTION_SITES))
        return cls(**d)


def lora_site_forward(x: torch.Tensor, w: torch.Tensor, a: torch.Tensor,
                      b: torch.Tensor, alpha: float, r: int) -> torch.Tensor:
    """y = x W + (alpha/r) x A B with W [d_in x d_out], A [d_in x r], B [r x d_out]."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"x last dim {x.shape[-1]} != W rows {w.shape[0]}")
    if a.shape != (w.shape[0], r) or b.shape != (r, w.shape[1]):
        raise ValueError(
            f"factor shapes {tuple(a.shape)}/{tuple(b.shape)} do not match "
            f"W {tuple(w.shape)} at rank {r}")
    return x @ w + (alpha / r) * (x @ a) @ b


class LoraLinear(nn.Module):
    """nn.Linear wrapper adding a trainable low-rank residual path."""

    def __init__(self, base: nn.Linear, cfg: LoraConfig,
                 generator: torch.Generator | None = None):
        super().__init__()
        d_out, d_in = base.weight.shape
        if cfg.r > min(d_in, d_out):
            raise ValueError(f"rank {cfg.r} exceeds min matrix dimension {min(d_in, d_out)}")
        self.base = base
        self.r = cfg.r
        self.alpha = cfg.alpha
        a = torch.empty(d_in, cfg.r)
        a.normal_(0.0, cfg.init_std, generator=generator)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(cfg.r, d_out))
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)

    def forward(self, x):
        return self.base(x) + (self.alpha / self.r) * (x @ self.lora_a) @ self.lora_b

    def merged_linear(self) -> nn.Linear:
        d_out, d_in = self.base.weight.shape
        merged = nn.Linear(d_in, d_out, bias=self.base.bias is not None)
        with torch.no_grad():
            delta = (self.alpha / self.r) * (self.lora_a @ self.lora_b)
            merged.weight.copy_(self.base.weight + delta.t())
            if self.base.bias is not None:
                merged.bias.copy_(self.base.bias)
        return merged


def _site_attr(lm, site: str):
    """Resolve 'blocks.3.attn.q_proj' to (parent module, attr name)."""
    parts = site.split(".")
    obj = lm
    for p in parts[:-1]:
        obj = obj[int(p)] if p.isdigit() else getattr(obj, p)
    return obj, parts[-1]


def inject_lora(lm, cfg: LoraConfig, seed: int | None = None):
    """Wrap every targeted attention projection of `lm` in place.

    Freezes all base LM parameters; only the A/B factors stay trainable.
    Returns `lm` for chaining.
    """
    if getattr(lm, "_lora_injected", False):
        raise ValueError("LoRA already injected into this model")
    sites = lm.attention_sites()
    valid_kinds = sorted({name.rsplit(".", 1)[-1] for name in sites})
    for target in cfg.target_matrices:
        if target not in valid_kinds:
            raise ValueError(
                f"unknown LoRA target site {target!r}; valid sites: {valid_kinds}")
    gen = torch.Generator()
    if seed is not None:
        gen.manual_seed(seed)
    for p in lm.parameters():
        p.requires_grad_(False)
    for name, linear in sites.items():
        if name.rsplit(".", 1)[-1] in cfg.target_matrices:
            parent, attr = _site_attr(lm, name)
            setattr(parent, attr, LoraLinear(linear, cfg, generator=gen))
    lm._lora_injected = True
    lm._lora_config = cfg
    return lm


def lora_parameters(lm):
    for m in lm.modules():
        if isinstance(m, LoraLinear):
            yield m.lora_a
            yield m.lora_b


def base_parameters(lm):
    """LM parameters excluding the low-rank factors."""
    skip = {id(p) for p in lora_parameters(lm)}
    for p in lm.parameters():
        if id(p) not in skip:
            yield p


def merge_lora(adapted):
    """Return a deep-copied plain model with W' = W + (alpha/r) A B per site."""
    if not getattr(adapted, "_lora_injected", False):
        raise ValueError("model has no injected LoRA adapters to merge")
    merged = copy.deepcopy(adapted)
    for name in merged.attention_sites():
        parent, attr = _site_attr(merged, name)
        mod = getattr(parent, attr)
        if isinstance(mod, LoraLinear):
            setattr(parent, attr, mod.merged_linear())
    merged._lora_injected = False
    del merged._lora_config
    return merged
