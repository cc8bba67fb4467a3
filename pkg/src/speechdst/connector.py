"""Connector: frame stacking + small transformer mapping encoder frames into
the LM embedding space, where they act as soft prompts."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn


@dataclass
class ConnectorConfig:
    encoder_dim: int
    lm_dim: int
    stack_factor: int = 6
    hidden: int = 1024
    layers: int = 2
    heads: int = 16
    ffn_dim: int = 4096
    max_stacked_len: int = 512

    def __post_init__(self):
        for name in ("encoder_dim", "lm_dim", "stack_factor", "hidden",
                     "layers", "heads", "ffn_dim", "max_stacked_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SoftPromptSequence:
    """Soft-prompt embeddings [T' x lm_dim] for one utterance of T frames."""
    embeddings: torch.Tensor
    source_length: int


def stack_downsample(frames: torch.Tensor, k: int) -> torch.Tensor:
    """Stack k neighbouring frames into one vector, k-fold downsampling.

    Input [T x F] -> output [ceil(T/k) x k*F]; the last row is zero-padded
    when T is not a multiple of k.
    """
    if not isinstance(frames, torch.Tensor):
        frames = torch.as_tensor(frames, dtype=torch.float32)
    if frames.dim() != 2 or frames.shape[0] == 0:
        raise ValueError("empty feature sequence")
    if k < 1:
        raise ValueError("stack factor must be >= 1")
    t, f = frames.shape
    t_out = math.ceil(t / k)
    pad = t_out * k - t
    if pad:
        frames = torch.cat([frames, frames.new_zeros(pad, f)], dim=0)
    return frames.reshape(t_out, k * f)


class Connector(nn.Module):
    """Stacking subsampler + input projection + transformer encoder + output
    projection into the LM embedding width.

    Uses learned absolute positional embeddings over stacked positions and
    full bidirectional self-attention within one utterance (no masking).
    """

    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.stack_factor * cfg.encoder_dim, cfg.hidden)
        self.pos_emb = nn.Embedding(cfg.max_stacked_len, cfg.hidden)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.hidden, nhead=cfg.heads, dim_feedforward=cfg.ffn_dim,
            dropout=0.0, batch_first=True, activation="gelu")
        self.transformer = nn.TransformerEncoder(layer, num_layers=cfg.layers)
        self.output_proj = nn.Linear(cfg.hidden, cfg.lm_dim)

    def forward(self, frames: torch.Tensor) -> SoftPromptSequence:
        if frames.dim() != 2 or frames.shape[0] == 0:
            raise ValueError("empty feature sequence")
        if frames.shape[1] != self.cfg.encoder_dim:
            raise ValueError(
                f"feature dim {frames.shape[1]} != encoder_dim {self.cfg.encoder_dim}")
        t = frames.shape[0]
        stacked = stack_downsample(frames, self.cfg.stack_factor)
        if stacked.shape[0] > self.cfg.max_stacked_len:
            raise ValueError(
                f"stacked length {stacked.shape[0]} exceeds max {self.cfg.max_stacked_len}")
        x = self.input_proj(stacked)
        pos = torch.arange(stacked.shape[0], device=x.device)
        x = x + self.pos_emb(pos)
        x = self.transformer(x.unsqueeze(0)).squeeze(0)
        return SoftPromptSequence(embeddings=self.output_proj(x), source_length=t)


def connector_forward(frames: torch.Tensor, connector: Connector) -> SoftPromptSequence:
    """Inference-mode connector application (deterministic, no grad)."""
    was_training = connector.training
    connector.eval()
    try:
        with torch.no_grad():
            return connector(frames)
    finally:
        connector.train(was_training)
