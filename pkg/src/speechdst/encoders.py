"""Speech-encoder interface and two implementations: a trainable toy encoder
over synthetic symbol sequences, and a frozen file-backed encoder serving
precomputed features."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .data_io import read_feature_file


@dataclass
class EncoderSpec:
    kind: str  # "toy" | "precomputed"
    output_dim: int
    frame_rate: float = 50.0

    def __post_init__(self):
        if self.kind not in ("toy", "precomputed"):
            raise ValueError(f"unknown encoder kind: {self.kind!r}")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")


class ToyEncoder(nn.Module):
    """Desk-scale stand-in for a pretrained speech encoder.

    Each input symbol is embedded, repeated `expansion` times with a fixed
    sinusoidal jitter (so repeated frames are not identical), and passed
    through a 1-layer depthwise-ish conv mixer. Output length is exactly
    len(symbols) * expansion.
    """

    def __init__(self, n_symbols: int = 128, output_dim: int = 32, expansion: int = 4):
        super().__init__()
        self.n_symbols = n_symbols
        self.output_dim = output_dim
        self.expansion = expansion
        self.embed = nn.Embedding(n_symbols, output_dim)
        self.mixer = nn.Conv1d(output_dim, output_dim, kernel_size=3, padding=1)
        # fixed per-repeat jitter so the expansion is informative, not copies
        jitter = torch.stack([
            torch.sin(torch.arange(output_dim, dtype=torch.float32) * (i + 1) * 0.5)
            for i in range(expansion)
        ]) * 0.1
        self.register_buffer("jitter", jitter)
        self._trainable = True

    def spec(self) -> EncoderSpec:
        return EncoderSpec(kind="toy", output_dim=self.output_dim)

    def encode(self, symbols) -> torch.Tensor:
        if len(symbols) == 0:
            raise ValueError("empty input utterance")
        ids = torch.as_tensor(list(symbols), dtype=torch.long)
        if ids.min() < 0 or ids.max() >= self.n_symbols:
            raise ValueError(f"symbol id out of range [0, {self.n_symbols})")
        x = self.embed(ids)                                   # [S x D]
        x = x.unsqueeze(1) + self.jitter.unsqueeze(0)         # [S x E x D]
        x = x.reshape(-1, self.output_dim)                    # [S*E x D]
        x = self.mixer(x.t().unsqueeze(0)).squeeze(0).t() + x
        return x

    forward = encode

    def set_trainable(self, flag: bool) -> None:
        self._trainable = bool(flag)
        for p in self.parameters():
            p.requires_grad_(self._trainable)


class PrecomputedEncoder:
    """Frozen encoder backed by on-disk feature files, one per utterance id.

    Emulates a frozen pretrained model: encode() is a pure file read.
    """

    def __init__(self, root: str | Path, output_dim: int):
        self.root = Path(root)
        self.output_dim = output_dim

    def spec(self) -> EncoderSpec:
        return EncoderSpec(kind="precomputed", output_dim=self.output_dim)

    def encode(self, utterance_ref: str) -> torch.Tensor:
        if not utterance_ref:
            raise ValueError("empty input utterance")
        feats = read_feature_file(self.root / utterance_ref)
        if feats.shape[1] != self.output_dim:
            raise ValueError(
                f"feature dim {feats.shape[1]} != declared output_dim {self.output_dim}")
        return torch.from_numpy(feats)

    def set_trainable(self, flag: bool) -> None:
        if flag:
            raise ValueError("encoder not trainable")

    def parameters(self):
        return iter(())
