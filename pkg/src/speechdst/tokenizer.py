"""Byte-level tokenizer.

Text is encoded as raw UTF-8 bytes (ids 0-255) plus three special ids, so no
external tokenizer or vocabulary file is ever needed.
"""

from __future__ import annotations


class ByteTokenizer:
    """Maps text to UTF-8 byte ids with BOS/EOS/PAD specials."""

    BOS = 256
    EOS = 257
    PAD = 258

    @property
    def vocab_size(self) -> int:
        return 259

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids = list(text.encode("utf-8"))
        if add_bos:
            ids = [self.BOS] + ids
        if add_eos:
            ids = ids + [self.EOS]
        return ids

    def decode(self, ids) -> str:
        raw = bytes(i for i in ids if 0 <= i < 256)
        return raw.decode("utf-8", errors="replace")

    def spec(self) -> dict:
        """Serializable description, stored in checkpoint manifests."""
        return {"type": "byte", "vocab_size": self.vocab_size,
                "bos": self.BOS, "eos": self.EOS, "pad": self.PAD}

    @classmethod
    def from_spec(cls, spec: dict) -> "ByteTokenizer":
        if spec.get("type") != "byte":
            raise ValueError(f"unknown tokenizer type: {spec.get('type')!r}")
        return cls()
