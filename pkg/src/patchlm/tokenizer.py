"""Deterministic byte-level tokenizer: 256 byte tokens plus BOS/EOS/PAD."""

from __future__ import annotations

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

SPECIAL_NAMES = {BOS_ID: "<s>", EOS_ID: "</s>", PAD_ID: "<pad>"}


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids: list[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def vocab_table() -> dict[int, str]:
    """Self-describing token table for checkpoint headers."""
    table = {i: f"byte:{i}" for i in range(256)}
    table.update({i: name for i, name in SPECIAL_NAMES.items()})
    return table
