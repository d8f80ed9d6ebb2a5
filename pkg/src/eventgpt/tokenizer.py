"""Byte-level tokenizer with three reserved ids."""

from __future__ import annotations

from dataclasses import dataclass, field

BOS, EOS, EVENT = 0, 1, 2
NUM_SPECIAL = 3
VOCAB_SIZE = 256 + NUM_SPECIAL
SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", EVENT: "<event>"}


class DecodeError(ValueError):
    pass


@dataclass
class TokenSequence:
    ids: list[int]
    supervised_mask: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if not self.supervised_mask:
            self.supervised_mask = [False] * len(self.ids)
        if len(self.supervised_mask) != len(self.ids):
            raise ValueError("mask length must equal ids length")

    def __len__(self) -> int:
        return len(self.ids)


def encode_bytes(data: bytes) -> list[int]:
    return [b + NUM_SPECIAL for b in data]


def decode_bytes(ids, skip_special: bool = False) -> bytes:
    out = bytearray()
    for i in ids:
        i = int(i)
        if NUM_SPECIAL <= i < VOCAB_SIZE:
            out.append(i - NUM_SPECIAL)
        elif i in SPECIAL_NAMES and skip_special:
            continue
        else:
            raise DecodeError(f"token id {i} is not a byte token")
    return bytes(out)


def tokenize(text: str, supervised: bool = False) -> TokenSequence:
    ids = encode_bytes(text.encode("utf-8"))
    return TokenSequence(ids, [supervised] * len(ids))


def detokenize(ids, skip_special: bool = False) -> str:
    """Inverse of :func:`tokenize`; special ids raise unless ``skip_special``.

    Byte runs that are not valid UTF-8 (possible in sampled output) decode
    with replacement characters.
    """
    return decode_bytes(ids, skip_special).decode("utf-8", errors="replace")
