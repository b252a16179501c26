"""Word-level tokenizer shared by goals, actions, captions, and the
pretraining corpus.

The environment's text is a closed synthetic vocabulary, so words are
whitespace-delimited and lowercased; there is no subword modeling.
"""

from __future__ import annotations

from typing import Iterable, List, Sequence

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"]


class Vocab:
    """Bijection between non-reserved tokens and ids; ids 0-4 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        self.id_to_token: List[str] = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, text: str) -> List[int]:
        return [self.token_to_id.get(w, UNK) for w in text.lower().split()]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise ValueError(f"id {i} out of range for vocab of {len(self)}")
            if i < len(RESERVED) and i != SEP:
                continue
            words.append(self.id_to_token[i])
        return " ".join(words)

    def save(self, path) -> None:
        """One token per line; line number = id."""
        with open(path, "w", encoding="utf-8") as f:
            for t in self.id_to_token:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        if tokens[:len(RESERVED)] != RESERVED:
            raise ValueError("vocab file does not start with the reserved tokens")
        return cls(tokens[len(RESERVED):])


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Collect every lowercased whitespace-delimited word; ids assigned in
    sorted order so the result is independent of corpus line order."""
    words: set[str] = set()
    empty = True
    for line in corpus:
        empty = False
        words.update(line.lower().split())
    if empty:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(sorted(words))
