"""Whitespace + punctuation tokenizer with a train-split vocabulary.

Tokens are lowercase alphanumeric runs; every other non-space character is
its own token. Ids 0/1/2 are reserved for padding, end-of-sequence, and
unknown. Questions are clipped to 75 tokens; answers to 128 including their
terminal end-of-sequence id.
"""

import re

import numpy as np

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPECIALS = (PAD_TOKEN, EOS_TOKEN, UNK_TOKEN)

QUESTION_CAP = 75
ANSWER_CAP = 128

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text):
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    def __init__(self, tokens):
        """tokens: vocabulary entries beyond the three specials, in id order."""
        self._id_to_token = list(SPECIALS) + list(tokens)
        if len(set(self._id_to_token)) != len(self._id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    @classmethod
    def from_texts(cls, texts):
        """Build the vocabulary from training text only; tokens are ordered
        by descending frequency (ties alphabetical) for stable ids."""
        counts = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    @property
    def vocab_size(self):
        return len(self._id_to_token)

    def token_id(self, token):
        return self._token_to_id.get(token, UNK_ID)

    def _ids(self, text):
        return [self._token_to_id.get(t, UNK_ID) for t in tokenize(text)]

    def encode_question(self, text, width=QUESTION_CAP):
        """(ids, mask), fixed width, no terminal id."""
        ids = self._ids(text)[:width]
        out = np.full(width, PAD_ID, dtype=np.int64)
        mask = np.zeros(width, dtype=bool)
        out[:len(ids)] = ids
        mask[:len(ids)] = True
        return out, mask

    def encode_answer(self, text, width=ANSWER_CAP):
        """(ids, mask), fixed width, end-of-sequence id terminates the text."""
        ids = self._ids(text)[:width - 1] + [EOS_ID]
        out = np.full(width, PAD_ID, dtype=np.int64)
        mask = np.zeros(width, dtype=bool)
        out[:len(ids)] = ids
        mask[:len(ids)] = True
        return out, mask

    def decode(self, ids):
        """Ids back to space-joined text; stops at end-of-sequence, skips
        padding."""
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self._id_to_token[i] if 0 <= i < self.vocab_size
                         else UNK_TOKEN)
        return " ".join(words)

    # -- persistence ---------------------------------------------------------
    def save(self, path):
        """One token per line; the line number is the id."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[:3]) != SPECIALS:
            raise ValueError(f"vocabulary file {path} must start with "
                             f"{SPECIALS}, got {lines[:3]}")
        return cls(lines[3:])

    def to_list(self):
        return list(self._id_to_token)

    @classmethod
    def from_list(cls, tokens):
        if tuple(tokens[:3]) != SPECIALS:
            raise ValueError("vocabulary list must start with the specials")
        return cls(tokens[3:])
