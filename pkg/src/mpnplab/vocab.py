"""Fixed word-level vocabulary and the prompt layout ``question:{Q}</s>answer:{A}</s>``."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import synthdata as sd

PAD, EOS, QUESTION, ANSWER = "<pad>", "</s>", "question:", "answer:"


def _question_words() -> list[str]:
    words: list[str] = []
    for qtype in sd.QTYPES:
        for shape in sd.SHAPES:
            for w in sd.question_text(qtype, shape).split():
                if w not in words:
                    words.append(w)
    return words


class Vocab:
    def __init__(self, words: Sequence[str] | None = None):
        if words is None:
            words = [PAD, EOS, QUESTION, ANSWER, *_question_words(),
                     *[a for a in sd.ANSWERS if a not in _question_words()]]
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids)

    def prompt_ids(self, question: str) -> list[int]:
        return self.encode([QUESTION, *question.split(), EOS, ANSWER])

    def full_ids(self, question: str, answer: str) -> list[int]:
        return self.prompt_ids(question) + self.encode([*answer.split(), EOS])


def make_lm_batch(vocab: Vocab, questions: Sequence[str], answers: Sequence[str]):
    """Right-padded next-token arrays for a batch.

    Returns ``(inputs, targets, answer_mask)``, each ``(B, S)``; the mask flags
    target positions holding answer tokens or the closing EOS.
    """
    seqs, plens = [], []
    for q, a in zip(questions, answers):
        seqs.append(vocab.full_ids(q, a))
        plens.append(len(vocab.prompt_ids(q)))
    S = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inputs = np.full((B, S), vocab.pad_id, dtype=np.int64)
    targets = np.full((B, S), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    for b, (s, pl) in enumerate(zip(seqs, plens)):
        inputs[b, :len(s) - 1] = s[:-1]
        targets[b, :len(s) - 1] = s[1:]
        mask[b, pl - 1:len(s) - 1] = True
    return inputs, targets, mask
