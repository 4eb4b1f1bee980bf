"""Closed-vocabulary tokenizer and instruction-template assembly.

The assembled sequence is::

    <BOS> Video: VT... VS... . Image: VF... . Audio: A... . What is <referent> in video? It is <SEG> <EOS>

Feature rows enter as slots that bypass the embedding table. Dropping a view
for an ablation removes its slots, and its marker text once nothing else
uses that marker.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .config import Ablation

SPECIALS = ("<BOS>", "<EOS>", "<PAD>", "<SEG>")
BOS, EOS, PAD, SEG = range(4)
TEMPLATE_WORDS = ("Video:", ".", "Image:", "Audio:", "What", "is", "in", "video?", "It")
RESPONSE = ("It", "is", "<SEG>", "<EOS>")
VIEWS = ("VT", "VS", "VF", "A")


class VocabError(KeyError):
    pass


class Vocab:
    def __init__(self, words):
        words = sorted(set(words) - set(SPECIALS))
        self.tokens = list(SPECIALS) + words
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"out-of-vocabulary word {token!r}") from None

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        tokens = json.loads(text)["tokens"]
        if tuple(tokens[:4]) != SPECIALS:
            raise VocabError("vocab file does not start with the reserved specials")
        vocab = cls(tokens[4:])
        if vocab.tokens != tokens:
            raise VocabError("vocab file is not in canonical sorted order")
        return vocab

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


def build_vocab(corpus) -> Vocab:
    words = set(TEMPLATE_WORDS)
    for rec in corpus.expressions:
        words.update(rec.text.split())
    return Vocab(words)


@dataclass(frozen=True)
class PromptSequence:
    """Ordered elements: ``("tok", id)`` or ``("feat", view, row)``."""

    elements: tuple
    seg_position: int

    def __len__(self):
        return len(self.elements)

    @property
    def feature_slots(self) -> list[tuple[str, int]]:
        return [(e[1], e[2]) for e in self.elements if e[0] == "feat"]

    @property
    def response_positions(self) -> list[int]:
        """Positions whose next-token logits are scored against the response."""
        return list(range(self.seg_position - 3, self.seg_position + 1))


def _text(vocab, text):
    return [("tok", i) for i in vocab.tokenize(text)]


def assemble(block, audio, referent_text: str, vocab: Vocab, ablation: Ablation | None = None) -> PromptSequence:
    """Lay out the instruction template around the feature views and referent."""
    ab = ablation or Ablation()
    if not referent_text.split():
        raise ValueError("empty referent")
    referent = _text(vocab, referent_text)
    T, L = block.frames, block.patches
    if audio is not None and audio.f_a.shape[0] != T:
        raise ValueError(f"audio has {audio.f_a.shape[0]} frames, video has {T}")
    els = [("tok", BOS)]
    if not (ab.drop_vt and ab.drop_vs):
        els += _text(vocab, "Video:")
        if not ab.drop_vt:
            els += [("feat", "VT", t) for t in range(T)]
        if not ab.drop_vs:
            els += [("feat", "VS", l) for l in range(L)]
    if not ab.drop_vf:
        els += _text(vocab, ". Image:")
        els += [("feat", "VF", l) for l in range(L)]
    if not ab.drop_audio:
        els += _text(vocab, ". Audio:")
        els += [("feat", "A", t) for t in range(T)]
    els += _text(vocab, ". What is")
    els += referent
    els += _text(vocab, "in video?")
    els += [("tok", vocab.id(w)) for w in RESPONSE]
    seg = len(els) - 2
    return PromptSequence(tuple(els), seg)


def prefix_length(T: int, L: int, ablation: Ablation | None = None) -> int:
    """Elements before the referent; the <SEG> index is prefix + referent + 2 + 2."""
    ab = ablation or Ablation()
    n = 1
    if not (ab.drop_vt and ab.drop_vs):
        n += 1 + (0 if ab.drop_vt else T) + (0 if ab.drop_vs else L)
    if not ab.drop_vf:
        n += 2 + L
    if not ab.drop_audio:
        n += 2 + T
    return n + 3


SUFFIX_LENGTH = 2  # "in video?"


def response_targets(vocab: Vocab) -> list[int]:
    return [vocab.id(w) for w in RESPONSE]
