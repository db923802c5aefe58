"""Text command corpus: static paraphrases per event, disjoint 80/10/10 splits, vocabulary."""

from __future__ import annotations

import string
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import CorpusError, FormatError, InputError

EVENT_TARGETS = {
    "female": ("gender", "F"),
    "male": ("gender", "M"),
    "non_speech": ("counter", "non_speech"),
    "single": ("counter", "single"),
    "overlap": ("counter", "overlap"),
    "keynote": ("keynote", None),
    "include_enrolled": ("included_id", None),
    "exclude_enrolled": ("excluded_id", None),
}
EVENT_KEYS = tuple(EVENT_TARGETS)
TEXT_ONLY_EVENTS = EVENT_KEYS[:6]
SPLITS = ("train", "val", "test")

PAD, CLS, OOV = "[PAD]", "[CLS]", "[OOV]"
SPECIALS = (PAD, CLS, OOV)

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise FormatError("vocabulary must start with [PAD], [CLS], [OOV]")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise FormatError("vocabulary has duplicate tokens")

    @classmethod
    def from_texts(cls, texts) -> "Vocabulary":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls(list(SPECIALS) + words)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        words = tokenize(text)
        if not words:
            raise InputError(f"text prompt {text!r} has no tokens")
        oov = self.index[OOV]
        return [self.index[CLS]] + [self.index.get(w, oov) for w in words]

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


@dataclass
class TextPromptCorpus:
    entries: list[tuple[str, str, str]]
    vocabulary: Vocabulary
    seed: int = 0
    _by_key: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        by_key = defaultdict(list)
        for event, text, split in self.entries:
            by_key[(event, split)].append(text)
        self._by_key = dict(by_key)

    def texts(self, event: str, split: str) -> list[str]:
        return list(self._by_key.get((event, split), []))

    @property
    def events(self) -> list[str]:
        return sorted({e for e, _, _ in self.entries}, key=lambda e: (EVENT_KEYS + (e,)).index(e))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def load_templates(path=None) -> dict[str, list[str]]:
    """Read ``event_key<TAB>text`` lines; the packaged corpus when ``path`` is None."""
    if path is None:
        content = resources.files("mmtsd.data").joinpath("paraphrases.tsv").read_text(encoding="utf-8")
        name = "paraphrases.tsv"
    else:
        content = Path(path).read_text(encoding="utf-8")
        name = str(path)
    templates: dict[str, list[str]] = defaultdict(list)
    for lineno, line in enumerate(content.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1].strip():
            raise FormatError(f"{name}:{lineno}: expected event_key<TAB>text")
        templates[parts[0]].append(parts[1])
    return dict(templates)


def save_templates(templates: dict[str, list[str]], path):
    with open(path, "w", encoding="utf-8") as f:
        for event, texts in templates.items():
            for t in texts:
                f.write(f"{event}\t{t}\n")


def build_text_corpus(templates: dict[str, list[str]], seed: int = 0,
                      min_paraphrases: int = 20) -> TextPromptCorpus:
    """Split every event's paraphrases 80/10/10.

    Line ``i`` of sibling events shares a sentence frame ("... a female
    speaker ..." / "... a male speaker ..."), so splits are drawn per line
    index with one permutation for all events of equal length: a frame held
    out for one event is held out for all of them.
    """
    entries = []
    for event in sorted(templates):
        texts = list(dict.fromkeys(templates[event]))
        if len(texts) < min_paraphrases:
            raise CorpusError(
                f"event {event!r} has {len(texts)} distinct paraphrases, need {min_paraphrases}")
        order = np.random.default_rng([seed, len(texts)]).permutation(len(texts))
        n_train, n_val, _ = split_sizes(len(texts))
        for rank, i in enumerate(order):
            split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
            entries.append((event, texts[i], split))
    vocab = Vocabulary.from_texts(t for _, t, s in entries if s == "train")
    return TextPromptCorpus(entries, vocab, seed)
