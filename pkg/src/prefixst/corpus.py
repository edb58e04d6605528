"""Tokenization, vocabulary, dataset loading/batching, and a synthetic
two-style corpus generator.

Corpus files are UTF-8 text, one whitespace-tokenized sentence per line,
one file per (style, split): ``train.0.txt``, ``train.1.txt``, ``dev.0.txt``,
... Optional human references for the test split live in ``test.<s>.ref.txt``
(the target-style rewrite of each test sentence, line-aligned).
"""

from __future__ import annotations

import sys
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
SEP_ID = 3
UNK_ID = 4
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"]

SPLITS = ("train", "dev", "test")


class Vocab:
    """Token <-> id bijection with fixed reserved ids first."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            tokens = RESERVED_TOKENS + tokens
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in text.split()]

    def detokenize(self, ids) -> str:
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text().splitlines()
        return cls(tokens)


def build_vocab(files, min_freq: int = 1) -> Vocab:
    """Frequency-then-lexicographic vocabulary over whitespace tokens."""
    counts: Counter = Counter()
    for f in files:
        for line in Path(f).read_text().splitlines():
            counts.update(line.split())
    if not counts:
        raise ValueError(f"empty corpus: no tokens found in {list(map(str, files))}")
    kept = [(t, c) for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocab(RESERVED_TOKENS + [t for t, _ in kept])


@dataclass
class Example:
    ids: list[int]
    style: int


@dataclass
class Dataset:
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    # line-aligned with `test`; empty when no reference files exist
    test_references: list[list[int]] = field(default_factory=list)

    def split(self, name: str) -> list[Example]:
        return getattr(self, name)


def _read_sentences(path: Path) -> list[str]:
    if not path.exists():
        raise FileNotFoundError(f"corpus file missing: {path}")
    return [line for line in path.read_text().splitlines() if line.strip()]


def load_dataset(corpus_dir: str | Path, vocab: Vocab, max_len: int = 48) -> Dataset:
    """Load the six split files (plus optional test references) under a directory."""
    corpus_dir = Path(corpus_dir)
    splits: dict[str, list[Example]] = {}
    truncated = 0
    for split in SPLITS:
        items: list[Example] = []
        for style in (0, 1):
            for line in _read_sentences(corpus_dir / f"{split}.{style}.txt"):
                ids = vocab.tokenize(line)
                if len(ids) > max_len:
                    ids = ids[:max_len]
                    truncated += 1
                items.append(Example(ids, style))
        splits[split] = items
    if truncated:
        print(f"warning: truncated {truncated} sentences to {max_len} tokens", file=sys.stderr)

    refs: list[list[int]] = []
    ref0, ref1 = corpus_dir / "test.0.ref.txt", corpus_dir / "test.1.ref.txt"
    if ref0.exists() and ref1.exists():
        for path in (ref0, ref1):
            refs.extend(vocab.tokenize(line) for line in _read_sentences(path))
        if len(refs) != len(splits["test"]):
            raise ValueError(
                f"reference count {len(refs)} does not match test size {len(splits['test'])}"
            )
    return Dataset(splits["train"], splits["dev"], splits["test"], refs)


# ---------------------------------------------------------------------------
# synthetic two-style corpus
# ---------------------------------------------------------------------------

_TEMPLATES = [
    "the {noun} was really {S}",
    "the {noun} at the {place} was {S}",
    "my {person} said the {noun} was {S}",
    "honestly the {noun} seemed {S} to me",
    "the {noun} was {S} and so was the {noun2}",
    "we thought the {place} was {S} overall",
    "that {place} had {S} {noun}",
    "the {noun} tasted {S} yesterday evening",
    "service at the {place} felt {S} last {day}",
    "my {person} found the {noun} quite {S}",
    "both the {noun} and the {noun2} were {S}",
    "visiting the {place} on {day} was a {S} idea",
]

# lexicons are index-paired so references can swap word i <-> word i
_STYLE_LEXICONS = (
    ["good", "great", "tasty", "lovely", "friendly",
     "pleasant", "excellent", "wonderful", "charming", "superb"],
    ["bad", "awful", "bland", "dreadful", "rude",
     "unpleasant", "terrible", "horrible", "gloomy", "dire"],
)

_POOLS = {
    "noun": ["soup", "bread", "coffee", "cake", "pasta", "salad", "cheese", "stew",
             "pie", "toast", "tea", "curry", "burger", "rice", "noodles", "waffle",
             "omelet", "pudding", "biscuit", "salmon", "dumplings", "pancake",
             "brownie", "muffin"],
    "place": ["cafe", "diner", "bakery", "bistro", "tavern", "market", "kitchen",
              "inn", "lounge", "deli", "terrace", "rooftop", "garden", "pub"],
    "person": ["friend", "sister", "brother", "neighbor", "cousin", "colleague",
               "uncle", "aunt", "mentor", "roommate"],
    "day": ["monday", "tuesday", "friday", "saturday", "sunday", "weekend"],
}


@dataclass
class SynthSpec:
    templates: list[str] = field(default_factory=lambda: list(_TEMPLATES))
    style_lexicons: tuple[list[str], list[str]] = _STYLE_LEXICONS
    pools: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in _POOLS.items()})
    train_per_style: int = 500
    dev_per_style: int = 100
    test_per_style: int = 100
    seed: int = 42

    def validate(self) -> None:
        overlap = set(self.style_lexicons[0]) & set(self.style_lexicons[1])
        if overlap:
            raise ValueError(f"style lexicons overlap: {sorted(overlap)}")
        if len(self.style_lexicons[0]) != len(self.style_lexicons[1]):
            raise ValueError("style lexicons must be index-paired (equal lengths)")
        for name, words in self.pools.items():
            clash = (set(words) & set(self.style_lexicons[0])) | (set(words) & set(self.style_lexicons[1]))
            if clash:
                raise ValueError(f"pool {name!r} contains style words: {sorted(clash)}")


def _fill_template(template: str, style: int, spec: SynthSpec, rng: np.random.Generator):
    words = []
    style_word_idx = int(rng.integers(len(spec.style_lexicons[style])))
    used: dict[str, str] = {}
    for tok in template.split():
        if tok == "{S}":
            words.append(spec.style_lexicons[style][style_word_idx])
        elif tok.startswith("{"):
            slot = tok[1:-1]
            pool = spec.pools[slot.rstrip("0123456789")]
            choice = pool[int(rng.integers(len(pool)))]
            # distinct filler for a repeated pool within one sentence
            while slot.rstrip("0123456789") in ("noun",) and choice in used.values():
                choice = pool[int(rng.integers(len(pool)))]
            used[slot] = choice
            words.append(choice)
        else:
            words.append(tok)
    style_word = spec.style_lexicons[style][style_word_idx]
    opposite = spec.style_lexicons[1 - style][style_word_idx]
    reference = [opposite if w == style_word else w for w in words]
    return " ".join(words), " ".join(reference)


def synth_corpus(spec: SynthSpec, out_dir: str | Path) -> list[Path]:
    """Write the six split files plus test references; deterministic per seed."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    counts = {"train": spec.train_per_style, "dev": spec.dev_per_style, "test": spec.test_per_style}
    written: list[Path] = []
    for split in SPLITS:
        for style in (0, 1):
            sentences, references = [], []
            for _ in range(counts[split]):
                t = spec.templates[int(rng.integers(len(spec.templates)))]
                s, r = _fill_template(t, style, spec, rng)
                sentences.append(s)
                references.append(r)
            path = out_dir / f"{split}.{style}.txt"
            path.write_text("\n".join(sentences) + "\n")
            written.append(path)
            if split == "test":
                ref_path = out_dir / f"test.{style}.ref.txt"
                ref_path.write_text("\n".join(references) + "\n")
                written.append(ref_path)
    return written


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray      # (B, T) int64, PAD-padded to the longest sentence
    lengths: np.ndarray  # (B,)
    styles: np.ndarray   # (B,)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(examples: list[Example]) -> Batch:
    max_len = max(len(e.ids) for e in examples)
    ids = np.full((len(examples), max_len), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(examples), dtype=np.int64)
    styles = np.zeros(len(examples), dtype=np.int64)
    for i, e in enumerate(examples):
        ids[i, : len(e.ids)] = e.ids
        lengths[i] = len(e.ids)
        styles[i] = e.style
    return Batch(ids, lengths, styles)


def batch_iterator(
    examples: list[Example],
    batch_size: int,
    rng: np.random.Generator,
    shuffle: bool = True,
):
    """One epoch of PAD-padded batches; reuse the generator across epochs for
    a fresh deterministic shuffle each time."""
    order = np.arange(len(examples))
    if shuffle:
        rng.shuffle(order)
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        yield make_batch(chunk)
