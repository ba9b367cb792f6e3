"""Feature templates, the feature dictionary, tabular I/O and synthetic data."""
from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .crf import ChainSequence, CompiledSequence, LabelAlphabet, LabeledSequence
from .errors import ContractError, TabularFormatError

log = logging.getLogger(__name__)

#: word identity at offsets -1/0/+1, word bigram (0,+1), suffixes 1..3,
#: case/digit shape, bias, and every extra input column at offset 0
DEFAULT_TEMPLATES = ("bias", "w-1", "w0", "w+1", "w0w+1", "suf1", "suf2", "suf3", "shape", "cols")
KNOWN_TEMPLATES = frozenset(DEFAULT_TEMPLATES)

BOS, EOS = "<s>", "</s>"
_LABELS_DIRECTIVE = re.compile(r"^#\s*labels:\s*(.*)$")


def word_shape(word: str) -> str:
    """Collapse a token to its case/digit pattern, e.g. ``"McDonald99" -> "XxXxd"``."""
    out = []
    for ch in word:
        if ch.isupper():
            c = "X"
        elif ch.islower():
            c = "x"
        elif ch.isdigit():
            c = "d"
        else:
            c = ch
        if not out or out[-1] != c:
            out.append(c)
    return "".join(out)


def extract_attributes(seq: ChainSequence, templates: Sequence[str] = DEFAULT_TEMPLATES) -> list[list[str]]:
    """Raw attribute strings firing at each position.

    Only the token window is consulted, so identical windows fire identical
    attributes.
    """
    unknown = set(templates) - KNOWN_TEMPLATES
    if unknown:
        raise ContractError(f"unknown feature templates: {sorted(unknown)}")
    words = [tok[0] for tok in seq.positions]
    T = len(words)
    out = []
    for t, tok in enumerate(seq.positions):
        w = words[t]
        prev = words[t - 1] if t > 0 else BOS
        nxt = words[t + 1] if t + 1 < T else EOS
        attrs = []
        for name in templates:
            if name == "bias":
                attrs.append("bias")
            elif name == "w-1":
                attrs.append("w-1=" + prev)
            elif name == "w0":
                attrs.append("w0=" + w)
            elif name == "w+1":
                attrs.append("w+1=" + nxt)
            elif name == "w0w+1":
                attrs.append("w0w+1=" + w + "|" + nxt)
            elif name.startswith("suf"):
                k = int(name[3:])
                if len(w) >= k:
                    attrs.append(f"{name}={w[-k:]}")
            elif name == "shape":
                attrs.append("shape=" + word_shape(w))
            elif name == "cols":
                attrs.extend(f"c{j}={v}" for j, v in enumerate(tok[1:], start=1))
        out.append(attrs)
    return out


class FeatureIndex:
    """Map from (raw attribute, state) and (state, state) pairs to coordinates.

    Every raw attribute seen in training owns ``K`` consecutive ids
    (``a * K + s``); the ``K * K`` pairwise ids come last.
    """

    def __init__(self, attributes: Iterable[str], K: int, templates: Sequence[str] = DEFAULT_TEMPLATES):
        self.attributes = list(attributes)
        self.attr_ids = {a: i for i, a in enumerate(self.attributes)}
        if len(self.attr_ids) != len(self.attributes):
            raise ContractError("duplicate raw attributes")
        if K < 1:
            raise ContractError("K must be at least 1")
        self.K = int(K)
        self.templates = tuple(templates)

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def pairwise_base(self) -> int:
        return self.n_attributes * self.K

    @property
    def D(self) -> int:
        return self.pairwise_base + self.K * self.K

    def unary_id(self, attribute: str, state: int) -> int | None:
        a = self.attr_ids.get(attribute)
        return None if a is None else a * self.K + state

    def pairwise_id(self, s: int, s_next: int) -> int:
        return self.pairwise_base + s * self.K + s_next

    @property
    def unary_map(self) -> dict[tuple[str, int], int]:
        return {(a, s): i * self.K + s for a, i in self.attr_ids.items() for s in range(self.K)}

    def compile(self, seq, labels=None) -> CompiledSequence:
        """Map a (labeled) sequence onto coordinates; unseen attributes are dropped."""
        if isinstance(seq, LabeledSequence):
            labels = seq.labels if labels is None else labels
            seq = seq.sequence
        per_pos = extract_attributes(seq, self.templates)
        ids_per_pos = [[self.attr_ids[a] for a in attrs if a in self.attr_ids] for attrs in per_pos]
        attrs = np.array(sorted({a for ids in ids_per_pos for a in ids}), dtype=np.int64)
        local = {a: u for u, a in enumerate(attrs.tolist())}
        counts = np.zeros((seq.T, len(attrs)))
        for t, ids in enumerate(ids_per_pos):
            for a in ids:
                counts[t, local[a]] += 1.0
        return CompiledSequence(attrs, counts, labels, self.K, self.pairwise_base)


def build_feature_index(sequences: Iterable[ChainSequence | LabeledSequence], K: int,
                        templates: Sequence[str] = DEFAULT_TEMPLATES) -> FeatureIndex:
    """One pass over the training inputs; attributes are numbered by first appearance."""
    seen: dict[str, None] = {}
    empty = True
    for seq in sequences:
        empty = False
        if isinstance(seq, LabeledSequence):
            seq = seq.sequence
        for attrs in extract_attributes(seq, templates):
            for a in attrs:
                seen.setdefault(a, None)
    if empty:
        raise ContractError("cannot build a feature index from an empty dataset")
    return FeatureIndex(seen.keys(), K, templates)


@dataclass(frozen=True, eq=False)
class Dataset:
    sequences: tuple[LabeledSequence, ...]
    alphabet: LabelAlphabet
    feature_index: FeatureIndex
    compiled: tuple[CompiledSequence, ...]

    def __post_init__(self):
        if len(self.sequences) == 0:
            raise ContractError("a dataset needs at least one sequence")

    @property
    def n(self) -> int:
        return len(self.sequences)

    @property
    def D(self) -> int:
        return self.feature_index.D

    @property
    def K(self) -> int:
        return self.alphabet.K

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.T for s in self.sequences])

    def label_strings(self, i: int) -> list[str]:
        return [self.alphabet.labels[k] if k >= 0 else "?" for k in self.sequences[i].labels]

    @cached_property
    def fingerprint(self) -> str:
        """Content hash over tokens, labels, alphabet and templates."""
        h = hashlib.sha256()
        h.update("\x1f".join(self.alphabet.labels).encode())
        h.update("\x1f".join(self.feature_index.templates).encode())
        h.update(str(self.D).encode())
        for s in self.sequences:
            for tok, y in zip(s.sequence.positions, s.labels):
                h.update(("\x1f".join(tok) + "\x1e" + str(y) + "\n").encode())
            h.update(b"\x1d")
        return h.hexdigest()

    @classmethod
    def from_raw(cls, raw: Sequence[tuple[Sequence[Sequence[str]], Sequence[str]]],
                 alphabet: LabelAlphabet | None = None, feature_index: FeatureIndex | None = None,
                 templates: Sequence[str] = DEFAULT_TEMPLATES) -> "Dataset":
        """Build from ``[(tokens, label_strings), ...]``.

        With a given ``alphabet``, labels outside it become id ``-1`` (useful
        only for evaluation sets).  Without a ``feature_index`` one is built
        from these sequences.
        """
        if len(raw) == 0:
            raise ContractError("a dataset needs at least one sequence")
        if alphabet is None:
            alphabet = LabelAlphabet(tuple(sorted({lab for _, labs in raw for lab in labs})))
        seqs = []
        for tokens, labs in raw:
            chain = ChainSequence(tuple(tuple(tok) for tok in tokens))
            seqs.append(LabeledSequence(chain, tuple(alphabet.get(lab) for lab in labs)))
        if feature_index is None:
            feature_index = build_feature_index(seqs, alphabet.K, templates)
        elif feature_index.K != alphabet.K:
            raise ContractError("feature index and alphabet disagree on K")
        compiled = tuple(feature_index.compile(s) for s in seqs)
        return cls(tuple(seqs), alphabet, feature_index, compiled)

    def to_raw(self):
        return [([tuple(tok) for tok in s.sequence.positions], self.label_strings(i))
                for i, s in enumerate(self.sequences)]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(tuple(self.sequences[i] for i in idx), self.alphabet, self.feature_index,
                       tuple(self.compiled[i] for i in idx))


# ---------------------------------------------------------------------------
# tabular files


def read_tabular(path, label_column: int = -1):
    """Parse a whitespace-column file into ``(raw_sequences, declared_labels)``.

    Blank lines separate sequences, ``#`` lines are comments.  A comment of
    the form ``# labels: A B C`` declares the alphabet order.
    """
    path = Path(path)
    raw = []
    declared = None
    ncols = None
    tokens, labels = [], []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped.startswith("#"):
                m = _LABELS_DIRECTIVE.match(stripped)
                if m:
                    declared = m.group(1).split()
                continue
            if not stripped:
                if tokens:
                    raw.append((tokens, labels))
                    tokens, labels = [], []
                continue
            cols = stripped.split()
            if ncols is None:
                ncols = len(cols)
                if ncols < 2:
                    raise TabularFormatError(f"{path}:{lineno}: need a token and a label column")
                lc = label_column if label_column >= 0 else ncols + label_column
                if not 0 <= lc < ncols:
                    raise TabularFormatError(f"{path}:{lineno}: label column {label_column} out of range")
            elif len(cols) != ncols:
                raise TabularFormatError(
                    f"{path}:{lineno}: expected {ncols} columns, found {len(cols)}"
                )
            labels.append(cols[lc])
            tokens.append(tuple(c for j, c in enumerate(cols) if j != lc))
    if tokens:
        raw.append((tokens, labels))
    if not raw:
        raise TabularFormatError(f"{path}: no sequences found")
    return raw, declared


def load_tabular(path, label_column: int = -1, alphabet: LabelAlphabet | None = None,
                 feature_index: FeatureIndex | None = None,
                 templates: Sequence[str] = DEFAULT_TEMPLATES) -> Dataset:
    raw, declared = read_tabular(path, label_column)
    if alphabet is None and declared:
        alphabet = LabelAlphabet(tuple(declared))
    return Dataset.from_raw(raw, alphabet, feature_index, templates)


def write_tabular(dataset: Dataset, path) -> None:
    """Write tokens with the gold label as the last column."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# labels: " + " ".join(dataset.alphabet.labels) + "\n")
        for i, seq in enumerate(dataset.sequences):
            for tok, lab in zip(seq.sequence.positions, dataset.label_strings(i)):
                fh.write(" ".join(tok) + " " + lab + "\n")
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic data


def _letters(rng: np.random.Generator, k: int) -> str:
    return "".join(chr(ord("a") + int(c)) for c in rng.integers(0, 26, size=k))


@dataclass(frozen=True)
class HiddenMarkovGenerator:
    """Fixed generator: label chain plus state-specific vocabularies."""

    K: int
    start: np.ndarray
    trans: np.ndarray
    vocab: tuple[tuple[str, ...], ...]
    shared_vocab: tuple[str, ...]

    @classmethod
    def make(cls, K: int, seed: int = 0, words_per_state: int = 40, shared_words: int = 60):
        rng = np.random.default_rng([seed, 0x5EED])
        trans = rng.dirichlet(np.full(K, 0.5), size=K)
        trans = 0.5 * trans + 0.5 * np.eye(K)
        start = rng.dirichlet(np.ones(K))
        vocab = []
        for s in range(K):
            suffix = _letters(rng, 2)
            words = []
            for _ in range(words_per_state):
                w = _letters(rng, int(rng.integers(2, 6))) + suffix
                if s == 0:
                    w = w.capitalize()
                elif s == 1 and K > 2:
                    w = w + str(int(rng.integers(0, 100)))
                words.append(w)
            vocab.append(tuple(words))
        shared = tuple(_letters(rng, int(rng.integers(2, 7))) for _ in range(shared_words))
        return cls(K, start, trans, tuple(vocab), shared)


def draw_lengths(rng: np.random.Generator, n: int, law: str, t_max: int = 80) -> np.ndarray:
    """Sequence lengths for ``law`` in ``{"constant:T", "uniform[:lo:hi]", "heavy"}``.

    ``heavy`` is a discrete Pareto law (minimum 4, tail index 1.5) clipped to
    ``[2, t_max]``.
    """
    kind, _, arg = law.partition(":")
    if kind == "constant":
        T = int(arg)
        if T < 1:
            raise ContractError("constant length must be >= 1")
        return np.full(n, T, dtype=np.int64)
    if kind == "uniform":
        lo, hi = (2, t_max) if not arg else map(int, arg.split(":"))
        return rng.integers(lo, hi + 1, size=n)
    if kind == "heavy":
        u = 1.0 - rng.random(n)
        return np.clip(np.floor(4.0 * u ** (-1.0 / 1.5)), 2, t_max).astype(np.int64)
    raise ContractError(f"unknown length law {law!r}")


def synth_raw(n_seq: int, K: int, length_law: str = "heavy", feature_noise: float = 0.1,
              seed: int = 0, t_max: int = 80, noise_columns: int = 0, generator_seed: int = 0):
    if n_seq < 1 or K < 2:
        raise ContractError("need n_seq >= 1 and K >= 2")
    gen = HiddenMarkovGenerator.make(K, generator_seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    lengths = draw_lengths(rng, n_seq, length_law, t_max)
    raw = []
    for T in lengths:
        states = np.empty(T, dtype=np.int64)
        states[0] = rng.choice(K, p=gen.start)
        for t in range(1, T):
            states[t] = rng.choice(K, p=gen.trans[states[t - 1]])
        tokens = []
        for s in states:
            if rng.random() < feature_noise:
                word = gen.shared_vocab[int(rng.integers(len(gen.shared_vocab)))]
            else:
                v = gen.vocab[s]
                # Zipf-like preference for the head of each vocabulary
                word = v[min(int(rng.zipf(1.6)) - 1, len(v) - 1)]
            extra = tuple(f"n{int(x)}" for x in rng.integers(0, 1000, size=noise_columns))
            tokens.append((word,) + extra)
        raw.append((tokens, [f"S{int(s)}" for s in states]))
    return raw


def synth_generate(n_seq: int, K: int, length_law: str = "heavy", feature_noise: float = 0.1,
                   seed: int = 0, *, t_max: int = 80, noise_columns: int = 0, generator_seed: int = 0,
                   alphabet: LabelAlphabet | None = None, feature_index: FeatureIndex | None = None,
                   templates: Sequence[str] = DEFAULT_TEMPLATES) -> Dataset:
    """Sample ``n_seq`` labeled chains from a fixed hidden-Markov generator.

    The generator (transitions, vocabularies) depends only on ``K`` and
    ``generator_seed``; ``seed`` drives the draws, so a held-out set comes
    from the same generator with a different ``seed``.  ``noise_columns``
    appends that many uninformative input columns per token.
    """
    raw = synth_raw(n_seq, K, length_law, feature_noise, seed, t_max, noise_columns, generator_seed)
    if alphabet is None:
        alphabet = LabelAlphabet(tuple(f"S{k}" for k in range(K)))
    return Dataset.from_raw(raw, alphabet, feature_index, templates)


def synth_split(n_train: int, n_test: int, K: int, length_law: str = "heavy",
                feature_noise: float = 0.1, seed: int = 0, **kw) -> tuple[Dataset, Dataset]:
    train = synth_generate(n_train, K, length_law, feature_noise, seed, **kw)
    test = synth_generate(n_test, K, length_law, feature_noise, seed + 7919,
                          alphabet=train.alphabet, feature_index=train.feature_index, **kw)
    return train, test
