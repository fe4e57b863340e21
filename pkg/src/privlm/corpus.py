"""Text corpus handling: tokenization, vocabularies, canary planting, splits.

A corpus is a list of token sequences over a shared vocabulary. Input files
are UTF-8 plain text, one sequence per line, tokenized on whitespace. Lines
with fewer than two tokens are dropped: a language-model training example
needs at least one context token and one target token.

All randomness (splits, planting positions, batch shuffles) flows from
explicit integer seeds, so every derived object is reproducible.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

UNK_TOKEN = "<unk>"

# Hard ceiling on canary candidate enumeration; ranking is exact, not sampled.
DEFAULT_ENUMERATION_CAP = 10_000


class CorpusError(ValueError):
    """Raised for malformed corpus inputs or invalid corpus operations."""


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Whitespace word tokenization, optionally lowercased."""
    if lowercase:
        text = text.lower()
    return text.split()


class Vocabulary:
    """Bidirectional token/id map with a reserved unknown token at id 0.

    Ids are contiguous integers starting at 0. Tokens added later (e.g. by
    canary planting) are appended, so existing ids never change.
    """

    def __init__(self, tokens: list[str] | None = None):
        self._token_to_id: dict[str, int] = {UNK_TOKEN: 0}
        self._id_to_token: list[str] = [UNK_TOKEN]
        for tok in tokens or []:
            self.add(tok)

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def add(self, token: str) -> int:
        """Add a token if absent; return its id."""
        if not token or any(ch.isspace() for ch in token):
            raise CorpusError(f"invalid vocabulary token: {token!r}")
        tid = self._token_to_id.get(token)
        if tid is None:
            tid = len(self._id_to_token)
            self._token_to_id[token] = tid
            self._id_to_token.append(token)
        return tid

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, self.unk_id)

    def token_of(self, tid: int) -> str:
        return self._id_to_token[tid]

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self._token_to_id.get(t, 0) for t in tokens]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self._id_to_token[i] for i in ids)

    def save(self, path: str | Path) -> None:
        """Persist as one token per line; the line number is the id."""
        Path(path).write_text("\n".join(self._id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != UNK_TOKEN:
            raise CorpusError(f"vocabulary file {path} must start with {UNK_TOKEN}")
        vocab = cls()
        for tok in lines[1:]:
            vocab.add(tok)
        return vocab


@dataclass(frozen=True)
class TokenSequence:
    """An encoded sequence plus the original text it came from.

    The source text is retained because the sensitivity detector consumes
    raw text, not token ids.
    """

    ids: tuple[int, ...]
    source_text: str

    def __post_init__(self):
        if not self.ids:
            raise CorpusError("empty token sequence")

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_text(
        cls,
        text: str,
        vocabulary: Vocabulary,
        lowercase: bool = True,
        max_len: int | None = None,
    ) -> "TokenSequence":
        tokens = tokenize(text, lowercase)
        if max_len is not None:
            tokens = tokens[:max_len]
        return cls(ids=tuple(vocabulary.encode_tokens(tokens)), source_text=text)


@dataclass
class Corpus:
    """A list of token sequences sharing one vocabulary.

    ``labels`` optionally marks each sequence as sensitive (True) or not;
    it is kept aligned with ``sequences`` by every operation here.
    """

    sequences: list[TokenSequence]
    vocabulary: Vocabulary
    labels: list[bool] | None = None

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.sequences):
            raise CorpusError("labels length does not match sequence count")

    def __len__(self) -> int:
        return len(self.sequences)

    def texts(self) -> list[str]:
        return [s.source_text for s in self.sequences]


@dataclass(frozen=True)
class CanaryTemplate:
    """A secret-sentence template: fixed prefix plus a random slot.

    The slot is ``slot_count`` characters drawn from ``slot_alphabet``,
    appended to the prefix as a single token. The candidate space has
    ``len(slot_alphabet) ** slot_count`` fills, enumerated in lexicographic
    order of the alphabet as given.
    """

    prefix: str
    slot_alphabet: str
    slot_count: int

    def __post_init__(self):
        if self.slot_count < 0:
            raise CorpusError("slot_count must be >= 0")
        if self.slot_count > 0 and not self.slot_alphabet:
            raise CorpusError("slot_alphabet must be non-empty when slot_count > 0")
        if len(set(self.slot_alphabet)) != len(self.slot_alphabet):
            raise CorpusError("slot_alphabet contains duplicate characters")
        if any(ch.isspace() for ch in self.slot_alphabet):
            raise CorpusError("slot_alphabet must not contain whitespace")

    @property
    def candidate_space_size(self) -> int:
        return len(self.slot_alphabet) ** self.slot_count if self.slot_count else 1

    def fills(self) -> Iterator[str]:
        """All candidate fills in deterministic lexicographic order."""
        if self.slot_count == 0:
            yield ""
            return
        for combo in itertools.product(self.slot_alphabet, repeat=self.slot_count):
            yield "".join(combo)

    def is_valid_fill(self, fill: str) -> bool:
        return len(fill) == self.slot_count and all(c in self.slot_alphabet for c in fill)

    def sentence(self, fill: str) -> str:
        if not self.is_valid_fill(fill):
            raise CorpusError(
                f"fill {fill!r} is not in the slot space "
                f"(alphabet {self.slot_alphabet!r}, {self.slot_count} chars)"
            )
        return (self.prefix + fill).strip() if fill else self.prefix.strip()


def load_corpus(
    path: str | Path,
    lowercase: bool = True,
    min_count: int = 1,
    max_len: int = 64,
    labels_path: str | Path | None = None,
) -> Corpus:
    """Load a one-sequence-per-line text file and build its vocabulary.

    Tokens occurring fewer than ``min_count`` times map to the unknown id.
    Lines that tokenize to fewer than two tokens are dropped. An optional
    labels sidecar (one ``0``/``1`` per retained line, same order) marks
    sensitive sequences.
    """
    path = Path(path)
    try:
        raw_lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus file {path}: {exc}") from exc

    kept: list[tuple[str, list[str]]] = []
    for line in raw_lines:
        tokens = tokenize(line, lowercase)[:max_len]
        if len(tokens) >= 2:
            kept.append((line, tokens))
    if not kept:
        raise CorpusError(f"corpus {path} is empty after filtering")

    counts: Counter[str] = Counter()
    for _, tokens in kept:
        counts.update(tokens)
    # Deterministic vocabulary order: frequency descending, then lexicographic.
    retained = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    vocab = Vocabulary(retained)

    sequences = [
        TokenSequence(ids=tuple(vocab.encode_tokens(tokens)), source_text=line)
        for line, tokens in kept
    ]

    labels = None
    if labels_path is not None:
        label_lines = Path(labels_path).read_text(encoding="utf-8").split()
        if len(label_lines) != len(sequences):
            raise CorpusError(
                f"labels file has {len(label_lines)} entries for {len(sequences)} sequences"
            )
        labels = [v == "1" for v in label_lines]

    return Corpus(sequences=sequences, vocabulary=vocab, labels=labels)


def split_corpus(corpus: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Deterministic seeded shuffle and partition into (train, test).

    Sizes are ceil(f*N) and N - ceil(f*N); both halves share the vocabulary
    object so later extensions stay consistent.
    """
    if not (0.0 < train_fraction < 1.0):
        raise CorpusError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(corpus)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(n)
    # Guard against float slop like 0.7*10 = 6.999...96 when f*N is integral.
    n_train = int(math.ceil(train_fraction * n - 1e-9))
    train_idx, test_idx = order[:n_train], order[n_train:]

    def take(idx: np.ndarray) -> Corpus:
        seqs = [corpus.sequences[i] for i in idx]
        labels = [corpus.labels[i] for i in idx] if corpus.labels is not None else None
        return Corpus(sequences=seqs, vocabulary=corpus.vocabulary, labels=labels)

    return take(train_idx), take(test_idx)


def extend_vocabulary_for_template(
    corpus: Corpus, template: CanaryTemplate, cap: int = DEFAULT_ENUMERATION_CAP
) -> None:
    """Add the template's prefix tokens and every candidate fill to the vocabulary.

    Exposure ranking compares the model's perplexity across the whole fill
    space, so every fill must be a real vocabulary entry; otherwise unseen
    fills collapse onto the unknown token and ranks degenerate.
    """
    if template.candidate_space_size > cap:
        raise CorpusError(
            f"candidate space {template.candidate_space_size} exceeds enumeration cap {cap}"
        )
    for tok in tokenize(template.prefix):
        corpus.vocabulary.add(tok)
    for fill in template.fills():
        if fill:
            corpus.vocabulary.add(fill)


def plant_canary(
    corpus: Corpus,
    template: CanaryTemplate,
    fill: str,
    count: int,
    seed: int,
    max_len: int = 64,
) -> tuple[Corpus, list[int]]:
    """Insert ``count`` copies of the instantiated canary at seeded positions.

    Returns the new corpus and the positions (indices in the returned corpus)
    of the planted copies. The vocabulary is extended with the prefix tokens
    and the full fill space. Planted sequences are labeled sensitive when the
    corpus carries labels.
    """
    if not template.is_valid_fill(fill):
        raise CorpusError(
            f"fill {fill!r} is not drawn from the template slot space "
            f"(alphabet {template.slot_alphabet!r}, {template.slot_count} chars)"
        )
    if count < 0:
        raise CorpusError("count must be >= 0")
    if count == 0:
        labels = list(corpus.labels) if corpus.labels is not None else None
        return Corpus(list(corpus.sequences), corpus.vocabulary, labels), []

    extend_vocabulary_for_template(corpus, template)
    sentence = template.sentence(fill)
    canary = TokenSequence.from_text(sentence, corpus.vocabulary, max_len=max_len)
    if len(canary) < 2:
        raise CorpusError("instantiated canary must have at least two tokens")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    seqs = list(corpus.sequences)
    labels = list(corpus.labels) if corpus.labels is not None else None
    positions: list[int] = []
    for _ in range(count):
        pos = int(rng.integers(0, len(seqs) + 1))
        seqs.insert(pos, canary)
        if labels is not None:
            labels.insert(pos, True)
        # Earlier insertions shift right when a later one lands before them.
        positions = [p + 1 if p >= pos else p for p in positions]
        positions.append(pos)
    return Corpus(sequences=seqs, vocabulary=corpus.vocabulary, labels=labels), sorted(positions)


def enumerate_canaries(
    template: CanaryTemplate,
    vocabulary: Vocabulary,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[TokenSequence]:
    """All instantiated canaries, in lexicographic fill order.

    Candidates are encoded under ``vocabulary``; tokens the vocabulary does
    not already contain are appended. Exactly ``candidate_space_size``
    sequences are returned.
    """
    if template.candidate_space_size > cap:
        raise CorpusError(
            f"candidate space {template.candidate_space_size} exceeds enumeration cap {cap}"
        )
    for tok in tokenize(template.prefix):
        vocabulary.add(tok)
    out = []
    for fill in template.fills():
        if fill:
            vocabulary.add(fill)
        sentence = template.sentence(fill)
        out.append(TokenSequence.from_text(sentence, vocabulary))
    if not out:
        raise CorpusError("empty candidate space")
    return out


def minibatches(
    corpus: Corpus, batch_size: int, seed: int, epoch: int
) -> Iterator[list[TokenSequence]]:
    """Fixed-size batches over an epoch-seeded shuffle; the last may be short.

    The permutation is keyed on (seed, epoch), so the same pair always yields
    the same batch order and different epochs get different orders.
    """
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(corpus))
    for start in range(0, len(corpus), batch_size):
        yield [corpus.sequences[i] for i in order[start : start + batch_size]]


def write_canary_manifest(
    path: str | Path,
    template: CanaryTemplate,
    fill: str,
    count: int,
    positions: list[int],
) -> None:
    """Persist the planting record as flat key=value text."""
    lines = [
        f"prefix={template.prefix}",
        f"slot_alphabet={template.slot_alphabet}",
        f"slot_count={template.slot_count}",
        f"fill={fill}",
        f"count={count}",
        "positions=" + ",".join(str(p) for p in positions),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_canary_manifest(path: str | Path) -> tuple[CanaryTemplate, str, int, list[int]]:
    """Inverse of :func:`write_canary_manifest`."""
    fields: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    try:
        template = CanaryTemplate(
            prefix=fields["prefix"],
            slot_alphabet=fields["slot_alphabet"],
            slot_count=int(fields["slot_count"]),
        )
        fill = fields["fill"]
        count = int(fields["count"])
        positions = [int(p) for p in fields["positions"].split(",") if p]
    except KeyError as exc:
        raise CorpusError(f"canary manifest {path} is missing field {exc}") from exc
    return template, fill, count, positions
