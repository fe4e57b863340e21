"""Sensitive-sequence detection and the context audit.

The detector is a logistic classifier over hashed character and word n-gram
counts, trained on secret-style seed sentences plus paraphrased variants of
them. Paraphrasing is a seeded synonym substitution: it maps a sentence to
another with the same meaning and the same word count, standing in for
heavier semantic-invariant transforms. Everything is deterministic given the
configured seeds, including the hashing (crc32, not Python's salted hash).

The context audit asks, for a target token in a sequence: what is the
shortest suffix of its preceding text whose paraphrase still predicts the
target almost as well as the full prefix does? Short answers mean the secret
is triggered by local context alone. The search is restricted to contiguous
suffixes; general subsequence search would be exponential and
secret-triggering context is suffix-shaped in practice.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import lm
from .corpus import Corpus, TokenSequence, tokenize
from .lm import LMParameters

DETECTOR_MAGIC = "DETECTOR1"
CHAR_NGRAM_RANGE = (3, 5)
WORD_NGRAM_RANGE = (1, 2)


class DetectorError(ValueError):
    """Raised for invalid detector configuration, data, or files."""


def load_synonyms(path: str | Path) -> dict[str, list[str]]:
    """Parse a synonym table: one ``word: syn1, syn2, ...`` entry per line."""
    table: dict[str, list[str]] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rest = line.partition(":")
        word = word.strip().lower()
        syns = [s.strip().lower() for s in rest.split(",") if s.strip()]
        if not word or not syns:
            raise DetectorError(f"malformed synonym line: {raw!r}")
        if any(" " in s for s in syns):
            raise DetectorError(f"synonyms must be single words: {raw!r}")
        table[word] = syns
    return table


def default_synonyms() -> dict[str, list[str]]:
    """The synonym table shipped with the package."""
    return load_synonyms(Path(__file__).parent / "data" / "synonyms.txt")


@dataclass(frozen=True)
class AugmentationConfig:
    """Seeded synonym-substitution paraphraser settings.

    ``substitution_rate`` is the per-word replacement probability for words
    with table entries; ``passes`` is the default number of independent
    paraphrases generated per input when building detector datasets.
    """

    synonym_table: dict[str, list[str]]
    substitution_rate: float = 0.5
    passes: int = 10
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.substitution_rate <= 1.0):
            raise DetectorError(f"substitution_rate must be in [0,1], got {self.substitution_rate}")
        if self.passes < 0:
            raise DetectorError("passes must be >= 0")
        for word, syns in self.synonym_table.items():
            if not syns:
                raise DetectorError(f"empty synonym list for {word!r}")


def identity_augmentation() -> AugmentationConfig:
    """A paraphraser that never changes anything (substitution rate 0)."""
    return AugmentationConfig(synonym_table={}, substitution_rate=0.0, passes=0, seed=0)


def paraphrase(text: str, cfg: AugmentationConfig, variant_index: int = 0) -> str:
    """Deterministic paraphrase of ``text`` for (text, cfg.seed, variant_index).

    Each word with a synonym entry is replaced by a seeded-chosen synonym
    with probability ``substitution_rate``; word count is preserved and
    words without entries pass through unchanged.
    """
    payload = f"{cfg.seed}|{variant_index}|{text}".encode("utf-8")
    stream_seed = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
    rng = np.random.default_rng(np.random.SeedSequence([stream_seed]))
    out = []
    for word in text.split():
        syns = cfg.synonym_table.get(word.lower())
        if syns is not None and rng.random() < cfg.substitution_rate:
            out.append(syns[int(rng.integers(0, len(syns)))])
        else:
            out.append(word)
    return " ".join(out)


def _hash_bucket(kind: bytes, gram: str, dim: int) -> int:
    return zlib.crc32(kind + gram.encode("utf-8")) % dim


def _feature_entries(text: str, char_dim: int, word_dim: int) -> dict[int, float]:
    """Hashed n-gram counts: char buckets in [0, char_dim), word buckets after."""
    entries: dict[int, float] = {}
    lowered = " " + text.lower() + " "
    for n in range(CHAR_NGRAM_RANGE[0], CHAR_NGRAM_RANGE[1] + 1):
        for i in range(len(lowered) - n + 1):
            idx = _hash_bucket(b"c|", lowered[i : i + n], char_dim)
            entries[idx] = entries.get(idx, 0.0) + 1.0
    words = text.lower().split()
    for n in range(WORD_NGRAM_RANGE[0], WORD_NGRAM_RANGE[1] + 1):
        for i in range(len(words) - n + 1):
            gram = " ".join(words[i : i + n])
            idx = char_dim + _hash_bucket(b"w|", gram, word_dim)
            entries[idx] = entries.get(idx, 0.0) + 1.0
    return entries


def featurize(texts: list[str], char_dim: int, word_dim: int) -> sparse.csr_matrix:
    """L2-normalized hashed n-gram count matrix, one row per text."""
    data, indices, indptr = [], [], [0]
    for text in texts:
        entries = _feature_entries(text, char_dim, word_dim)
        keys = sorted(entries)
        vals = np.array([entries[k] for k in keys])
        norm = np.linalg.norm(vals)
        if norm > 0:
            vals = vals / norm
        indices.extend(keys)
        data.extend(vals.tolist())
        indptr.append(len(indices))
    return sparse.csr_matrix(
        (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(texts), char_dim + word_dim),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class DetectorModel:
    """Binary sensitive/non-sensitive classifier over hashed n-gram features."""

    char_dim: int
    word_dim: int
    weights: np.ndarray
    bias: float
    threshold: float
    measured_gamma: float

    def score_texts(self, texts: list[str]) -> np.ndarray:
        X = featurize(texts, self.char_dim, self.word_dim)
        return _sigmoid(np.asarray(X @ self.weights) + self.bias)

    def score(self, text: str) -> float:
        return float(self.score_texts([text])[0])

    def save(self, path: str | Path) -> None:
        header = (
            f"{DETECTOR_MAGIC} char_dim={self.char_dim} word_dim={self.word_dim} "
            f"threshold={self.threshold!r} gamma={self.measured_gamma!r}\n"
        )
        body = np.concatenate([self.weights, [self.bias]]).astype("<f8").tobytes()
        Path(path).write_bytes(header.encode("ascii") + body)

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        if nl < 0:
            raise DetectorError(f"{path}: missing detector header")
        fields = raw[:nl].decode("ascii").split()
        if not fields or fields[0] != DETECTOR_MAGIC:
            raise DetectorError(f"{path}: not a detector checkpoint")
        kv = dict(f.split("=", 1) for f in fields[1:])
        char_dim, word_dim = int(kv["char_dim"]), int(kv["word_dim"])
        vec = np.frombuffer(raw, dtype="<f8", offset=nl + 1).astype(np.float64)
        if vec.size != char_dim + word_dim + 1:
            raise DetectorError(f"{path}: weight vector has wrong size")
        return cls(
            char_dim=char_dim,
            word_dim=word_dim,
            weights=vec[:-1],
            bias=float(vec[-1]),
            threshold=float(kv["threshold"]),
            measured_gamma=float(kv["gamma"]),
        )


def constant_detector(flag_everything: bool, char_dim: int = 16, word_dim: int = 16) -> DetectorModel:
    """Degenerate detector that labels everything (or nothing) sensitive.

    With zero weights every score is 0.5, so threshold 0 flags all inputs and
    threshold 1.5 flags none. Useful for regime-equivalence checks.
    """
    return DetectorModel(
        char_dim=char_dim,
        word_dim=word_dim,
        weights=np.zeros(char_dim + word_dim),
        bias=0.0,
        threshold=0.0 if flag_everything else 1.5,
        measured_gamma=1.0,
    )


def classify(model: DetectorModel, seq: TokenSequence | str) -> tuple[bool, float]:
    """(is_sensitive, score): sensitive iff sigmoid score >= threshold.

    The detector reads raw text, so a TokenSequence is classified by its
    source text.
    """
    text = seq if isinstance(seq, str) else seq.source_text
    score = model.score(text)
    return score >= model.threshold, score


@dataclass
class DetectorDataset:
    """Labeled texts for detector training; label True means sensitive."""

    texts: list[str]
    labels: np.ndarray
    n_positive: int
    n_negative: int


def build_detector_dataset(
    sensitive_seeds: list[str],
    negatives: Corpus | list[str],
    cfg: AugmentationConfig,
    variants_per_seed: int | None = None,
) -> DetectorDataset:
    """Positives = seeds plus paraphrased variants; negatives = corpus lines.

    ``variants_per_seed`` defaults to ``cfg.passes``. Both classes are
    deduplicated and any negative that exactly matches a positive is dropped.
    """
    if variants_per_seed is None:
        variants_per_seed = cfg.passes
    neg_texts = negatives.texts() if isinstance(negatives, Corpus) else list(negatives)
    if not sensitive_seeds or not neg_texts:
        raise DetectorError("both classes must be non-empty")

    positives: list[str] = []
    seen: set[str] = set()
    for seed_text in sensitive_seeds:
        for candidate in [seed_text] + [
            paraphrase(seed_text, cfg, k) for k in range(variants_per_seed)
        ]:
            if candidate not in seen:
                seen.add(candidate)
                positives.append(candidate)

    negatives_kept: list[str] = []
    seen_neg: set[str] = set()
    for text in neg_texts:
        if text in seen or text in seen_neg:
            continue
        seen_neg.add(text)
        negatives_kept.append(text)
    if not negatives_kept:
        raise DetectorError("no negatives left after removing overlap with positives")

    texts = positives + negatives_kept
    labels = np.array([True] * len(positives) + [False] * len(negatives_kept))
    return DetectorDataset(texts, labels, len(positives), len(negatives_kept))


def train_detector(
    dataset: DetectorDataset,
    epochs: int = 300,
    eta: float = 2.0,
    seed: int = 0,
    char_dim: int = 4096,
    word_dim: int = 2048,
    fpr_cap: float = 0.05,
    val_fraction: float = 0.25,
    l2: float = 1e-4,
) -> DetectorModel:
    """Logistic regression by full-batch gradient descent, seeded and exact.

    A stratified validation fold is held out; the decision threshold is the
    one maximizing validation true-positive rate subject to a false-positive
    rate at most ``fpr_cap``, and the achieved TPR is stored as
    ``measured_gamma``.
    """
    y = dataset.labels
    if not y.any() or y.all():
        raise DetectorError("detector training needs both classes present")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    pos_idx = rng.permutation(np.flatnonzero(y))
    neg_idx = rng.permutation(np.flatnonzero(~y))
    n_pos_val = max(1, int(round(val_fraction * len(pos_idx))))
    n_neg_val = max(1, int(round(val_fraction * len(neg_idx))))
    if n_pos_val >= len(pos_idx) or n_neg_val >= len(neg_idx):
        raise DetectorError("dataset too small to hold out a validation fold")
    val_idx = np.concatenate([pos_idx[:n_pos_val], neg_idx[:n_neg_val]])
    train_idx = np.concatenate([pos_idx[n_pos_val:], neg_idx[n_neg_val:]])

    X = featurize(dataset.texts, char_dim, word_dim)
    Xtr, ytr = X[train_idx], y[train_idx].astype(np.float64)
    w = np.zeros(char_dim + word_dim)
    b = 0.0
    n = len(train_idx)
    for _ in range(epochs):
        p = _sigmoid(np.asarray(Xtr @ w) + b)
        err = p - ytr
        w -= eta * (np.asarray(Xtr.T @ err) / n + l2 * w)
        b -= eta * float(err.mean())

    val_scores = _sigmoid(np.asarray(X[val_idx] @ w) + b)
    val_y = y[val_idx]
    threshold, gamma = _select_threshold(val_scores, val_y, fpr_cap)
    return DetectorModel(
        char_dim=char_dim,
        word_dim=word_dim,
        weights=w,
        bias=b,
        threshold=threshold,
        measured_gamma=gamma,
    )


def _select_threshold(scores: np.ndarray, y: np.ndarray, fpr_cap: float) -> tuple[float, float]:
    """Highest-TPR threshold with FPR <= cap.

    TPR is nonincreasing in the threshold, so the smallest feasible candidate
    maximizes it; candidates are midpoints between adjacent observed scores,
    which leaves margin on both sides of the decision boundary. Missed
    positives weaken the privacy floor (delta > 1 - gamma) while false
    positives only cost utility, hence the low-threshold preference.
    """
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    uniq = sorted(set(scores.tolist()))
    candidates = [uniq[0]]
    candidates += [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])]
    candidates.append(uniq[-1] + 1.0)

    def rates(t):
        flagged = scores >= t
        return (
            float((flagged & y).sum()) / n_pos,
            float((flagged & ~y).sum()) / n_neg,
        )

    feasible = [(t, *rates(t)) for t in candidates]
    feasible = [(t, tpr) for t, tpr, fpr in feasible if fpr <= fpr_cap]
    best_tpr = max(tpr for _, tpr in feasible)
    band = [t for t, tpr in feasible if tpr == best_tpr]
    # Max-margin: center the threshold in the band that attains the best TPR,
    # so held-out scores on either side keep distance from the boundary.
    return (min(band) + max(band)) / 2.0, best_tpr


def estimate_gamma(model: DetectorModel, held_out_positives: list[str]) -> float:
    """Fraction of held-out sensitive texts the detector flags."""
    if not held_out_positives:
        raise DetectorError("cannot estimate gamma on an empty positive set")
    flags = model.score_texts(held_out_positives) >= model.threshold
    return float(flags.sum()) / len(held_out_positives)


def partition_batch(
    model: DetectorModel, batch: list[TokenSequence]
) -> tuple[list[TokenSequence], list[TokenSequence]]:
    """Split a batch into (sensitive, non-sensitive), preserving order."""
    scores = model.score_texts([s.source_text for s in batch]) if batch else np.array([])
    sensitive = [s for s, sc in zip(batch, scores) if sc >= model.threshold]
    plain = [s for s, sc in zip(batch, scores) if sc < model.threshold]
    return sensitive, plain


@dataclass
class ContextAudit:
    """Result of the minimal-context search for one target token.

    ``found`` is False when no suffix (not even the full prefix) predicts the
    target within the tolerance once paraphrased; that happens only when the
    paraphrase actually changes the qualifying text.
    """

    found: bool
    context_ids: tuple[int, ...]
    context_text: str
    length: int
    gap: float
    reference_probability: float
    gaps_by_length: list[float] = field(default_factory=list)


def conditional_probability(
    params: LMParameters, context_ids: list[int], target_id: int
) -> float:
    """Model probability of ``target_id`` after consuming ``context_ids``.

    An empty context carries no information, so it scores the target at the
    zero-knowledge value 1/vocab.
    """
    if not context_ids:
        return 1.0 / params.vocab_size
    seq = TokenSequence(ids=tuple(context_ids) + (target_id,), source_text="")
    table = lm.forward(params, seq)
    return float(np.exp(table[-1, target_id]))


def audit_context(
    params: LMParameters,
    seq: TokenSequence,
    target_index: int,
    alpha: float,
    cfg: AugmentationConfig,
    vocabulary=None,
) -> ContextAudit:
    """Shortest prefix suffix whose paraphrase predicts the target within ``alpha``.

    ``target_index`` is 1-based. Suffixes of the prefix are tried from the
    empty one upward; the first whose paraphrased conditional probability is
    within ``alpha`` of the full-prefix probability is returned. Paraphrased
    suffixes are re-encoded under ``vocabulary`` (required whenever cfg can
    substitute words).
    """
    if not (1 <= target_index <= len(seq)):
        raise DetectorError(f"target_index {target_index} out of range for length {len(seq)}")
    if alpha < 0:
        raise DetectorError("alpha must be >= 0")
    if cfg.substitution_rate > 0 and vocabulary is None:
        raise DetectorError("a vocabulary is required to re-encode paraphrased suffixes")

    prefix_ids = list(seq.ids[: target_index - 1])
    target_id = seq.ids[target_index - 1]
    p_ref = conditional_probability(params, prefix_ids, target_id)

    gaps: list[float] = []
    for length in range(len(prefix_ids) + 1):
        suffix_ids = prefix_ids[len(prefix_ids) - length :]
        if cfg.substitution_rate > 0 and suffix_ids:
            text = vocabulary.decode(suffix_ids)
            transformed = tokenize(paraphrase(text, cfg, 0))
            suffix_ids = vocabulary.encode_tokens(transformed)
        p_phi = conditional_probability(params, suffix_ids, target_id)
        gap = abs(p_ref - p_phi)
        gaps.append(gap)
        if gap <= alpha:
            return ContextAudit(
                found=True,
                context_ids=tuple(suffix_ids),
                context_text=vocabulary.decode(suffix_ids) if vocabulary and suffix_ids else "",
                length=length,
                gap=gap,
                reference_probability=p_ref,
                gaps_by_length=gaps,
            )
    return ContextAudit(
        found=False,
        context_ids=tuple(prefix_ids),
        context_text=vocabulary.decode(prefix_ids) if vocabulary and prefix_ids else "",
        length=len(prefix_ids),
        gap=gaps[-1] if gaps else 0.0,
        reference_probability=p_ref,
        gaps_by_length=gaps,
    )
