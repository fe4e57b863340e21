"""Black-box privacy attacks: canary exposure and membership inference.

Both attacks treat the model purely through its perplexity on queried
sequences. Exposure ranks the planted canary against every other fill of its
template (lower perplexity = stronger memorization); membership inference
pools known-member and known-non-member sequences and predicts the
lowest-perplexity half as members.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import lm
from .corpus import Corpus, TokenSequence
from .lm import LMParameters


class AttackError(ValueError):
    """Raised for invalid attack inputs."""


@dataclass
class AttackReport:
    """Attack outcomes for one trained checkpoint.

    Serialized as one CSV row: run_id, regime, epoch, valid_perplexity,
    canary_rank, exposure, mi_accuracy.
    """

    run_id: str
    regime: str
    epoch: int
    valid_perplexity: float
    canary_rank: int
    exposure: float
    candidate_space_size: int
    mi_accuracy: float

    CSV_HEADER = "run_id,regime,epoch,valid_perplexity,canary_rank,exposure,mi_accuracy"

    def csv_row(self) -> str:
        return (
            f"{self.run_id},{self.regime},{self.epoch},{float(self.valid_perplexity)!r},"
            f"{self.canary_rank},{float(self.exposure)!r},{float(self.mi_accuracy)!r}"
        )


def candidate_perplexities(params: LMParameters, candidates: list[TokenSequence]) -> np.ndarray:
    """Model perplexity of every candidate canary."""
    if not candidates:
        raise AttackError("empty candidate list")
    return lm.sequence_perplexities(params, candidates)


def rank_from_perplexities(perplexities: np.ndarray, planted_index: int) -> int:
    """Count of candidates at most as perplex as the planted one (rank >= 1).

    Ties count into the rank, which is the conservative side: a tied field
    reports low exposure rather than pretending the canary stands out.
    """
    n = len(perplexities)
    if not (0 <= planted_index < n):
        raise AttackError(f"planted_index {planted_index} out of range for {n} candidates")
    return int(np.sum(perplexities <= perplexities[planted_index]))


def canary_rank(
    params: LMParameters, candidates: list[TokenSequence], planted_index: int
) -> int:
    """Perplexity rank of the planted canary among all template fills."""
    return rank_from_perplexities(candidate_perplexities(params, candidates), planted_index)


def exposure(rank: int, candidate_space_size: int) -> float:
    """log2(space size) - log2(rank); in [0, log2(space size)]."""
    if candidate_space_size < 1:
        raise AttackError("candidate space must be non-empty")
    if not (1 <= rank <= candidate_space_size):
        raise AttackError(f"rank {rank} outside [1, {candidate_space_size}]")
    return math.log2(candidate_space_size) - math.log2(rank)


def membership_inference(
    params: LMParameters,
    members: list[TokenSequence],
    non_members: list[TokenSequence],
) -> float:
    """Balanced perplexity-ranking attack accuracy.

    Pools the 2n sequences (alternating member / non-member, which is the
    deterministic tie-break order), predicts the n lowest-perplexity ones as
    members, and scores against the truth. A model with no memorization
    signal lands at 0.5 for even n.
    """
    n = len(members)
    if n < 1 or len(non_members) != n:
        raise AttackError("the attack is balanced: need equally many members and non-members")
    pool: list[TokenSequence] = []
    truth: list[bool] = []
    for m, nm in zip(members, non_members):
        pool.append(m)
        truth.append(True)
        pool.append(nm)
        truth.append(False)
    ppl = lm.sequence_perplexities(params, pool)
    order = np.argsort(ppl, kind="stable")
    predicted_member = np.zeros(2 * n, dtype=bool)
    predicted_member[order[:n]] = True
    correct = sum(1 for pred, act in zip(predicted_member, truth) if pred == act)
    return correct / (2 * n)


def build_mi_dataset(
    train_corpus: Corpus | list[TokenSequence],
    test_corpus: Corpus | list[TokenSequence],
    n: int,
    seed: int,
) -> tuple[list[TokenSequence], list[TokenSequence]]:
    """Seeded balanced attack set: n member and n non-member sequences.

    Each pool is deduplicated by text before sampling and the two samples
    are text-disjoint.
    """
    if n < 1:
        raise AttackError("n must be >= 1")

    def unique_by_text(seqs: list[TokenSequence]) -> list[TokenSequence]:
        seen: set[str] = set()
        out = []
        for s in seqs:
            if s.source_text not in seen:
                seen.add(s.source_text)
                out.append(s)
        return out

    train_pool = unique_by_text(
        train_corpus.sequences if isinstance(train_corpus, Corpus) else list(train_corpus)
    )
    test_pool = unique_by_text(
        test_corpus.sequences if isinstance(test_corpus, Corpus) else list(test_corpus)
    )
    if len(train_pool) < n:
        raise AttackError(f"need {n} distinct member texts, have {len(train_pool)}")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    members = [train_pool[i] for i in rng.choice(len(train_pool), size=n, replace=False)]
    member_texts = {m.source_text for m in members}
    eligible = [s for s in test_pool if s.source_text not in member_texts]
    if len(eligible) < n:
        raise AttackError(f"need {n} distinct non-member texts, have {len(eligible)}")
    non_members = [eligible[i] for i in rng.choice(len(eligible), size=n, replace=False)]
    return members, non_members


def dump_perplexity_table(
    path: str | Path,
    candidates: list[TokenSequence],
    perplexities: np.ndarray,
    planted_index: int,
) -> None:
    """Full per-candidate perplexity table as CSV, for offline analysis."""
    lines = ["index,candidate,perplexity,planted"]
    for i, (cand, ppl) in enumerate(zip(candidates, perplexities)):
        lines.append(f"{i},{cand.source_text},{float(ppl)!r},{int(i == planted_index)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
