"""Deterministic synthetic corpora for desk-scale experiments.

Real corpora are supplied by the user as plain text; this module generates
small stand-ins with a controlled mix of neutral narrative lines and
secret-revealing lines ("my locker combination is 217"), plus the matching
detector seed sentences and format regexes. Every artifact is a pure
function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_SUBJECTS = [
    "the teacher", "the doctor", "the gardener", "the painter", "a neighbor",
    "the librarian", "the baker", "the violinist", "the carpenter", "the student",
    "the sailor", "the tailor", "the botanist", "the engineer", "the archivist",
    "the fisherman",
]
_VERBS = [
    "visited", "painted", "described", "admired", "photographed",
    "repaired", "organized", "sketched", "watered", "borrowed",
    "measured", "inspected", "decorated", "restored",
]
_OBJECTS = [
    "the old bridge", "the quiet garden", "the small library", "the wooden boat",
    "the stone cottage", "the market stall", "the tall lighthouse",
    "the narrow street", "the empty station", "the green meadow",
    "the copper kettle", "the broken fountain", "the winding staircase",
    "the dusty workshop",
]
_TAILS = [
    "on monday", "on tuesday", "on thursday", "on saturday", "on sunday",
    "before sunrise", "after lunch", "during the festival", "in early spring",
    "near the harbor", "in late autumn", "under the bright moon",
    "behind the town hall", "beside the river", "after the storm",
    "on a rainy afternoon",
]

# Secret-statement families; {code} is a 3-digit value. All end in
# "<cue word> is <code>" so a format regex can catch them.
_SECRET_TEMPLATES = [
    "my locker combination is {code}",
    "the safe combination is {code}",
    "my voicemail pin is {code}",
    "her apartment door code is {code}",
    "my account password is {code}",
]
_SECRET_OPENERS = ["", "remember that ", "note that ", "for reference "]

# Catches every secret family above (and the canonical canary phrasing),
# but not paraphrases that replace the cue word or the verb.
SECRET_FORMAT_PATTERNS = [r"(combination|pin|password|code) is [0-9]+"]

# Canonical canary family used to seed detector training. The planted canary
# in experiments may be any paraphrase of this family.
CANARY_SEED_PREFIX = "my bank security code is"


@dataclass
class DeskData:
    """A generated corpus with labels and the companion detector inputs."""

    lines: list[str]
    labels: list[bool]
    detector_seeds: list[str]
    neutral_sample: list[str]
    secret_patterns: list[str]

    @property
    def n_sensitive(self) -> int:
        return sum(self.labels)


def _neutral_line(rng: np.random.Generator) -> str:
    return " ".join(
        [
            _SUBJECTS[rng.integers(len(_SUBJECTS))],
            _VERBS[rng.integers(len(_VERBS))],
            _OBJECTS[rng.integers(len(_OBJECTS))],
            _TAILS[rng.integers(len(_TAILS))],
        ]
    )


def _secret_line(rng: np.random.Generator) -> str:
    template = _SECRET_TEMPLATES[rng.integers(len(_SECRET_TEMPLATES))]
    opener = _SECRET_OPENERS[rng.integers(len(_SECRET_OPENERS))]
    code = str(rng.integers(100, 1000))
    return opener + template.format(code=code)


def generate_desk_corpus(
    n_lines: int = 2000,
    sensitive_fraction: float = 0.08,
    seed: int = 0,
    n_neutral_sample: int = 400,
) -> DeskData:
    """Build a labeled corpus of neutral and secret-revealing lines.

    ``neutral_sample`` is a disjoint extra draw of neutral lines meant to be
    used as detector-training negatives.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    lines: list[str] = []
    labels: list[bool] = []
    for _ in range(n_lines):
        if rng.random() < sensitive_fraction:
            lines.append(_secret_line(rng))
            labels.append(True)
        else:
            lines.append(_neutral_line(rng))
            labels.append(False)

    neutral_sample = [_neutral_line(rng) for _ in range(n_neutral_sample)]

    seed_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    detector_seeds = []
    for _ in range(3):
        detector_seeds.append(f"{CANARY_SEED_PREFIX} {seed_rng.integers(100, 1000)}")
    for template in _SECRET_TEMPLATES:
        for _ in range(2):
            detector_seeds.append(template.format(code=str(seed_rng.integers(100, 1000))))

    return DeskData(
        lines=lines,
        labels=labels,
        detector_seeds=detector_seeds,
        neutral_sample=neutral_sample,
        secret_patterns=list(SECRET_FORMAT_PATTERNS),
    )


def write_desk_dataset(data: DeskData, directory: str | Path) -> dict[str, Path]:
    """Write corpus, labels, negatives, and seeds files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": directory / "data.txt",
        "labels": directory / "data.labels.txt",
        "negatives": directory / "neutral.txt",
        "seeds": directory / "seeds.txt",
    }
    paths["corpus"].write_text("\n".join(data.lines) + "\n", encoding="utf-8")
    paths["labels"].write_text(
        "\n".join("1" if l else "0" for l in data.labels) + "\n", encoding="utf-8"
    )
    paths["negatives"].write_text("\n".join(data.neutral_sample) + "\n", encoding="utf-8")
    paths["seeds"].write_text("\n".join(data.detector_seeds) + "\n", encoding="utf-8")
    return paths
