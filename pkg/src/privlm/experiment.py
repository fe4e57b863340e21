"""Experiment orchestration: regimes, training loop, manifests, attacks.

Four regimes are supported:

* ``nodp``    plain SGD on every batch;
* ``dpsgd``   a clipped-and-noised private step on every batch;
* ``sdpsgd``  format-based selectivity: sequences matching configured secret
              regexes get private steps, the rest plain ones (sequence-level
              approximation of token-level format protection);
* ``cadp``    detector-based selectivity: each batch is partitioned by the
              trained sensitivity detector, the flagged part gets the private
              step (executed first), the rest the plain step.

A run writes into its output directory: ``manifest.json`` (resolved config,
per-epoch validation perplexity, privacy audit, checkpoint paths, all
byte-reproducible), ``vocab.txt``, ``canaries.txt``, per-epoch checkpoints,
and ``timing.txt``. Wall-clock lives in the timing sidecar only, so the
manifest itself is identical across reruns of the same config.

Config files are flat ``key = value`` text; unknown keys are rejected. See
the schemas below for every key and its default.
"""

from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks as attacks_mod
from . import detector as detector_mod
from . import lm, privacy
from .corpus import (
    CanaryTemplate,
    Corpus,
    TokenSequence,
    Vocabulary,
    enumerate_canaries,
    extend_vocabulary_for_template,
    load_corpus,
    minibatches,
    plant_canary,
    read_canary_manifest,
    split_corpus,
    write_canary_manifest,
)

REGIMES = ("nodp", "dpsgd", "sdpsgd", "cadp")


class ExperimentError(ValueError):
    """Raised for invalid configuration or inconsistent run artifacts."""


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the manifest is still written."""


# --------------------------------------------------------------------------
# Flat key=value config files
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfigKey:
    kind: str  # str | int | float | bool
    default: str | None  # None means required
    help: str
    repeatable: bool = False


TRAIN_SCHEMA: dict[str, ConfigKey] = {
    "regime": ConfigKey("str", None, "one of nodp, dpsgd, sdpsgd, cadp"),
    "corpus": ConfigKey("str", None, "path to the training text, one sequence per line"),
    "labels": ConfigKey("str", "", "optional path to a 0/1 sensitivity label per corpus line"),
    "lowercase": ConfigKey("bool", "true", "lowercase text during tokenization"),
    "min_count": ConfigKey("int", "1", "tokens rarer than this map to the unknown token"),
    "max_seq_len": ConfigKey("int", "64", "sequences are truncated to this many tokens"),
    "train_fraction": ConfigKey("float", "0.8", "train share of the corpus split"),
    "canary_prefix": ConfigKey("str", "", "canary sentence prefix; empty disables planting"),
    "canary_slot_alphabet": ConfigKey("str", "123456789", "characters the canary slot draws from"),
    "canary_slot_count": ConfigKey("int", "3", "number of slot characters"),
    "canary_fill": ConfigKey("str", "", "the planted slot value"),
    "canary_count": ConfigKey("int", "0", "how many copies of the canary to plant"),
    "d_emb": ConfigKey("int", "64", "embedding dimension"),
    "d_hid": ConfigKey("int", "64", "LSTM hidden dimension"),
    "epochs": ConfigKey("int", "20", "training epochs"),
    "batch_size": ConfigKey("int", "32", "minibatch size"),
    "eta": ConfigKey("float", "0.1", "learning rate"),
    "sigma": ConfigKey("float", "1.0", "noise multiplier for private steps"),
    "clip_bound": ConfigKey("float", "1.0", "per-example gradient clipping bound"),
    "delta": ConfigKey("float", "1e-5", "DP failure probability (must exceed 1 - gamma)"),
    "rdp_alpha": ConfigKey("float", "2.0", "Renyi order used by the accountant"),
    "detector": ConfigKey("str", "", "detector checkpoint path (required for cadp)"),
    "secret_pattern": ConfigKey(
        "str", "", "regex marking secret-format sequences (sdpsgd; repeatable)", repeatable=True
    ),
    "synonyms": ConfigKey("str", "", "synonym table path for context audits (empty = identity)"),
    "substitution_rate": ConfigKey("float", "0.5", "paraphrase substitution rate for audits"),
    "phi_seed": ConfigKey("int", "0", "seed of the audit paraphraser"),
    "seed_data": ConfigKey("int", "1", "seed for splits and batch shuffles"),
    "seed_init": ConfigKey("int", "2", "seed for parameter initialization"),
    "seed_noise": ConfigKey("int", "3", "seed of the private-step noise stream"),
    "mi_n": ConfigKey("int", "50", "members/non-members per side of the MI attack"),
    "mi_members": ConfigKey(
        "str", "sensitive", "MI member pool: 'sensitive' (labeled lines) or 'all'"
    ),
    "out_dir": ConfigKey("str", None, "run output directory"),
}

DETECTOR_SCHEMA: dict[str, ConfigKey] = {
    "seeds": ConfigKey("str", None, "path to sensitive seed sentences, one per line"),
    "negatives": ConfigKey("str", None, "path to non-sensitive text, one line per sequence"),
    "synonyms": ConfigKey("str", "", "synonym table path (empty = packaged default table)"),
    "substitution_rate": ConfigKey("float", "0.5", "per-word substitution probability"),
    "variants_per_seed": ConfigKey("int", "10", "paraphrased variants generated per seed"),
    "phi_seed": ConfigKey("int", "0", "seed of the paraphraser"),
    "epochs": ConfigKey("int", "300", "classifier gradient-descent epochs"),
    "eta": ConfigKey("float", "2.0", "classifier learning rate"),
    "seed": ConfigKey("int", "0", "seed for the train/validation fold split"),
    "char_dim": ConfigKey("int", "4096", "character n-gram hashing dimension"),
    "word_dim": ConfigKey("int", "2048", "word n-gram hashing dimension"),
    "fpr_cap": ConfigKey("float", "0.05", "maximum validation false-positive rate"),
    "val_fraction": ConfigKey("float", "0.25", "held-out fraction per class"),
    "out": ConfigKey("str", None, "detector checkpoint output path"),
}

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_config_file(path: str | Path, schema: dict[str, ConfigKey]) -> dict:
    """Parse flat key=value text against a schema; unknown keys are rejected."""
    values: dict[str, object] = {
        k: [] if spec.repeatable else None for k, spec in schema.items()
    }
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ExperimentError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in schema:
            raise ExperimentError(f"{path}:{lineno}: unknown config key {key!r}")
        spec = schema[key]
        if spec.repeatable:
            values[key].append(value)
        elif values[key] is not None:
            raise ExperimentError(f"{path}:{lineno}: duplicate key {key!r}")
        else:
            values[key] = value

    out: dict[str, object] = {}
    for key, spec in schema.items():
        if spec.repeatable:
            raw_vals = values[key] or ([spec.default] if spec.default else [])
            out[key] = raw_vals
            continue
        raw_val = values[key]
        if raw_val is None:
            if spec.default is None:
                raise ExperimentError(f"{path}: missing required config key {key!r}")
            raw_val = spec.default
        try:
            if spec.kind == "int":
                out[key] = int(raw_val)
            elif spec.kind == "float":
                out[key] = float(raw_val)
            elif spec.kind == "bool":
                out[key] = _BOOL[raw_val.lower()]
            else:
                out[key] = raw_val
        except (ValueError, KeyError) as exc:
            raise ExperimentError(f"{path}: bad {spec.kind} value for {key!r}: {raw_val!r}") from exc
    return out


@dataclass
class ExperimentConfig:
    """Resolved training configuration; see TRAIN_SCHEMA for key meanings."""

    values: dict

    def __post_init__(self):
        v = self.values
        if v["regime"] not in REGIMES:
            raise ExperimentError(f"regime must be one of {REGIMES}, got {v['regime']!r}")
        if v["regime"] == "cadp" and not v["detector"]:
            raise ExperimentError("cadp requires a 'detector' checkpoint path")
        if v["regime"] == "sdpsgd" and not [p for p in v["secret_pattern"] if p]:
            raise ExperimentError("sdpsgd requires at least one 'secret_pattern'")
        if v["canary_prefix"] and not v["canary_fill"]:
            raise ExperimentError("canary planting requires 'canary_fill'")

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls(parse_config_file(path, TRAIN_SCHEMA))

    def resolved(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def run_id(self) -> str:
        canonical = json.dumps(self.resolved(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _derived_seed(base: int, tag: str) -> int:
    digest = hashlib.blake2b(f"{base}|{tag}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _sensitivity_flags(
    config: ExperimentConfig,
    train: Corpus,
    det: detector_mod.DetectorModel | None,
) -> dict[str, bool]:
    """Per-text sensitivity decision for the run's partitioning rule."""
    regime = config["regime"]
    texts = sorted(set(train.texts()))
    if regime == "nodp":
        return {t: False for t in texts}
    if regime == "dpsgd":
        return {t: True for t in texts}
    if regime == "sdpsgd":
        patterns = [re.compile(p) for p in config["secret_pattern"] if p]
        return {t: any(p.search(t) for p in patterns) for t in texts}
    scores = det.score_texts(texts)
    return {t: bool(s >= det.threshold) for t, s in zip(texts, scores)}


def prepare_data(config: ExperimentConfig) -> tuple[Corpus, Corpus, list[int], int | None]:
    """Load, split, and plant per the config; returns (train, test, positions, planted_idx).

    ``planted_idx`` is the planted fill's index in the lexicographic candidate
    enumeration, or None when no canary is configured.
    """
    corpus = load_corpus(
        config["corpus"],
        lowercase=config["lowercase"],
        min_count=config["min_count"],
        max_len=config["max_seq_len"],
        labels_path=config["labels"] or None,
    )
    train, test = split_corpus(corpus, config["train_fraction"], config["seed_data"])
    positions: list[int] = []
    planted_idx = None
    if config["canary_prefix"]:
        template = _template_from_config(config)
        # Extend even when count is 0 so a control run (no planted copies)
        # yields a model that can still score every candidate fill.
        extend_vocabulary_for_template(train, template)
        train, positions = plant_canary(
            train,
            template,
            config["canary_fill"],
            config["canary_count"],
            seed=_derived_seed(config["seed_data"], "plant"),
            max_len=config["max_seq_len"],
        )
        planted_idx = list(template.fills()).index(config["canary_fill"])
    return train, test, positions, planted_idx


def _template_from_config(config: ExperimentConfig) -> CanaryTemplate:
    # Prefix gets a trailing space so the fill lands as its own token.
    prefix = config["canary_prefix"]
    if not prefix.endswith(" "):
        prefix += " "
    return CanaryTemplate(
        prefix=prefix,
        slot_alphabet=config["canary_slot_alphabet"],
        slot_count=config["canary_slot_count"],
    )


def train(config: ExperimentConfig) -> dict:
    """Run one training regime end to end and write the run directory.

    Returns the manifest dict (also written as ``manifest.json``). Raises
    TrainingDiverged after writing the manifest if the loss goes non-finite.
    """
    t_start = time.monotonic()
    out_dir = Path(config["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    det = None
    if config["regime"] == "cadp":
        det = detector_mod.DetectorModel.load(config["detector"])

    train_corpus, test_corpus, positions, planted_idx = prepare_data(config)
    vocab = train_corpus.vocabulary
    vocab.save(out_dir / "vocab.txt")
    if config["canary_prefix"]:
        write_canary_manifest(
            out_dir / "canaries.txt",
            _template_from_config(config),
            config["canary_fill"],
            config["canary_count"],
            positions,
        )

    flags = _sensitivity_flags(config, train_corpus, det)
    sensitive_count = sum(1 for s in train_corpus.sequences if flags[s.source_text])

    spec = privacy.PrivacySpec(
        sigma=config["sigma"],
        clip_bound=config["clip_bound"],
        delta=config["delta"],
        alpha=config["rdp_alpha"],
        eta=config["eta"],
    )
    params = lm.init_params(vocab.size, config["d_emb"], config["d_hid"], config["seed_init"])
    noise_rng = np.random.default_rng(np.random.SeedSequence([config["seed_noise"]]))

    manifest: dict = {
        "run_id": config.run_id(),
        "regime": config["regime"],
        "config": config.resolved(),
        "vocab_size": vocab.size,
        "n_train": len(train_corpus),
        "n_test": len(test_corpus),
        "sensitive_count": sensitive_count,
        "planted_candidate_index": planted_idx,
        "epochs": [],
        "private_step_count": 0,
        "audit": None,
        "status": "running",
    }

    private_steps = 0
    diverged = False
    for epoch in range(1, config["epochs"] + 1):
        for batch in minibatches(train_corpus, config["batch_size"], config["seed_data"], epoch):
            batch_s = [s for s in batch if flags[s.source_text]]
            batch_ns = [s for s in batch if not flags[s.source_text]]
            if batch_s:
                params = privacy.dp_sgd_step(params, batch_s, spec, noise_rng)
                private_steps += 1
            if batch_ns:
                params = privacy.plain_sgd_step(params, batch_ns, config["eta"])
        if not all(np.isfinite(a).all() for a in params.arrays()):
            diverged = True
            break
        valid_ppl = lm.corpus_perplexity(params, test_corpus)
        if not np.isfinite(valid_ppl):
            diverged = True
            break
        ckpt = f"checkpoints/epoch_{epoch:03d}.ckpt"
        params.save(out_dir / ckpt)
        manifest["epochs"].append(
            {"epoch": epoch, "valid_perplexity": valid_ppl, "checkpoint": ckpt}
        )

    manifest["private_step_count"] = private_steps
    if config["regime"] != "nodp" and not diverged:
        gamma = det.measured_gamma if det is not None else 1.0
        per_step_eps = privacy.gaussian_rdp_epsilon(config["sigma"], config["rdp_alpha"])
        state = privacy.AccountantState(
            epochs=config["epochs"],
            sensitive_count=sensitive_count,
            batch_size=config["batch_size"],
            per_step_epsilon=per_step_eps,
            gamma=gamma,
            alpha=config["rdp_alpha"],
        )
        try:
            eps_total, _ = privacy.selective_dp_budget(state, config["delta"])
            manifest["audit"] = {
                "sigma": config["sigma"],
                "clip_bound": config["clip_bound"],
                "alpha": config["rdp_alpha"],
                "delta": config["delta"],
                "gamma": gamma,
                "epochs": config["epochs"],
                "sensitive_count": sensitive_count,
                "batch_size": config["batch_size"],
                "per_step_epsilon": per_step_eps,
                "eps_total": eps_total,
                "sequential_composition_reference_eps": privacy.sequential_composition_budget(
                    per_step_eps, private_steps, config["rdp_alpha"], config["delta"]
                ),
            }
        except privacy.PrivacyError as exc:
            manifest["audit"] = {"error": str(exc)}

    manifest["status"] = "diverged" if diverged else "completed"
    _write_manifest(out_dir / "manifest.json", manifest)
    (out_dir / "timing.txt").write_text(
        f"wall_clock_seconds={time.monotonic() - t_start:.3f}\n", encoding="utf-8"
    )
    if diverged:
        raise TrainingDiverged(
            f"loss went non-finite in epoch {len(manifest['epochs']) + 1}; "
            f"manifest written to {out_dir / 'manifest.json'}"
        )
    return manifest


def _write_manifest(path: Path, manifest: dict) -> None:
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# Attacks on a finished run
# --------------------------------------------------------------------------

def run_attacks(
    manifest_path: str | Path,
    checkpoint_epoch: int | None = None,
    dump_table: str | Path | None = None,
) -> attacks_mod.AttackReport:
    """Canary-exposure and membership-inference attacks on one checkpoint.

    Appends the report row to ``attacks.csv`` next to the manifest and
    returns it. The attacked member pool is rebuilt deterministically from
    the manifest's config (sensitive-labeled training lines when labels are
    available).
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    run_dir = manifest_path.parent
    config = ExperimentConfig(dict(manifest["config"]))

    if not manifest["epochs"]:
        raise ExperimentError("run has no completed epochs to attack")
    by_epoch = {e["epoch"]: e for e in manifest["epochs"]}
    if checkpoint_epoch is None:
        checkpoint_epoch = max(by_epoch)
    if checkpoint_epoch not in by_epoch:
        raise ExperimentError(f"no checkpoint for epoch {checkpoint_epoch}")
    entry = by_epoch[checkpoint_epoch]

    vocab = Vocabulary.load(run_dir / "vocab.txt")
    params = lm.LMParameters.load(run_dir / entry["checkpoint"], expect_vocab=vocab.size)

    canary_file = run_dir / "canaries.txt"
    if not canary_file.exists():
        raise ExperimentError("attacks need the planted-canary record (canaries.txt is missing)")
    template, fill, _, _ = read_canary_manifest(canary_file)
    candidates = enumerate_canaries(template, vocab)
    if vocab.size != params.vocab_size:
        raise ExperimentError(
            "checkpoint/vocabulary mismatch: enumerating the canary space grew the "
            "vocabulary past the checkpoint's embedding table"
        )
    planted_index = list(template.fills()).index(fill)
    ppls = attacks_mod.candidate_perplexities(params, candidates)
    rank = attacks_mod.rank_from_perplexities(ppls, planted_index)
    expo = attacks_mod.exposure(rank, template.candidate_space_size)
    if dump_table is not None:
        attacks_mod.dump_perplexity_table(dump_table, candidates, ppls, planted_index)

    train_corpus, test_corpus, _, _ = prepare_data(config)
    if config["mi_members"] == "sensitive" and train_corpus.labels is not None:
        member_pool = [
            s for s, lab in zip(train_corpus.sequences, train_corpus.labels) if lab
        ]
    else:
        member_pool = train_corpus.sequences
    members, non_members = attacks_mod.build_mi_dataset(
        member_pool, test_corpus, config["mi_n"], seed=_derived_seed(config["seed_data"], "mi")
    )
    mi_acc = attacks_mod.membership_inference(params, members, non_members)

    report = attacks_mod.AttackReport(
        run_id=manifest["run_id"],
        regime=manifest["regime"],
        epoch=checkpoint_epoch,
        valid_perplexity=entry["valid_perplexity"],
        canary_rank=rank,
        exposure=expo,
        candidate_space_size=template.candidate_space_size,
        mi_accuracy=mi_acc,
    )
    csv_path = run_dir / "attacks.csv"
    if not csv_path.exists():
        csv_path.write_text(attacks_mod.AttackReport.CSV_HEADER + "\n", encoding="utf-8")
    with csv_path.open("a", encoding="utf-8") as fh:
        fh.write(report.csv_row() + "\n")
    return report


def audit_manifest_context(
    manifest_path: str | Path, sentence: str, index: int, alpha: float
) -> detector_mod.ContextAudit:
    """Run the minimal-context audit against a run's final checkpoint."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    run_dir = manifest_path.parent
    config = ExperimentConfig(dict(manifest["config"]))
    if not manifest["epochs"]:
        raise ExperimentError("run has no completed epochs")
    entry = manifest["epochs"][-1]
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    params = lm.LMParameters.load(run_dir / entry["checkpoint"], expect_vocab=vocab.size)
    if config["synonyms"]:
        cfg = detector_mod.AugmentationConfig(
            synonym_table=detector_mod.load_synonyms(config["synonyms"]),
            substitution_rate=config["substitution_rate"],
            seed=config["phi_seed"],
        )
    else:
        cfg = detector_mod.identity_augmentation()
    seq = TokenSequence.from_text(
        sentence, vocab, lowercase=config["lowercase"], max_len=config["max_seq_len"]
    )
    return detector_mod.audit_context(params, seq, index, alpha, cfg, vocabulary=vocab)


# --------------------------------------------------------------------------
# Detector training from a config file
# --------------------------------------------------------------------------

def train_detector_from_config(path: str | Path) -> tuple[detector_mod.DetectorModel, dict]:
    """Train and save a detector per a DETECTOR_SCHEMA config file."""
    cfgv = parse_config_file(path, DETECTOR_SCHEMA)
    seeds = [
        line.strip()
        for line in Path(cfgv["seeds"]).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    negatives = [
        line.strip()
        for line in Path(cfgv["negatives"]).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    table = (
        detector_mod.load_synonyms(cfgv["synonyms"])
        if cfgv["synonyms"]
        else detector_mod.default_synonyms()
    )
    aug = detector_mod.AugmentationConfig(
        synonym_table=table,
        substitution_rate=cfgv["substitution_rate"],
        passes=cfgv["variants_per_seed"],
        seed=cfgv["phi_seed"],
    )
    dataset = detector_mod.build_detector_dataset(seeds, negatives, aug)
    model = detector_mod.train_detector(
        dataset,
        epochs=cfgv["epochs"],
        eta=cfgv["eta"],
        seed=cfgv["seed"],
        char_dim=cfgv["char_dim"],
        word_dim=cfgv["word_dim"],
        fpr_cap=cfgv["fpr_cap"],
        val_fraction=cfgv["val_fraction"],
    )
    out = Path(cfgv["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    info = {
        "n_positive": dataset.n_positive,
        "n_negative": dataset.n_negative,
        "threshold": model.threshold,
        "measured_gamma": model.measured_gamma,
        "checkpoint": str(out),
    }
    return model, info
