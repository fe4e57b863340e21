import numpy as np
import pytest

from privlm import lm
from privlm.corpus import TokenSequence, Vocabulary
from privlm.detector import (
    AugmentationConfig,
    DetectorError,
    DetectorModel,
    audit_context,
    build_detector_dataset,
    classify,
    conditional_probability,
    constant_detector,
    default_synonyms,
    estimate_gamma,
    identity_augmentation,
    load_synonyms,
    paraphrase,
    partition_batch,
    train_detector,
)
from privlm.lm import Gradient


NEUTRAL_LINES = [
    "the teacher visited the old bridge on monday",
    "a neighbor painted the quiet garden after lunch",
    "the baker repaired the wooden boat near the harbor",
    "the librarian admired the stone cottage in early spring",
    "the violinist sketched the tall lighthouse on sunday",
    "the carpenter organized the market stall during the festival",
    "the student borrowed the small library book on tuesday",
    "the gardener watered the green meadow before sunrise",
    "the sailor photographed the empty station in late autumn",
    "the doctor described the narrow street on thursday",
    "the painter admired the old bridge on saturday",
    "the tailor visited the green meadow after lunch",
    "the teacher sketched the market stall on tuesday",
    "a neighbor borrowed the wooden boat on thursday",
    "the baker watered the quiet garden in early spring",
    "the librarian photographed the narrow street on monday",
]

CANARY_SEEDS = [
    "my bank security code is 111",
    "my bank security code is 845",
    "my bank security code is 392",
]


@pytest.fixture(scope="module")
def aug():
    return AugmentationConfig(
        synonym_table=default_synonyms(), substitution_rate=0.5, passes=12, seed=5
    )


@pytest.fixture(scope="module")
def trained_detector(aug):
    dataset = build_detector_dataset(CANARY_SEEDS, NEUTRAL_LINES, aug, variants_per_seed=12)
    return train_detector(dataset, epochs=250, eta=2.0, seed=3, char_dim=1024, word_dim=512)


class TestParaphrase:
    def test_rate_zero_is_identity(self):
        cfg = AugmentationConfig(synonym_table={"bank": ["banking"]}, substitution_rate=0.0)
        text = "my bank security code is"
        assert paraphrase(text, cfg, 0) == text

    def test_forced_substitution(self):
        cfg = AugmentationConfig(
            synonym_table={"bank": ["banking"], "code": ["pin"]}, substitution_rate=1.0
        )
        assert paraphrase("my bank security code is", cfg, 0) == "my banking security pin is"

    def test_deterministic_per_variant(self, aug):
        text = "my bank security code is 450"
        assert paraphrase(text, aug, 3) == paraphrase(text, aug, 3)

    def test_variants_differ_across_indices(self, aug):
        text = "my bank security code is 450"
        outputs = {paraphrase(text, aug, k) for k in range(12)}
        assert len(outputs) > 1

    def test_word_count_preserved_and_unknown_words_kept(self, aug):
        text = "zzyx my bank security code is 450 qwerty"
        out = paraphrase(text, aug, 1)
        assert len(out.split()) == len(text.split())
        assert out.split()[0] == "zzyx" and out.split()[-1] == "qwerty"

    def test_synonym_table_parsing(self, tmp_path):
        path = tmp_path / "syn.txt"
        path.write_text("# comment\nbank: banking, lender\ncode: pin\n", encoding="utf-8")
        table = load_synonyms(path)
        assert table == {"bank": ["banking", "lender"], "code": ["pin"]}
        bad = tmp_path / "bad.txt"
        bad.write_text("word: two words\n", encoding="utf-8")
        with pytest.raises(DetectorError, match="single"):
            load_synonyms(bad)


class TestDetectorDataset:
    def test_variant_fanout_bounded_by_dedup(self, aug):
        ds = build_detector_dataset(["my bank security code is 450"], NEUTRAL_LINES, aug,
                                    variants_per_seed=10)
        assert 1 <= ds.n_positive <= 11

    def test_no_variants(self, aug):
        ds = build_detector_dataset(CANARY_SEEDS, NEUTRAL_LINES, aug, variants_per_seed=0)
        assert ds.n_positive == len(CANARY_SEEDS)

    def test_overlap_removed_from_negatives(self, aug):
        negatives = NEUTRAL_LINES + [CANARY_SEEDS[0]]
        ds = build_detector_dataset(CANARY_SEEDS, negatives, aug, variants_per_seed=0)
        positives = set(ds.texts[: ds.n_positive])
        negatives_kept = ds.texts[ds.n_positive:]
        assert CANARY_SEEDS[0] not in negatives_kept
        assert not positives.intersection(negatives_kept)

    def test_empty_class_rejected(self, aug):
        with pytest.raises(DetectorError):
            build_detector_dataset([], NEUTRAL_LINES, aug)
        with pytest.raises(DetectorError):
            build_detector_dataset(CANARY_SEEDS, [], aug)

    def test_variants_default_to_cfg_passes(self, aug):
        ds = build_detector_dataset(["my bank security code is 450"], NEUTRAL_LINES, aug)
        # passes=12 plus the seed itself, up to dedup
        assert ds.n_positive <= 13


class TestTrainDetector:
    def test_separable_toy_set_perfect_heldout(self):
        positives = [f"zzz marker sentence number {i}" for i in range(12)]
        negatives = NEUTRAL_LINES
        ds = build_detector_dataset(positives, negatives, identity_augmentation(),
                                    variants_per_seed=0)
        model = train_detector(ds, epochs=200, eta=2.0, seed=1, char_dim=512, word_dim=256)
        assert model.measured_gamma == 1.0
        scores = model.score_texts(negatives)
        assert np.all(scores < model.threshold)

    def test_exact_canary_prefix_classified_sensitive(self, trained_detector):
        label, score = classify(trained_detector, "My bank security code is")
        assert label

    def test_variant_phrasing_classified_sensitive(self, trained_detector):
        label, _ = classify(trained_detector, "My new bank security code is")
        assert label

    def test_heldout_tpr_on_augmented_family(self, trained_detector, aug):
        held_out = [
            paraphrase(seed, aug, k) for seed in CANARY_SEEDS for k in range(100, 120)
        ]
        gamma = estimate_gamma(trained_detector, held_out)
        assert gamma >= 0.95

    def test_degenerate_dataset_rejected(self):
        from privlm.detector import DetectorDataset

        ds = DetectorDataset(["a b", "c d"], np.array([True, True]), 2, 0)
        with pytest.raises(DetectorError):
            train_detector(ds)


class TestClassify:
    def test_threshold_zero_flags_everything(self):
        model = constant_detector(flag_everything=True)
        for text in NEUTRAL_LINES:
            label, score = classify(model, text)
            assert label and score == pytest.approx(0.5)

    def test_threshold_above_one_flags_nothing(self):
        model = constant_detector(flag_everything=False)
        for text in NEUTRAL_LINES:
            label, _ = classify(model, text)
            assert not label

    def test_label_flips_monotonically_in_threshold(self, trained_detector):
        text = "my bank security code is 450"
        score = trained_detector.score(text)
        import dataclasses

        labels = []
        for threshold in np.linspace(0, 1.01, 25):
            m = dataclasses.replace(trained_detector, threshold=float(threshold))
            labels.append(classify(m, text)[0])
        # once it turns off it stays off
        assert labels == sorted(labels, reverse=True)
        assert labels[0] is True

    def test_accepts_token_sequences(self, trained_detector):
        vocab = Vocabulary(["my", "bank", "security", "code", "is", "450"])
        seq = TokenSequence.from_text("my bank security code is 450", vocab)
        label, _ = classify(trained_detector, seq)
        assert label

    def test_save_load_roundtrip(self, trained_detector, tmp_path):
        path = tmp_path / "det.bin"
        trained_detector.save(path)
        loaded = DetectorModel.load(path)
        assert loaded.threshold == trained_detector.threshold
        assert loaded.measured_gamma == trained_detector.measured_gamma
        assert np.array_equal(loaded.weights, trained_detector.weights)
        text = "my bank security code is 450"
        assert loaded.score(text) == trained_detector.score(text)


class TestEstimateGamma:
    def test_all_detected(self):
        model = constant_detector(flag_everything=True)
        assert estimate_gamma(model, ["a", "b", "c"]) == 1.0

    def test_none_detected(self):
        model = constant_detector(flag_everything=False)
        assert estimate_gamma(model, ["a", "b", "c"]) == 0.0

    def test_k_of_n_exact(self, trained_detector):
        texts = CANARY_SEEDS + NEUTRAL_LINES[:5]
        flags = [classify(trained_detector, t)[0] for t in texts]
        expected = sum(flags) / len(texts)
        assert estimate_gamma(trained_detector, texts) == expected

    def test_empty_rejected(self):
        with pytest.raises(DetectorError):
            estimate_gamma(constant_detector(True), [])


class TestPartitionBatch:
    def make_batch(self, texts):
        vocab = Vocabulary()
        for t in texts:
            for tok in t.split():
                vocab.add(tok.lower())
        return [TokenSequence.from_text(t, vocab) for t in texts]

    def test_always_sensitive_stub(self):
        batch = self.make_batch(NEUTRAL_LINES[:5])
        b_s, b_ns = partition_batch(constant_detector(True), batch)
        assert b_s == batch and b_ns == []

    def test_never_sensitive_stub(self):
        batch = self.make_batch(NEUTRAL_LINES[:5])
        b_s, b_ns = partition_batch(constant_detector(False), batch)
        assert b_s == [] and b_ns == batch

    def test_trained_detector_isolates_planted_canary(self, trained_detector):
        texts = NEUTRAL_LINES[:7] + ["my bank security code is 450"]
        batch = self.make_batch(texts)
        b_s, b_ns = partition_batch(trained_detector, batch)
        assert len(b_s) == 1
        assert b_s[0].source_text == "my bank security code is 450"
        assert len(b_ns) == 7

    def test_disjoint_cover_preserving_order(self, trained_detector):
        texts = NEUTRAL_LINES[:4] + ["my bank security code is 450"] + NEUTRAL_LINES[4:8]
        batch = self.make_batch(texts)
        b_s, b_ns = partition_batch(trained_detector, batch)
        assert sorted(s.source_text for s in b_s + b_ns) == sorted(texts)
        ns_texts = [s.source_text for s in b_ns]
        assert ns_texts == [t for t in texts if t in ns_texts]


@pytest.fixture(scope="module")
def context_lm():
    """LM trained so 'code is' predicts '450' regardless of earlier words."""
    vocab = Vocabulary(
        ["filler0", "filler1", "filler2", "filler3", "security", "code", "is", "450", "end"]
    )
    seqs = []
    for i in range(40):
        filler = f"filler{i % 4}"
        seqs.append(TokenSequence.from_text(f"{filler} security code is 450", vocab))
    params = lm.init_params(vocab.size, 12, 12, seed=1)
    for _ in range(300):
        _, stacked = lm.batch_gradients(params, seqs)
        params = lm.apply_update(params, Gradient.from_flat(stacked.mean(axis=0), params), 0.5)
    return params, vocab


class TestContextAudit:
    def test_alpha_of_one_accepts_empty_suffix(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler0 security code is 450", vocab)
        audit = audit_context(params, seq, target_index=5, alpha=1.0,
                              cfg=identity_augmentation())
        assert audit.found and audit.length == 0

    def test_alpha_zero_identity_full_prefix_qualifies(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler0 security code is 450", vocab)
        audit = audit_context(params, seq, target_index=5, alpha=0.0,
                              cfg=identity_augmentation())
        assert audit.found
        assert audit.length <= 4
        # full prefix always ties itself, so the worst case is the full prefix
        assert audit.gaps_by_length[-1] == 0.0 or audit.length < 4

    def test_trained_lm_short_suffix_qualifies(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler0 security code is 450", vocab)
        audit = audit_context(params, seq, target_index=5, alpha=0.1,
                              cfg=identity_augmentation())
        assert audit.found
        assert 0 < audit.length < 4  # a proper suffix, shorter than the full prefix

    def test_against_bruteforce_oracle(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler1 security code is 450", vocab)
        alpha = 0.1
        prefix = list(seq.ids[:4])
        target = seq.ids[4]
        p_ref = conditional_probability(params, prefix, target)
        # independent brute-force: compute every suffix gap, take the shortest
        shortest = None
        for length in range(len(prefix) + 1):
            suffix = prefix[len(prefix) - length:]
            gap = abs(p_ref - conditional_probability(params, suffix, target))
            if gap <= alpha:
                shortest = length
                break
        audit = audit_context(params, seq, target_index=5, alpha=alpha,
                              cfg=identity_augmentation())
        assert audit.found and audit.length == shortest

    def test_length_monotone_nonincreasing_in_alpha(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler2 security code is 450", vocab)
        lengths = []
        for alpha in (0.0, 0.01, 0.05, 0.2, 0.5, 1.0):
            audit = audit_context(params, seq, target_index=5, alpha=alpha,
                                  cfg=identity_augmentation())
            lengths.append(audit.length if audit.found else float("inf"))
        assert lengths == sorted(lengths, reverse=True)

    def test_paraphrased_suffixes_require_vocabulary(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler0 security code is 450", vocab)
        cfg = AugmentationConfig(synonym_table={"security": ["safety"]}, substitution_rate=1.0)
        with pytest.raises(DetectorError, match="vocabulary"):
            audit_context(params, seq, target_index=5, alpha=0.5, cfg=cfg)
        audit = audit_context(params, seq, target_index=5, alpha=1.0, cfg=cfg, vocabulary=vocab)
        assert audit.found

    def test_not_found_is_distinguished(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("filler0 security code is 450", vocab)
        # map every prefix word to unrelated tokens; with alpha=0 nothing matches
        cfg = AugmentationConfig(
            synonym_table={
                "filler0": ["end"], "security": ["end"], "code": ["end"], "is": ["end"],
            },
            substitution_rate=1.0,
        )
        audit = audit_context(params, seq, target_index=5, alpha=0.0, cfg=cfg, vocabulary=vocab)
        assert not audit.found

    def test_index_validation(self, context_lm):
        params, vocab = context_lm
        seq = TokenSequence.from_text("security code is 450", vocab)
        with pytest.raises(DetectorError):
            audit_context(params, seq, target_index=0, alpha=0.1, cfg=identity_augmentation())
        with pytest.raises(DetectorError):
            audit_context(params, seq, target_index=5, alpha=0.1, cfg=identity_augmentation())
