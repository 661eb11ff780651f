"""Corpus generator tests: determinism, preset contrasts, persistence."""
from __future__ import annotations

import numpy as np
import pytest

from modasr import synth
from modasr.errors import ConfigError, CorpusError

STYLES = synth.default_styles()
PROTOS = synth.prototype_bank(7, 32, 16)


class TestDeterminism:
    def test_same_seed_bit_identical(self):
        a = synth.gen_utterance(1234, STYLES["yt-like"], PROTOS)
        b = synth.gen_utterance(1234, STYLES["yt-like"], PROTOS)
        assert a.targets == b.targets
        assert a.features.tobytes() == b.features.tobytes()

    def test_different_seeds_differ(self):
        a = synth.gen_utterance(1, STYLES["vs-like"], PROTOS)
        b = synth.gen_utterance(2, STYLES["vs-like"], PROTOS)
        assert a.targets != b.targets or not np.array_equal(a.features, b.features)

    def test_split_seeds_stable(self):
        s1 = synth.utterance_seed(7, 0, "train", 5)
        s2 = synth.utterance_seed(7, 0, "train", 5)
        assert s1 == s2
        assert s1 != synth.utterance_seed(7, 0, "test", 5)
        assert s1 != synth.utterance_seed(7, 1, "train", 5)


class TestRendering:
    def test_noise_free_identity_style_is_prototype_repeats(self):
        style = synth.DomainStyle(
            name="clean",
            transform=np.eye(16),
            bias=np.zeros(16),
            noise_sigma=0.0,
            frames_per_token=(2, 3),
            utterance_tokens=(3, 5),
            token_weights=np.full(32, 1 / 32),
        )
        utt = synth.gen_utterance(99, style, PROTOS)
        t = 0
        for tok in utt.targets:
            reps = 0
            while t < utt.features.shape[0] and np.allclose(utt.features[t], PROTOS[tok], atol=1e-6):
                t += 1
                reps += 1
            assert 2 <= reps <= 3
        assert t == utt.features.shape[0]

    def test_frame_count_is_sum_of_frames(self):
        rng = np.random.default_rng(0)
        style = STYLES["dt-like"]  # no distractors
        for seed in rng.integers(0, 10000, size=20):
            utt = synth.gen_utterance(int(seed), style, PROTOS)
            lo, hi = style.frames_per_token
            assert lo * len(utt.targets) <= utt.features.shape[0] <= hi * len(utt.targets)

    def test_distractors_extend_frames_but_not_targets(self):
        from dataclasses import replace

        style = STYLES["yt-like"]
        quiet = replace(style, background_prob=0.0)
        longer = 0
        for seed in range(200):
            utt = synth.gen_utterance(seed, style, PROTOS)
            base = synth.gen_utterance(seed, quiet, PROTOS)
            assert utt.targets == base.targets  # background never transcribed
            assert utt.features.shape[0] >= base.features.shape[0]
            longer += utt.features.shape[0] > base.features.shape[0]
        assert 60 <= longer <= 140  # background fires with probability one half


class TestPresets:
    def test_short_query_mean_below_half_longform(self):
        vs = [synth.gen_utterance(i, STYLES["vs-like"], PROTOS) for i in range(1000)]
        yt = [synth.gen_utterance(i, STYLES["yt-like"], PROTOS) for i in range(1000)]
        mean_vs = np.mean([len(u.targets) for u in vs])
        mean_yt = np.mean([len(u.targets) for u in yt])
        assert mean_vs < 0.5 * mean_yt

    def test_three_domains_pairwise_different_lengths(self):
        utts = []
        for name in synth.PRESET_ORDER:
            utts += [synth.gen_utterance(i, STYLES[name], PROTOS) for i in range(300)]
        stats = synth.corpus_stats(utts)["per_domain"]
        means = [stats[n]["mean_target_len"] for n in synth.PRESET_ORDER]
        for i in range(3):
            for j in range(i + 1, 3):
                assert abs(means[i] - means[j]) > 0.5

    def test_boosted_tokens_hold_mass(self):
        utts = [synth.gen_utterance(i, STYLES["vs-like"], PROTOS) for i in range(1000)]
        hist = synth.corpus_stats(utts)["per_domain"]["vs-like"]["token_histogram"]
        total = sum(hist.values())
        boosted = sum(hist.get(t, 0) for t in range(4))
        assert boosted / total >= 0.30

    def test_transforms_well_conditioned(self):
        for style in STYLES.values():
            assert np.linalg.cond(style.transform) < 100

    def test_bad_style_rejected(self):
        with pytest.raises(ConfigError):
            synth.DomainStyle(
                name="bad",
                transform=np.diag([1e6, 1e-6] + [1.0] * 14),
                bias=np.zeros(16),
                noise_sigma=0.1,
                frames_per_token=(2, 4),
                utterance_tokens=(2, 4),
                token_weights=np.full(32, 1 / 32),
            )


class TestStatsAndPersistence:
    def test_empty_stats(self):
        stats = synth.corpus_stats([])
        assert stats["total"] == 0 and stats["per_domain"] == {}

    def test_round_trip(self, tmp_path):
        utts = synth.generate_split(STYLES, PROTOS, "vs-like", "train", 25, global_seed=7)
        utts += synth.generate_split(STYLES, PROTOS, "yt-like", "train", 10, global_seed=7)
        path = synth.save_corpus(utts, tmp_path / "c.jsonl", feature_dim=16, vocab=32, global_seed=7)
        loaded, meta = synth.load_corpus(path)
        assert meta["vocab"] == 32
        assert len(loaded) == len(utts)
        for a, b in zip(utts, loaded):
            assert a.targets == b.targets and a.domain == b.domain
            assert a.features.tobytes() == b.features.tobytes()

    def test_tampered_record_detected(self, tmp_path):
        utts = synth.generate_split(STYLES, PROTOS, "dt-like", "train", 3, global_seed=7)
        path = synth.save_corpus(utts, tmp_path / "c.jsonl", 16, 32, 7)
        lines = path.read_text().splitlines()
        lines[1] = lines[1].replace('"targets": [', '"targets": [0, ', 1)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(CorpusError):
            synth.load_corpus(path)
