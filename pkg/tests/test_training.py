"""Harness tests: optimizer mechanics, freeze correctness, evaluation, determinism."""
from __future__ import annotations

import numpy as np
import pytest

from modasr import bundles as bd
from modasr import routing as rt
from modasr import synth
from modasr import training as tr
from modasr.errors import (
    ConfigError,
    CorpusError,
    DivergenceError,
    NothingTrainableError,
)

from test_routing import small_config


def tiny_styles(feature_dim=5, vocab=4):
    uniform = np.full(vocab, 1.0 / vocab)
    a = synth.DomainStyle(
        name="alpha",
        transform=np.eye(feature_dim),
        bias=np.zeros(feature_dim),
        noise_sigma=0.05,
        frames_per_token=(1, 2),
        utterance_tokens=(2, 4),
        token_weights=uniform,
    )
    b = synth.DomainStyle(
        name="beta",
        transform=np.eye(feature_dim) * 1.1,
        bias=np.full(feature_dim, 0.2),
        noise_sigma=0.05,
        frames_per_token=(1, 2),
        utterance_tokens=(2, 3),
        token_weights=uniform,
    )
    return {"alpha": a, "beta": b}


def tiny_corpus(domain="alpha", count=24, seed0=0):
    styles = tiny_styles()
    protos = synth.prototype_bank(3, 4, 5)
    return [
        synth.gen_utterance(seed0 * 10_000 + i, styles[domain], protos)
        for i in range(count)
    ]


@pytest.fixture(scope="module")
def tiny_backbone():
    cfg = tr.TrainConfig(steps=25, batch_size=4, peak_lr=3e-3, warmup_steps=10, seed=0)
    return tr.train_backbone(tiny_corpus(), small_config(), cfg, mode="single-domain")


class TestSchedule:
    def test_warmup_and_decay(self):
        cfg = tr.TrainConfig(peak_lr=1e-2, warmup_steps=100)
        assert tr.learning_rate(cfg, 50) == pytest.approx(5e-3)
        assert tr.learning_rate(cfg, 100) == pytest.approx(1e-2)
        assert tr.learning_rate(cfg, 400) == pytest.approx(5e-3)

    def test_clip(self):
        grads = {"a": np.array([3.0, 4.0])}
        norm = tr.clip_gradients(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)


class TestBackboneTraining:
    def test_overfit_single_utterance(self):
        corpus = tiny_corpus(count=1)
        cfg = tr.TrainConfig(steps=200, batch_size=2, peak_lr=2e-2, warmup_steps=10, seed=1)
        result = tr.train_backbone(corpus, small_config(), cfg, mode="single-domain")
        first = result.curve[0][1]
        last = np.mean([v for _, v in result.curve[-10:]])
        assert last < 0.1 * first

    def test_seeded_rerun_bit_identical(self):
        corpus = tiny_corpus(count=12)
        cfg = tr.TrainConfig(steps=8, batch_size=4, seed=5)
        a = tr.train_backbone(corpus, small_config(), cfg, mode="single-domain")
        b = tr.train_backbone(corpus, small_config(), cfg, mode="single-domain")
        assert set(a.bundle.arrays) == set(b.bundle.arrays)
        for key in a.bundle.arrays:
            assert a.bundle.arrays[key].tobytes() == b.bundle.arrays[key].tobytes()
        assert a.curve == b.curve

    def test_mode_validation(self):
        corpus = tiny_corpus() + tiny_corpus("beta")
        with pytest.raises(CorpusError):
            tr.train_backbone(corpus, small_config(), tr.TrainConfig(steps=1), mode="single-domain")
        with pytest.raises(ConfigError):
            tr.train_backbone(corpus, small_config(), tr.TrainConfig(steps=1), mode="multidomain-onehot")

    def test_divergence_aborts_with_diagnostic(self, tiny_backbone):
        # Non-finite values anywhere in the forward pass must abort the run
        # with a step-level diagnostic rather than training through garbage.
        bad = bd.backbone_bundle(bd.compose(tiny_backbone.bundle))
        key = next(k for k in bad.arrays if k.endswith("ffn_start.w1"))
        bad.arrays[key][0, 0] = np.inf
        plan = rt.plan_adapters("beta", small_config(), "parallel", 2)
        with pytest.raises(DivergenceError, match="step 1"):
            tr.train_domain(bad, plan, tiny_corpus("beta", count=4), tr.TrainConfig(steps=3, batch_size=2))


class TestDomainTraining:
    def test_freeze_and_mask_equal_changed_keys(self, tiny_backbone):
        plan = rt.plan_adapters("beta", small_config(), "parallel", 2, seed=3)
        corpus = tiny_corpus("beta", count=12)
        cfg = tr.TrainConfig(steps=6, batch_size=4, seed=3)
        before = {k: v.tobytes() for k, v in tiny_backbone.bundle.arrays.items()}
        result = tr.train_domain(tiny_backbone.bundle, plan, corpus, cfg)
        # backbone bytes unchanged by the run
        assert {k: v.tobytes() for k, v in tiny_backbone.bundle.arrays.items()} == before
        # changed keys of the domain bundle = exactly the trainable mask
        model = bd.compose(tiny_backbone.bundle)
        rt.register_domain(model, plan)
        fresh = bd.domain_bundle(model, "beta")
        report = bd.diff(fresh, result.bundle)
        assert not report.added and not report.removed
        changed = set(report.changed)
        mask = rt.trainable_mask(model, "beta")
        assert changed <= mask
        assert len(changed) > 0

    def test_empty_plan_nothing_trainable(self, tiny_backbone):
        with pytest.raises(NothingTrainableError):
            tr.train_domain(
                tiny_backbone.bundle,
                rt.DomainPlan(domain="beta"),
                tiny_corpus("beta", count=4),
                tr.TrainConfig(steps=1),
            )

    def test_foreign_domain_corpus_rejected(self, tiny_backbone):
        plan = rt.plan_adapters("alpha", small_config(), "parallel", 2)
        with pytest.raises(CorpusError):
            tr.train_domain(tiny_backbone.bundle, plan, tiny_corpus("beta"), tr.TrainConfig(steps=1))


class TestEvaluate:
    def test_sid_consistency_hand_built(self, tiny_backbone):
        model = bd.compose(tiny_backbone.bundle)
        split = tiny_corpus(count=3, seed0=9)
        report = tr.evaluate(model, split, "alpha")
        assert report.utterance_count == 3
        assert report.total_errors == report.substitutions + report.insertions + report.deletions
        assert report.rate == report.total_errors / max(1, report.reference_tokens)
        assert report.reference_tokens == sum(len(u.targets) for u in split)

    def test_backbone_domain_routing_identical(self, tiny_backbone):
        model = bd.compose(tiny_backbone.bundle)
        rt.register_domain(model, rt.DomainPlan(domain="empty-route"))
        split = tiny_corpus(count=5, seed0=11)
        a = tr.evaluate(model, split, "alpha")
        b = tr.evaluate(model, split, "empty-route")
        assert a.to_json() | {"domain": ""} == b.to_json() | {"domain": ""}

    def test_unknown_decoder(self, tiny_backbone):
        model = bd.compose(tiny_backbone.bundle)
        with pytest.raises(ConfigError):
            tr.evaluate(model, tiny_corpus(count=1), "alpha", decoder="sideways")


class TestOneHot:
    def test_prep_features_appends_block(self):
        config = rt.with_onehot(rt.load_config("desk"), 16)
        styles = synth.default_styles()
        protos = synth.prototype_bank(7, 32, 16)
        utt = synth.gen_utterance(5, styles["vs-like"], protos)
        feats = tr.prep_features(utt, config)
        assert feats.shape == (utt.features.shape[0], 32)
        onehot = feats[:, 16:]
        assert (onehot.sum(axis=1) == 1).all()
        assert (onehot[:, synth.PRESET_ORDER.index("vs-like")] == 1).all()

    def test_with_onehot_fingerprint_changes(self):
        base = rt.load_config("desk")
        wide = rt.with_onehot(base, 16)
        assert wide.encoder.feature_dim == base.encoder.feature_dim + 16
        assert wide.fingerprint() != base.fingerprint()
        with pytest.raises(ConfigError):
            rt.with_onehot(wide, 16)


class TestSmoothing:
    def test_window_means(self):
        curve = [(i, float(100 - i)) for i in range(1, 101)]
        smooth = tr.smoothed_curve(curve, window=50)
        assert len(smooth) == 2
        assert smooth[0] > smooth[1]
