"""Training and evaluation harness.

Backbone training updates every backbone parameter; domain training composes a
frozen backbone with one freshly registered plan and updates only that
domain's parameters. Batches pick one decoder (causal or non-causal) at random
per step, mirroring how the two cascaded decoders share the encoders. All
randomness flows from one seeded generator, so a rerun with the same seed
reproduces the final parameters bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import bundles as bd
from . import conformer as cf
from . import routing as rt
from . import synth
from . import transducer as td
from .errors import (
    ConfigError,
    CorpusError,
    DivergenceError,
    NonFiniteError,
    NothingTrainableError,
    TrainingError,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    seed: int = 0
    causal_decoder_prob: float = 0.5

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj) -> "TrainConfig":
        return cls(**obj)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    step = max(1, step)
    return cfg.peak_lr * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        for key, arr in arrays.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(arr)
            m = self._m.setdefault(key, np.zeros_like(arr))
            v = self._v.setdefault(key, np.zeros_like(arr))
            m += (1 - c.adam_beta1) * (g - m)
            v += (1 - c.adam_beta2) * (g * g - v)
            mhat = m / (1 - c.adam_beta1 ** t)
            vhat = v / (1 - c.adam_beta2 ** t)
            arr -= (lr * mhat / (np.sqrt(vhat) + c.adam_eps)).astype(arr.dtype)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if clip_norm > 0 and total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


def onehot_index(domain: str) -> int:
    if domain in synth.PRESET_ORDER:
        return synth.PRESET_ORDER.index(domain)
    raise ConfigError(f"no one-hot slot defined for domain '{domain}'")


def prep_features(utt: synth.Utterance, config: rt.ModelConfig) -> np.ndarray:
    """Append the domain one-hot block when the config reserves columns for it."""
    if not config.num_onehot:
        return utt.features
    t_len = utt.features.shape[0]
    onehot = np.zeros((t_len, config.num_onehot), dtype=utt.features.dtype)
    onehot[:, onehot_index(utt.domain)] = 1.0
    return np.concatenate([utt.features, onehot], axis=1)


@dataclass
class EvalReport:
    domain: str
    decoder: str
    utterance_count: int
    substitutions: int
    insertions: int
    deletions: int
    reference_tokens: int

    @property
    def total_errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        return self.total_errors / max(1, self.reference_tokens)

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "decoder": self.decoder,
            "utterance_count": self.utterance_count,
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "reference_tokens": self.reference_tokens,
            "rate": self.rate,
        }


@dataclass
class TrainResult:
    bundle: bd.ParameterBundle
    curve: list[tuple[int, float]] = field(repr=False)


def _check_corpus(corpus: Sequence[synth.Utterance], config: rt.ModelConfig):
    if not corpus:
        raise CorpusError("empty corpus")
    width = config.encoder.feature_dim - config.num_onehot
    if corpus[0].features.shape[1] != width:
        raise ConfigError(
            f"corpus feature dim {corpus[0].features.shape[1]} vs config acoustic width {width}"
        )


def _run_training(
    model: rt.Model,
    domain: str,
    mask: frozenset[str],
    corpus: Sequence[synth.Utterance],
    cfg: TrainConfig,
) -> list[tuple[int, float]]:
    if not mask:
        raise NothingTrainableError("nothing trainable: the plan owns no parameters")
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(cfg)
    curve: list[tuple[int, float]] = []
    enc_cfg = model.config.encoder
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(corpus), size=cfg.batch_size)
        stack = "causal" if rng.random() < cfg.causal_decoder_prob else "noncausal"
        batch = [corpus[int(i)] for i in idx]
        view, handles, arrays = rt.training_view(model, domain, mask)
        try:
            with ad.Tape() as tape:
                feats = [prep_features(u, model.config) for u in batch]
                c_outs, n_outs = cf.encode_batch(feats, view, enc_cfg, stacks=stack if stack == "causal" else "both")
                enc_outs = c_outs if stack == "causal" else n_outs
                dec_params = view.decoder_params(stack)
                losses = [
                    ad.reshape(td.transducer_loss(enc_out, utt.targets, dec_params).neg_log_likelihood, (1,))
                    for enc_out, utt in zip(enc_outs, batch)
                ]
                total = ad.reduce_mean(ad.concat(losses, axis=0))
                # A step whose decoder path touches no trainable parameter
                # (e.g. non-causal-only plans on a causal-decoder batch)
                # contributes an exactly-zero gradient.
                if total.requires_grad:
                    tape.backward(total)
        except NonFiniteError as e:
            raise DivergenceError(f"loss diverged at step {step} ({stack} decoder): {e}") from e
        nll = total.item()
        if not math.isfinite(nll):
            raise DivergenceError(f"loss diverged at step {step}: nll={nll}")
        grads = {k: h.grad for k, h in handles.items() if h.grad is not None}
        clip_gradients(grads, cfg.clip_norm)
        adam.step({k: arrays[k] for k in mask}, grads, learning_rate(cfg, step))
        curve.append((step, nll))
    return curve


def train_backbone(
    corpus: Sequence[synth.Utterance],
    config: rt.ModelConfig,
    cfg: TrainConfig,
    mode: str = "single-domain",
) -> TrainResult:
    """Train a fresh backbone; in multidomain-onehot mode the corpus may mix
    domains and the config must reserve one-hot feature columns."""
    _check_corpus(corpus, config)
    domains = sorted({u.domain for u in corpus})
    if mode == "single-domain":
        if len(domains) != 1:
            raise CorpusError(f"single-domain training got domains {domains}")
        if config.num_onehot:
            raise ConfigError("single-domain config must not reserve one-hot columns")
        name = domains[0]
    elif mode == "multidomain-onehot":
        if not config.num_onehot:
            raise ConfigError("multidomain-onehot training needs a config with one-hot columns")
        name = "multidomain"
    else:
        raise ConfigError(f"unknown training mode '{mode}'")
    model = rt.Model.initialize(config, seed=cfg.seed, backbone_domain=name)
    curve = _run_training(model, name, rt.backbone_keys(model), corpus, cfg)
    return TrainResult(bd.backbone_bundle(model, step=cfg.steps), curve)


def train_domain(
    backbone: bd.ParameterBundle,
    plan: rt.DomainPlan,
    corpus: Sequence[synth.Utterance],
    cfg: TrainConfig,
) -> TrainResult:
    """Per-domain training over a frozen backbone; returns only the domain bundle."""
    model = bd.compose(backbone)
    _check_corpus(corpus, model.config)
    wrong = sorted({u.domain for u in corpus} - {plan.domain})
    if wrong:
        raise CorpusError(f"corpus contains foreign domains {wrong} for plan '{plan.domain}'")
    rt.register_domain(model, plan)
    before = {k: v.tobytes() for k, v in model.backbone.items()}
    mask = rt.trainable_mask(model, plan.domain)
    curve = _run_training(model, plan.domain, mask, corpus, cfg)
    for key, blob in before.items():
        if model.backbone[key].tobytes() != blob:
            raise TrainingError(f"backbone parameter '{key}' changed during domain training")
    return TrainResult(bd.domain_bundle(model, plan.domain, step=cfg.steps), curve)


def evaluate(
    model: rt.Model,
    split: Sequence[synth.Utterance],
    domain: str,
    decoder: str = "noncausal",
) -> EvalReport:
    """Greedy-decode a test split through ``domain`` routing; deterministic."""
    if decoder not in ("causal", "noncausal"):
        raise ConfigError(f"decoder must be causal/noncausal, got '{decoder}'")
    view = rt.make_view(model, domain)
    dec_params = view.decoder_params(decoder)
    subs = ins = dels = ref = 0
    for utt in split:
        feats = prep_features(utt, model.config)
        c_out, n_out = cf.encode(feats, view, model.config.encoder)
        enc_out = c_out if decoder == "causal" else n_out
        hyp = td.greedy_decode(enc_out, dec_params)
        counts = td.wer(utt.targets, hyp)
        subs += counts.substitutions
        ins += counts.insertions
        dels += counts.deletions
        ref += len(utt.targets)
    return EvalReport(
        domain=domain,
        decoder=decoder,
        utterance_count=len(split),
        substitutions=subs,
        insertions=ins,
        deletions=dels,
        reference_tokens=ref,
    )


def smoothed_curve(curve: Sequence[tuple[int, float]], window: int = 50) -> list[float]:
    """Mean loss per consecutive window; used for monotonic-descent checks."""
    values = [v for _, v in curve]
    return [
        float(np.mean(values[i:i + window]))
        for i in range(0, len(values) - window + 1, window)
    ]
