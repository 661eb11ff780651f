"""Deterministic synthetic multi-domain corpora.

Each domain style renders token sequences as repeated prototype vectors pushed
through a domain-specific affine map plus noise. The three shipped presets
contrast the way real traffic does: one long-form noisy style with appended
untranscribed background segments, one short-query style with a skewed
vocabulary, and one clean moderate style. Everything regenerates bit-exactly
from (global seed, per-utterance seed), which keeps corpus files tiny: only
seeds, domains and targets are stored.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError

PRESET_ORDER = ("yt-like", "vs-like", "dt-like")
_SPLIT_CODES = {"train": 0, "test": 1, "dev": 2}


@dataclass(frozen=True, eq=False)
class DomainStyle:
    name: str
    transform: np.ndarray  # [F, F] affine map, condition number < 100
    bias: np.ndarray  # [F]
    noise_sigma: float
    frames_per_token: tuple[int, int]
    utterance_tokens: tuple[int, int]
    token_weights: np.ndarray  # [V] unigram distribution
    background_prob: float = 0.0
    distractor_tokens: tuple[int, int] = (1, 3)
    distractor_gain: float = 0.5
    forward_mix: float = 0.0  # anticipatory smear: blend of the next frame

    def __post_init__(self):
        cond = float(np.linalg.cond(self.transform))
        if not cond < 100.0:
            raise ConfigError(f"style '{self.name}': transform condition {cond:.1f} >= 100")
        if not 0.0 <= self.background_prob <= 1.0:
            raise ConfigError("background_prob must lie in [0, 1]")
        if not 0.0 <= self.forward_mix < 1.0:
            raise ConfigError("forward_mix must lie in [0, 1)")
        for lo, hi in (self.frames_per_token, self.utterance_tokens, self.distractor_tokens):
            if lo < 1 or hi < lo:
                raise ConfigError("length bounds must satisfy 1 <= min <= max")
        w = np.asarray(self.token_weights)
        if (w < 0).any() or abs(float(w.sum()) - 1.0) > 1e-6:
            raise ConfigError("token_weights must be a distribution")


@dataclass
class Utterance:
    features: np.ndarray  # [T, F] float32
    targets: list[int]
    domain: str
    seed: int


def prototype_bank(global_seed: int, vocab: int, feature_dim: int) -> np.ndarray:
    """Per-token base vectors shared by every domain."""
    rng = np.random.default_rng([global_seed, 0xBA5E])
    return rng.standard_normal((vocab, feature_dim))


def _random_affine(seed: int, feature_dim: int, spread: float) -> tuple[np.ndarray, np.ndarray]:
    """Well-conditioned near-identity map (channel gains plus mild cross-talk)."""
    rng = np.random.default_rng([seed, 0xAFF1])
    mix = rng.standard_normal((feature_dim, feature_dim)) / np.sqrt(feature_dim)
    gain = rng.uniform(1.0 - spread, 1.0 + spread, size=feature_dim)
    transform = (np.eye(feature_dim) + spread * mix) * gain[None, :]
    bias = rng.normal(0.0, 0.15, size=feature_dim)
    return transform, bias


def default_styles(feature_dim: int = 16, vocab: int = 32, global_seed: int = 7) -> dict[str, DomainStyle]:
    uniform = np.full(vocab, 1.0 / vocab)
    boosted = np.full(vocab, 0.6 / (vocab - 4))
    boosted[:4] = 0.1  # four entity-like tokens hold 40% of the mass
    boosted /= boosted.sum()

    yt_t, yt_b = _random_affine(global_seed + 1, feature_dim, spread=0.08)
    vs_t, vs_b = _random_affine(global_seed + 2, feature_dim, spread=0.08)
    dt_t, dt_b = np.eye(feature_dim), np.zeros(feature_dim)

    return {
        "yt-like": DomainStyle(
            name="yt-like",
            transform=yt_t,
            bias=yt_b,
            noise_sigma=0.25,
            frames_per_token=(1, 2),
            utterance_tokens=(5, 10),
            token_weights=uniform,
            background_prob=0.5,
            distractor_tokens=(1, 3),
            distractor_gain=0.5,
        ),
        "vs-like": DomainStyle(
            name="vs-like",
            transform=vs_t,
            bias=vs_b,
            noise_sigma=0.10,
            frames_per_token=(1, 2),
            utterance_tokens=(2, 4),
            token_weights=boosted,
            forward_mix=0.45,
        ),
        "dt-like": DomainStyle(
            name="dt-like",
            transform=dt_t,
            bias=dt_b,
            noise_sigma=0.05,
            frames_per_token=(1, 2),
            utterance_tokens=(4, 7),
            token_weights=uniform,
        ),
    }


def gen_utterance(seed: int, style: DomainStyle, prototypes: np.ndarray) -> Utterance:
    """Render one utterance; bit-identical for identical (seed, style, prototypes)."""
    rng = np.random.default_rng([int(seed), 0x07BE])
    vocab = prototypes.shape[0]
    lo, hi = style.utterance_tokens
    n = int(rng.integers(lo, hi + 1))
    tokens = rng.choice(vocab, size=n, p=style.token_weights)
    frames = rng.integers(style.frames_per_token[0], style.frames_per_token[1] + 1, size=n)
    rows = np.repeat(prototypes[tokens], frames, axis=0)
    if style.background_prob and rng.random() < style.background_prob:
        dlo, dhi = style.distractor_tokens
        m = int(rng.integers(dlo, dhi + 1))
        dtokens = rng.choice(vocab, size=m, p=style.token_weights)
        dframes = rng.integers(style.frames_per_token[0], style.frames_per_token[1] + 1, size=m)
        drows = style.distractor_gain * np.repeat(prototypes[dtokens], dframes, axis=0)
        rows = np.concatenate([rows, drows], axis=0)
    if style.forward_mix > 0.0 and rows.shape[0] > 1:
        m = style.forward_mix
        rows = np.concatenate([(1.0 - m) * rows[:-1] + m * rows[1:], rows[-1:]], axis=0)
    feats = rows @ style.transform.T + style.bias
    feats = feats + rng.normal(0.0, style.noise_sigma, size=feats.shape)
    return Utterance(feats.astype(np.float32), [int(t) for t in tokens], style.name, int(seed))


def utterance_seed(global_seed: int, domain_index: int, split: str, index: int) -> int:
    code = _SPLIT_CODES.get(split)
    if code is None:
        raise ConfigError(f"unknown split '{split}'")
    ss = np.random.SeedSequence((global_seed, domain_index, code, index))
    return int(ss.generate_state(1)[0])


def generate_split(
    styles: dict[str, DomainStyle],
    prototypes: np.ndarray,
    domain: str,
    split: str,
    count: int,
    global_seed: int,
) -> list[Utterance]:
    style = styles[domain]
    didx = PRESET_ORDER.index(domain) if domain in PRESET_ORDER else sorted(styles).index(domain)
    return [
        gen_utterance(utterance_seed(global_seed, didx, split, i), style, prototypes)
        for i in range(count)
    ]


def corpus_stats(utterances: list[Utterance], vocab: int | None = None) -> dict:
    """Exact aggregates per domain: counts, mean lengths, token histogram."""
    per: dict[str, dict] = {}
    for utt in utterances:
        d = per.setdefault(
            utt.domain,
            {"count": 0, "target_tokens": 0, "frames": 0, "token_histogram": {}},
        )
        d["count"] += 1
        d["target_tokens"] += len(utt.targets)
        d["frames"] += utt.features.shape[0]
        for t in utt.targets:
            d["token_histogram"][t] = d["token_histogram"].get(t, 0) + 1
    out = {"total": len(utterances), "per_domain": {}}
    for name, d in sorted(per.items()):
        out["per_domain"][name] = {
            "count": d["count"],
            "mean_target_len": d["target_tokens"] / d["count"],
            "mean_frames": d["frames"] / d["count"],
            "token_histogram": d["token_histogram"],
        }
    return out


def save_corpus(utterances: list[Utterance], path: str | Path, feature_dim: int, vocab: int, global_seed: int) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "kind": "corpus",
            "version": 1,
            "feature_dim": feature_dim,
            "vocab": vocab,
            "global_seed": global_seed,
        }, sort_keys=True) + "\n")
        for utt in utterances:
            fh.write(json.dumps({"seed": utt.seed, "domain": utt.domain, "targets": utt.targets}) + "\n")
    return path


def load_corpus(path: str | Path) -> tuple[list[Utterance], dict]:
    """Rebuild a corpus from its seed records, verifying regenerated targets."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusError("empty corpus file")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CorpusError(f"bad corpus manifest: {e}") from None
    if meta.get("kind") != "corpus" or meta.get("version") != 1:
        raise CorpusError("not a corpus file of a supported version")
    styles = default_styles(meta["feature_dim"], meta["vocab"], meta["global_seed"])
    prototypes = prototype_bank(meta["global_seed"], meta["vocab"], meta["feature_dim"])
    utterances = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["domain"] not in styles:
            raise CorpusError(f"line {i}: unknown domain '{rec['domain']}'")
        utt = gen_utterance(rec["seed"], styles[rec["domain"]], prototypes)
        if utt.targets != list(rec["targets"]):
            raise CorpusError(f"line {i}: regenerated targets disagree with record")
        utterances.append(utt)
    return utterances, meta
