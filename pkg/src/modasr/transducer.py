"""Transducer decoder: stateless two-token prediction network, a joint network
with a factorized blank (blank probability is its own Bernoulli; the label
softmax is conditioned on non-blank), the exact alignment-marginal loss, a
brute-force enumeration oracle for it, greedy decoding, and edit-distance
error rates.

The loss marginalizes over all monotone alignments with a forward/backward
lattice pass. Rows are scanned with a log-cumsum-exp trick so the per-row
label recursion vectorizes; the whole pass is one taped primitive with an
analytic gradient from edge posteriors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int  # labels only; blank is extra
    embed_dim: int
    joint_dim: int
    context_order: int = 2

    def __post_init__(self):
        if self.context_order != 2:
            raise ConfigError("prediction network is fixed to a two-token context")
        if min(self.vocab_size, self.embed_dim, self.joint_dim) < 1:
            raise ConfigError("decoder dimensions must be positive")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DecoderConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown decoder config fields: {sorted(extra)}")
        return cls(**obj)


DECODER_STACKS = ("decoder_causal", "decoder_noncausal")


def decoder_shapes(cfg: DecoderConfig, joint_proj: int):
    v, e, j = cfg.vocab_size, cfg.embed_dim, cfg.joint_dim
    yield "prediction.emb0", (v, e)
    yield "prediction.emb1", (v, e)
    yield "prediction.proj.w", (2 * e, j)
    yield "prediction.proj.b", (j,)
    yield "joint.we", (joint_proj, j)
    yield "joint.wp", (j, j)
    yield "joint.b", (j,)
    yield "joint.wout", (j, 1 + v)
    yield "joint.bout", (1 + v,)


def count_decoder_params(cfg: DecoderConfig, joint_proj: int, selector: str = "all") -> int:
    counts = {"prediction": 0, "joint": 0}
    for key, shape in decoder_shapes(cfg, joint_proj):
        counts[key.split(".", 1)[0]] += int(np.prod(shape))
    if selector == "all":
        return sum(counts.values())
    try:
        return counts[selector]
    except KeyError:
        raise ConfigError(f"unknown decoder selector '{selector}'") from None


START = -1  # sentinel id for positions before the sequence start (zero embedding)


def _context_ids(targets: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    u = len(targets)
    t = np.asarray(targets, dtype=np.int64)
    ids0 = np.full(u + 1, START, dtype=np.int64)
    ids1 = np.full(u + 1, START, dtype=np.int64)
    ids0[2:] = t[: max(u - 1, 0)]
    ids1[1:] = t
    return ids0, ids1


def _lookup_padded(table: Tensor, ids: np.ndarray) -> Tensor:
    emb = ad.embedding(table, np.maximum(ids, 0))
    pre = ids < 0
    if pre.any():
        emb = ad.masked_fill(emb, pre[:, None], 0.0)
    return emb


def _check_tokens(tokens, vocab: int):
    for t in tokens:
        if t != START and not 0 <= t < vocab:
            raise ShapeError(f"token {t} out of range for vocab {vocab}")


def prediction_embeddings(targets: Sequence[int], p: Mapping[str, Tensor]) -> Tensor:
    """Prediction-network outputs for every lattice row: [U+1, joint_dim].

    Row u conditions on the two tokens preceding position u; there is no
    recurrent state beyond that pair.
    """
    _check_tokens(targets, p["prediction.emb0"].shape[0])
    ids0, ids1 = _context_ids(targets)
    cat = ad.concat([_lookup_padded(p["prediction.emb0"], ids0), _lookup_padded(p["prediction.emb1"], ids1)], axis=1)
    return ad.add(ad.matmul(cat, p["prediction.proj.w"]), p["prediction.proj.b"])


def predict(prev_tokens: Sequence[int], p: Mapping[str, Tensor]) -> Tensor:
    """Joint-space embedding of a two-token context (use START before the start)."""
    if len(prev_tokens) != 2:
        raise ShapeError("prediction context is exactly two tokens")
    _check_tokens(prev_tokens, p["prediction.emb0"].shape[0])
    ids0 = np.array([prev_tokens[0]], dtype=np.int64)
    ids1 = np.array([prev_tokens[1]], dtype=np.int64)
    cat = ad.concat([_lookup_padded(p["prediction.emb0"], ids0), _lookup_padded(p["prediction.emb1"], ids1)], axis=1)
    out = ad.add(ad.matmul(cat, p["prediction.proj.w"]), p["prediction.proj.b"])
    return ad.reshape(out, (out.shape[1],))


@dataclass
class HatOutput:
    """Per-lattice-node logits: a scalar blank gate and vocab label logits."""

    blank_logit: Tensor  # [T, U+1]
    label_logits: Tensor  # [T, U+1, V]


def joint_hat(enc: Tensor, pred: Tensor, p: Mapping[str, Tensor]) -> HatOutput:
    if enc.ndim == 1:
        enc = ad.reshape(enc, (1, enc.shape[0]))
    if pred.ndim == 1:
        pred = ad.reshape(pred, (1, pred.shape[0]))
    a = ad.matmul(enc, p["joint.we"])
    b = ad.matmul(pred, p["joint.wp"])
    t, u1 = a.shape[0], b.shape[0]
    hidden = ad.tanh(ad.add(ad.add(ad.expand(a, 1, u1), ad.expand(b, 0, t)), p["joint.b"]))
    out = ad.add(ad.matmul(hidden, p["joint.wout"]), p["joint.bout"])
    v = out.shape[2] - 1
    blank = ad.reshape(ad.slice_axis(out, 2, 0, 1), (t, u1))
    labels = ad.slice_axis(out, 2, 1, 1 + v)
    return HatOutput(blank_logit=blank, label_logits=labels)


def hat_log_probs(hat: HatOutput) -> tuple[Tensor, Tensor]:
    """(log p(blank) [T,U+1], log p(label) [T,U+1,V]); the V+1 probs sum to one."""
    blank_lp = ad.logsigmoid(hat.blank_logit)
    nonblank = ad.logsigmoid(ad.scale(hat.blank_logit, -1.0))
    v = hat.label_logits.shape[2]
    label_lp = ad.add(ad.log_softmax(hat.label_logits), ad.expand(nonblank, 2, v))
    return blank_lp, label_lp


@dataclass
class LossResult:
    neg_log_likelihood: Tensor  # scalar
    alpha: np.ndarray  # [T, U+1] forward log-probabilities, alpha[0,0] == 0


def _log_cumsum_exp(x: np.ndarray) -> np.ndarray:
    return np.logaddexp.accumulate(x)


def _lattice_forward(b: np.ndarray, l: np.ndarray) -> tuple[np.ndarray, float]:
    """Forward pass over the alignment lattice; returns (alpha, log likelihood)."""
    t_len, u1 = b.shape
    lp = np.zeros((t_len, u1))
    lp[:, 1:] = np.cumsum(l, axis=1)  # lp[t, u] = sum of label log-probs 0..u-1 in row t
    alpha = np.empty((t_len, u1))
    alpha[0] = lp[0]
    for t in range(1, t_len):
        entry = alpha[t - 1] + b[t - 1] - lp[t]
        alpha[t] = _log_cumsum_exp(entry) + lp[t]
    return alpha, float(alpha[-1, -1] + b[-1, -1])


def _lattice_backward(b: np.ndarray, l: np.ndarray) -> np.ndarray:
    """beta[t,u] = log prob of finishing from node (t,u)."""
    t_len, u1 = b.shape
    lp = np.zeros((t_len, u1))
    lp[:, 1:] = np.cumsum(l, axis=1)
    beta = np.empty((t_len, u1))
    bottom = np.full(u1, -np.inf)
    bottom[-1] = b[-1, -1]
    beta[-1] = _log_cumsum_exp((bottom + lp[-1])[::-1])[::-1] - lp[-1]
    for t in range(t_len - 2, -1, -1):
        bottom = b[t] + beta[t + 1]
        beta[t] = _log_cumsum_exp((bottom + lp[t])[::-1])[::-1] - lp[t]
    return beta


def transducer_nll_from_logprobs(blank_lp: Tensor, label_lp: Tensor) -> tuple[Tensor, np.ndarray]:
    """Exact negative log marginal over alignments, as one taped primitive.

    ``blank_lp`` is [T, U+1]; ``label_lp`` is [T, U] holding the log-prob of the
    required label at each node. The gradient is the negated edge posterior.
    """
    t_len, u1 = blank_lp.shape
    if label_lp.shape != (t_len, u1 - 1):
        raise ShapeError(f"lattice shapes disagree: {blank_lp.shape} vs {label_lp.shape}")
    b = blank_lp.data.astype(np.float64)
    l = label_lp.data.astype(np.float64)
    alpha, loglik = _lattice_forward(b, l)
    nll = ad.result_tensor(np.asarray(-loglik, dtype=blank_lp.dtype), "transducer-nll")

    def bwd(g):
        beta = _lattice_backward(b, l)
        post_b = np.zeros_like(b)
        if t_len > 1:
            post_b[:-1] = np.exp(alpha[:-1] + b[:-1] + beta[1:] - loglik)
        post_b[-1, -1] = np.exp(alpha[-1, -1] + b[-1, -1] - loglik)
        gb = (-g * post_b).astype(blank_lp.dtype)
        gl = None
        if label_lp.requires_grad:
            post_l = np.exp(alpha[:, :-1] + l + beta[:, 1:] - loglik)
            gl = (-g * post_l).astype(label_lp.dtype)
        return gb, gl

    ad.record(nll, (blank_lp, label_lp), bwd)
    return nll, alpha


def transducer_loss(enc: Tensor, targets: Sequence[int], p: Mapping[str, Tensor]) -> LossResult:
    """Negative log likelihood of ``targets`` under all monotone alignments."""
    t_len = enc.shape[0]
    u = len(targets)
    if t_len == 0:
        if u > 0:
            raise ShapeError("non-empty target with zero frames has no alignment")
        return LossResult(ad.constant(np.zeros((), dtype=ad.default_dtype())), np.zeros((0, 1)))
    pred = prediction_embeddings(targets, p)
    hat = joint_hat(enc, pred, p)
    blank_lp, label_full = hat_log_probs(hat)
    if u > 0:
        v = label_full.shape[2]
        onehot = np.zeros((u, v), dtype=ad.default_dtype())
        onehot[np.arange(u), np.asarray(targets)] = 1.0
        picked = ad.mul(ad.slice_axis(label_full, 1, 0, u), ad.expand(ad.constant(onehot), 0, t_len))
        label_lp = ad.reduce_sum(picked, axis=2)
    else:
        label_lp = ad.constant(np.zeros((t_len, 0), dtype=ad.default_dtype()))
    nll, alpha = transducer_nll_from_logprobs(blank_lp, label_lp)
    return LossResult(nll, alpha)


def alignment_count(t_len: int, u: int) -> int:
    """Number of valid complete alignments (every path ends with a blank)."""
    if t_len == 0:
        return 1 if u == 0 else 0
    return math.comb(t_len + u - 1, u)


def loss_bruteforce(enc: Tensor, targets: Sequence[int], p: Mapping[str, Tensor]) -> float:
    """Enumerate every interleaving of labels and blanks; float64 throughout.

    Shares no code with the lattice recursion or the taped primitives: the
    network math is re-derived with plain numpy expressions here.
    """
    from itertools import combinations

    t_len = enc.shape[0]
    u = len(targets)
    if math.comb(t_len + u, u) > 10_000:
        raise ValueError("instance too large for brute-force enumeration")
    if t_len == 0:
        if u > 0:
            raise ShapeError("non-empty target with zero frames has no alignment")
        return 0.0
    w = {k: np.asarray(v.data, dtype=np.float64) for k, v in p.items()}
    e = np.asarray(enc.data, dtype=np.float64)
    zeros = np.zeros(w["prediction.emb0"].shape[1])
    blp = np.empty((t_len, u + 1))
    llp = np.empty((t_len, u))
    for uu in range(u + 1):
        c0 = w["prediction.emb0"][targets[uu - 2]] if uu >= 2 else zeros
        c1 = w["prediction.emb1"][targets[uu - 1]] if uu >= 1 else zeros
        pv = np.concatenate([c0, c1]) @ w["prediction.proj.w"] + w["prediction.proj.b"]
        for tt in range(t_len):
            h = np.tanh(e[tt] @ w["joint.we"] + pv @ w["joint.wp"] + w["joint.b"])
            o = h @ w["joint.wout"] + w["joint.bout"]
            lsm = o[1:] - (np.log(np.sum(np.exp(o[1:] - o[1:].max()))) + o[1:].max())
            blp[tt, uu] = -np.logaddexp(0.0, -o[0])
            if uu < u:
                llp[tt, uu] = -np.logaddexp(0.0, o[0]) + lsm[targets[uu]]
    path_lps = []
    for label_slots in combinations(range(t_len + u - 1), u):
        tt = uu = 0
        lp = 0.0
        for move in range(t_len + u - 1):
            if uu < u and move == label_slots[uu]:
                lp += llp[tt, uu]
                uu += 1
            else:
                lp += blp[tt, uu]
                tt += 1
        lp += blp[t_len - 1, u]
        path_lps.append(lp)
    assert len(path_lps) == alignment_count(t_len, u)
    m = max(path_lps)
    return float(-(m + np.log(np.sum(np.exp(np.asarray(path_lps) - m)))))


def greedy_decode(enc, p: Mapping[str, Tensor], max_symbols_per_frame: int = 4) -> list[int]:
    """Frame-synchronous greedy search; advances on blank, caps emissions per frame."""
    w = {k: v.data for k, v in p.items()}
    e = np.asarray(enc.data if isinstance(enc, Tensor) else enc)
    t_len = e.shape[0]
    if t_len == 0:
        return []
    enc_proj = e @ w["joint.we"]
    emb0, emb1 = w["prediction.emb0"], w["prediction.emb1"]
    zeros = np.zeros(emb0.shape[1], dtype=emb0.dtype)
    proj_w, proj_b = w["prediction.proj.w"], w["prediction.proj.b"]

    def pred_vec(prev):
        c0 = emb0[prev[0]] if prev[0] >= 0 else zeros
        c1 = emb1[prev[1]] if prev[1] >= 0 else zeros
        return np.concatenate([c0, c1]) @ proj_w + proj_b

    prev = (START, START)
    pv = pred_vec(prev) @ w["joint.wp"]
    hyp: list[int] = []
    t = emitted = 0
    while t < t_len:
        h = np.tanh(enc_proj[t] + pv + w["joint.b"])
        o = h @ w["joint.wout"] + w["joint.bout"]
        blank_logit, label_logits = o[0], o[1:]
        best = int(np.argmax(label_logits))
        log_blank = -np.logaddexp(0.0, -blank_logit)
        z = label_logits - label_logits.max()
        log_best = -np.logaddexp(0.0, blank_logit) + z[best] - np.log(np.exp(z).sum())
        if log_blank >= log_best or emitted >= max_symbols_per_frame:
            t += 1
            emitted = 0
        else:
            hyp.append(best)
            prev = (prev[1], best)
            pv = pred_vec(prev) @ w["joint.wp"]
            emitted += 1
    return hyp


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    insertions: int
    deletions: int
    rate: float

    @property
    def total(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> EditCounts:
    """Levenshtein alignment with unit costs; rate normalized by max(1, |ref|)."""
    r, h = list(reference), list(hypothesis)
    nr, nh = len(r), len(h)
    dist = np.zeros((nr + 1, nh + 1), dtype=np.int64)
    dist[:, 0] = np.arange(nr + 1)
    dist[0, :] = np.arange(nh + 1)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            sub = dist[i - 1, j - 1] + (r[i - 1] != h[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    i, j = nr, nh
    subs = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            subs += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(subs), int(ins), int(dels), (subs + ins + dels) / max(1, nr))
