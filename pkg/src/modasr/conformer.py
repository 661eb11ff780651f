"""Streaming Conformer encoder: a causal stack cascaded into a non-causal stack.

Each block runs ffn_start -> (mhsa) -> conv -> ffn_end with residual
connections and a final layer norm. The causal stack sees no future frames;
the non-causal stack gets a per-block right-context budget for attention and
convolution. Parameter shapes are enumerated by a single plan that backs both
initialization and exact parameter counting, so the two can never drift.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int
    causal_blocks: int
    noncausal_blocks: int
    d_causal: int
    d_noncausal: int
    joint_projection_dim: int
    ffn_multiplier: int = 4
    num_heads: int = 4
    conv_kernel: int = 7
    mhsa_skip_first_n: int = 0
    right_context_frames: int = 0
    relative_position_causal: bool = False
    relative_position_noncausal: bool = True
    half_step_ffn: bool = False

    def __post_init__(self):
        for d, heads in ((self.d_causal, self.num_heads), (self.d_noncausal, self.num_heads)):
            if d % heads:
                raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd and positive")
        if self.right_context_frames < 0 or self.mhsa_skip_first_n < 0:
            raise ConfigError("context/skip counts must be non-negative")

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown encoder config fields: {sorted(extra)}")
        return cls(**obj)


@dataclass(frozen=True)
class ContextSpec:
    """Frames visible around each position: left=None means unbounded history."""

    left: int | None
    right: int


STACKS = ("causal", "noncausal")
MODULE_SITES = ("ffn_start", "mhsa", "conv", "ffn_end")


def _ffn_shapes(d: int, mult: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln.scale": (d,),
        "ln.bias": (d,),
        "w1": (d, mult * d),
        "b1": (mult * d,),
        "w2": (mult * d, d),
        "b2": (d,),
    }


def _mhsa_shapes(d: int, relative: bool) -> dict[str, tuple[int, ...]]:
    shapes = {
        "ln.scale": (d,),
        "ln.bias": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "bo": (d,),
    }
    if relative:
        shapes.update({"wp": (d, d), "u": (d,), "v": (d,)})
    return shapes


def _conv_shapes(d: int, kernel: int) -> dict[str, tuple[int, ...]]:
    return {
        "ln.scale": (d,),
        "ln.bias": (d,),
        "pw1.w": (d, 2 * d),
        "pw1.b": (2 * d,),
        "dw.w": (kernel, d),
        "dw.b": (d,),
        "norm.scale": (d,),
        "norm.bias": (d,),
        "pw2.w": (d, d),
        "pw2.b": (d,),
    }


@dataclass(frozen=True)
class StackSpec:
    name: str
    d: int
    blocks: int
    mult: int
    heads: int
    kernel: int
    relative: bool
    mhsa_from: int  # first block index that has an MHSA module
    attn_right: int
    conv_left: int
    conv_right: int


def stack_spec(cfg: EncoderConfig, stack: str) -> StackSpec:
    if stack == "causal":
        rb = 0
        d, blocks, mhsa_from, rel = cfg.d_causal, cfg.causal_blocks, cfg.mhsa_skip_first_n, cfg.relative_position_causal
    elif stack == "noncausal":
        rb = cfg.right_context_frames // cfg.noncausal_blocks if cfg.noncausal_blocks else 0
        d, blocks, mhsa_from, rel = cfg.d_noncausal, cfg.noncausal_blocks, 0, cfg.relative_position_noncausal
    else:
        raise ConfigError(f"unknown stack '{stack}'")
    conv_right = min((cfg.conv_kernel - 1) // 2, rb)
    return StackSpec(
        name=stack,
        d=d,
        blocks=blocks,
        mult=cfg.ffn_multiplier,
        heads=cfg.num_heads,
        kernel=cfg.conv_kernel,
        relative=rel,
        mhsa_from=mhsa_from,
        attn_right=rb,
        conv_left=cfg.conv_kernel - 1 - conv_right,
        conv_right=conv_right,
    )


def block_has_mhsa(cfg: EncoderConfig, stack: str, k: int) -> bool:
    return k >= stack_spec(cfg, stack).mhsa_from


def total_right_context(cfg: EncoderConfig, stack: str) -> int:
    """Frames beyond t that can influence the stack's output at frame t."""
    sp = stack_spec(cfg, stack)
    return sp.blocks * (sp.attn_right + sp.conv_right)


def encoder_shapes(cfg: EncoderConfig, stack: str) -> Iterator[tuple[str, tuple[int, ...]]]:
    sp = stack_spec(cfg, stack)
    if stack == "causal":
        yield "causal.in_proj.w", (cfg.feature_dim, sp.d)
    else:
        yield "noncausal.in_proj.w", (cfg.d_causal, sp.d)
    yield f"{stack}.in_proj.b", (sp.d,)
    for k in range(sp.blocks):
        base = f"{stack}.block{k}"
        for leaf, shape in _ffn_shapes(sp.d, sp.mult).items():
            yield f"{base}.ffn_start.{leaf}", shape
        if k >= sp.mhsa_from:
            for leaf, shape in _mhsa_shapes(sp.d, sp.relative).items():
                yield f"{base}.mhsa.{leaf}", shape
        for leaf, shape in _conv_shapes(sp.d, sp.kernel).items():
            yield f"{base}.conv.{leaf}", shape
        for leaf, shape in _ffn_shapes(sp.d, sp.mult).items():
            yield f"{base}.ffn_end.{leaf}", shape
        yield f"{base}.final_ln.scale", (sp.d,)
        yield f"{base}.final_ln.bias", (sp.d,)
    yield f"{stack}.out_proj.w", (sp.d, cfg.joint_projection_dim)
    yield f"{stack}.out_proj.b", (cfg.joint_projection_dim,)


def all_encoder_shapes(cfg: EncoderConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    yield from encoder_shapes(cfg, "causal")
    yield from encoder_shapes(cfg, "noncausal")


def init_array(rng: np.random.Generator, key: str, shape: tuple[int, ...]) -> np.ndarray:
    """Init policy: Xavier-uniform matrices, unit norm gains, zero everything else."""
    leaf = key.rsplit(".", 1)[-1]
    if leaf == "scale" or key.endswith("ln.scale"):
        return np.ones(shape, dtype=ad.default_dtype())
    if key.endswith("dw.w"):
        k = shape[0]
        return ad.xavier_uniform(rng, shape, fan=(k, k))
    if len(shape) == 2:
        return ad.xavier_uniform(rng, shape)
    return np.zeros(shape, dtype=ad.default_dtype())


def count_params(cfg: EncoderConfig, selector: str, stack: str | None = None) -> int:
    """Exact scalar-parameter count of the selected encoder components.

    Module selectors (ffn_start/mhsa/conv/ffn_end) sum that module across all
    blocks of ``stack``; ``block-K`` counts one block; ``encoder`` (or ``all``
    with a stack) counts the stack including its projections; ``all`` without a
    stack counts both stacks.
    """
    if selector == "all" and stack is None:
        return count_params(cfg, "encoder", "causal") + count_params(cfg, "encoder", "noncausal")
    if stack not in STACKS:
        raise ConfigError(f"selector '{selector}' requires stack in {STACKS}, got {stack!r}")
    keys = list(encoder_shapes(cfg, stack))
    if selector in ("encoder", "all"):
        pred: Callable[[str], bool] = lambda key: True
    elif selector in MODULE_SITES:
        pred = lambda key: f".{selector}." in key
    elif selector.startswith("block-"):
        try:
            k = int(selector.split("-", 1)[1])
        except ValueError:
            raise ConfigError(f"bad block selector '{selector}'") from None
        sp = stack_spec(cfg, stack)
        if not 0 <= k < sp.blocks:
            raise ConfigError(f"block index {k} out of range for {stack}")
        pred = lambda key: f".block{k}." in key
    else:
        raise ConfigError(f"unknown selector '{selector}'")
    return sum(int(np.prod(shape)) for key, shape in keys if pred(key))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


class PlainView:
    """Parameter view with no overrides and no adapters."""

    def __init__(self, params: Mapping[str, Tensor]):
        self._params = params

    def get(self, key: str) -> Tensor:
        return self._params[key]

    def run_site(self, path: str, x: Tensor, branch: Callable[[Tensor], Tensor]) -> Tensor:
        return ad.add(x, branch(x))


def _leaves(view, path: str, names) -> dict[str, Tensor]:
    return {name: view.get(f"{path}.{name}") for name in names}


def sinusoid_positions(positions: np.ndarray, d: int) -> np.ndarray:
    """Interleaved sin/cos embedding of (possibly negative) integer positions."""
    if d % 2:
        raise ShapeError("sinusoid embedding needs an even dimension")
    inv = 1.0 / (10000.0 ** (np.arange(0, d, 2) / d))
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    out = np.empty((len(positions), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@lru_cache(maxsize=512)
def _abs_position_table(T: int, d: int, dtype: str) -> np.ndarray:
    out = sinusoid_positions(np.arange(T), d).astype(dtype)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=512)
def _rel_position_table(T: int, d: int, dtype: str) -> np.ndarray:
    out = sinusoid_positions(np.arange(T - 1, -T, -1), d).astype(dtype)
    out.flags.writeable = False
    return out


@lru_cache(maxsize=512)
def _window_mask(T: int, left: int | None, right: int) -> np.ndarray:
    t = np.arange(T)[:, None]
    s = np.arange(T)[None, :]
    banned = s > t + right
    if left is not None:
        banned |= s < t - left
    banned.flags.writeable = False
    return banned


def ffn_branch(x: Tensor, p: Mapping[str, Tensor], half_step: bool = False) -> Tensor:
    h = ad.layer_norm(x, p["ln.scale"], p["ln.bias"])
    h = ad.swish(ad.add(ad.matmul(h, p["w1"]), p["b1"]))
    h = ad.add(ad.matmul(h, p["w2"]), p["b2"])
    return ad.scale(h, 0.5) if half_step else h


def _rel_shift(bd: Tensor, lead: int, T: int) -> Tensor:
    """Align [lead, T, 2T-1] offset-indexed logits so position s reads offset t-s."""
    zeros = ad.constant(np.zeros((lead, T, 1), dtype=bd.dtype))
    padded = ad.concat([zeros, bd], axis=2)            # [lead, T, 2T]
    folded = ad.reshape(padded, (lead, 2 * T, T))
    trimmed = ad.slice_axis(folded, 1, 1, 2 * T)       # [lead, 2T-1, T]
    restored = ad.reshape(trimmed, (lead, T, 2 * T - 1))
    return ad.slice_axis(restored, 2, 0, T)


def mhsa_branch(
    x: Tensor,
    p: Mapping[str, Tensor],
    heads: int,
    ctx: ContextSpec,
    relative: bool,
    key_pad: np.ndarray | None = None,
) -> Tensor:
    """Windowed multi-head attention on [T, d] or [B, T, d] inputs.

    ``key_pad`` [B, T] marks padding frames that must never be attended to.
    """
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    dh = d // heads
    h = ad.layer_norm(x, p["ln.scale"], p["ln.bias"])
    q = ad.matmul(h, p["wq"])
    k = ad.matmul(h, p["wk"])
    v = ad.matmul(h, p["wv"])

    def heads_first(t: Tensor) -> Tensor:
        return ad.reshape(ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3)), (B * heads, T, dh))

    qc = ad.add(q, p["u"]) if relative else q
    scores = ad.matmul(heads_first(qc), ad.transpose(heads_first(k), (0, 2, 1)))
    if relative:
        pos = ad.constant(_rel_position_table(T, d, x.dtype.name))
        r = ad.matmul(pos, p["wp"])  # [2T-1, d]
        rh = ad.transpose(ad.reshape(r, (2 * T - 1, heads, dh)), (1, 2, 0))
        rhb = ad.reshape(ad.expand(rh, 0, B), (B * heads, dh, 2 * T - 1))
        qp = heads_first(ad.add(q, p["v"]))
        scores = ad.add(scores, _rel_shift(ad.matmul(qp, rhb), B * heads, T))
    scores = ad.scale(scores, 1.0 / math.sqrt(dh))
    banned = _window_mask(T, ctx.left, ctx.right)
    if key_pad is not None and key_pad.any():
        mask = np.repeat(banned[None, :, :] | key_pad[:, None, :], heads, axis=0)
        scores = ad.masked_fill(scores, mask)
    elif banned.any():
        scores = ad.masked_fill(scores, banned[None, :, :])
    att = ad.softmax(scores)
    out = ad.matmul(att, heads_first(v))  # [B*heads, T, dh]
    out = ad.reshape(ad.transpose(ad.reshape(out, (B, heads, T, dh)), (0, 2, 1, 3)), (B, T, d))
    out = ad.add(ad.matmul(out, p["wo"]), p["bo"])
    return ad.reshape(out, (T, d)) if single else out


def conv_branch(
    x: Tensor,
    p: Mapping[str, Tensor],
    left: int,
    right: int,
    pad_rows: np.ndarray | None = None,
) -> Tensor:
    """Pointwise/GLU -> depthwise -> pointwise; ``pad_rows`` [B, T] zeroes
    padding frames so the depthwise window reads them as true zeros."""
    h = ad.layer_norm(x, p["ln.scale"], p["ln.bias"])
    h = ad.glu(ad.add(ad.matmul(h, p["pw1.w"]), p["pw1.b"]))
    if pad_rows is not None and pad_rows.any():
        h = ad.masked_fill(h, pad_rows[:, :, None], 0.0)
    h = ad.add(ad.depthwise_conv1d(h, p["dw.w"], left, right), p["dw.b"])
    h = ad.layer_norm(h, p["norm.scale"], p["norm.bias"])
    h = ad.swish(h)
    return ad.add(ad.matmul(h, p["pw2.w"]), p["pw2.b"])


FFN_LEAVES = tuple(_ffn_shapes(1, 1))
CONV_LEAVES = tuple(_conv_shapes(1, 1))


def _mhsa_leaves(relative: bool) -> tuple[str, ...]:
    return tuple(_mhsa_shapes(1, relative))


def conformer_block(
    x: Tensor,
    view,
    path: str,
    sp: StackSpec,
    k: int,
    half_step: bool = False,
    pad_rows: np.ndarray | None = None,
) -> Tensor:
    ctx = ContextSpec(left=None, right=sp.attn_right)
    x = view.run_site(f"{path}.ffn_start", x, lambda t: ffn_branch(t, _leaves(view, f"{path}.ffn_start", FFN_LEAVES), half_step))
    if k >= sp.mhsa_from:
        x = view.run_site(
            f"{path}.mhsa",
            x,
            lambda t: mhsa_branch(t, _leaves(view, f"{path}.mhsa", _mhsa_leaves(sp.relative)), sp.heads, ctx, sp.relative, pad_rows),
        )
    x = view.run_site(
        f"{path}.conv",
        x,
        lambda t: conv_branch(t, _leaves(view, f"{path}.conv", CONV_LEAVES), sp.conv_left, sp.conv_right, pad_rows),
    )
    x = view.run_site(f"{path}.ffn_end", x, lambda t: ffn_branch(t, _leaves(view, f"{path}.ffn_end", FFN_LEAVES), half_step))
    return ad.layer_norm(x, view.get(f"{path}.final_ln.scale"), view.get(f"{path}.final_ln.bias"))


def _run_stack(h: Tensor, view, cfg: EncoderConfig, stack: str, pad_rows: np.ndarray | None) -> Tensor:
    sp = stack_spec(cfg, stack)
    T = h.shape[-2]
    if not sp.relative:
        h = ad.add(h, ad.constant(_abs_position_table(T, sp.d, h.dtype.name)))
    for k in range(sp.blocks):
        h = conformer_block(h, view, f"{stack}.block{k}", sp, k, cfg.half_step_ffn, pad_rows)
    return h


def _encode_core(x: Tensor, view, cfg: EncoderConfig, stacks: str, pad_rows: np.ndarray | None):
    h = ad.add(ad.matmul(x, view.get("causal.in_proj.w")), view.get("causal.in_proj.b"))
    h = _run_stack(h, view, cfg, "causal", pad_rows)
    causal_out = ad.add(ad.matmul(h, view.get("causal.out_proj.w")), view.get("causal.out_proj.b"))
    if stacks == "causal":
        return causal_out, None
    g = ad.add(ad.matmul(h, view.get("noncausal.in_proj.w")), view.get("noncausal.in_proj.b"))
    g = _run_stack(g, view, cfg, "noncausal", pad_rows)
    noncausal_out = ad.add(ad.matmul(g, view.get("noncausal.out_proj.w")), view.get("noncausal.out_proj.b"))
    return causal_out, noncausal_out


def encode(features, view, cfg: EncoderConfig, stacks: str = "both") -> tuple[Tensor, Tensor | None]:
    """Encode one utterance; returns (causal_out, noncausal_out), each [T, joint_projection_dim]."""
    x = features if isinstance(features, Tensor) else ad.constant(np.asarray(features, dtype=ad.default_dtype()))
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise ShapeError(f"encode: features {x.shape} vs feature_dim {cfg.feature_dim}")
    T = x.shape[0]
    if T == 0:
        empty = ad.constant(np.zeros((0, cfg.joint_projection_dim), dtype=ad.default_dtype()))
        return empty, (None if stacks == "causal" else empty)
    xb = ad.reshape(x, (1, T, cfg.feature_dim))
    c, n = _encode_core(xb, view, cfg, stacks, None)
    c = ad.reshape(c, (T, cfg.joint_projection_dim))
    if n is not None:
        n = ad.reshape(n, (T, cfg.joint_projection_dim))
    return c, n


def encode_batch(features: Sequence, view, cfg: EncoderConfig, stacks: str = "both"):
    """Encode several utterances as one padded batch.

    Returns (causal_outs, noncausal_outs) as per-utterance lists of
    [T_i, joint_projection_dim] tensors; padding frames are masked out of
    attention and zeroed ahead of every depthwise convolution, so results
    agree with one-at-a-time encoding up to float reassociation.
    """
    arrays = [
        f.data if isinstance(f, Tensor) else np.asarray(f, dtype=ad.default_dtype())
        for f in features
    ]
    if not arrays:
        return [], []
    lengths = [a.shape[0] for a in arrays]
    if min(lengths) == 0:
        raise ShapeError("encode_batch requires non-empty utterances")
    b, t_max = len(arrays), max(lengths)
    batch = np.zeros((b, t_max, cfg.feature_dim), dtype=ad.default_dtype())
    for i, a in enumerate(arrays):
        if a.shape[1] != cfg.feature_dim:
            raise ShapeError(f"encode_batch: features {a.shape} vs feature_dim {cfg.feature_dim}")
        batch[i, : a.shape[0]] = a
    pad_rows = np.arange(t_max)[None, :] >= np.asarray(lengths)[:, None]
    if not pad_rows.any():
        pad_rows = None
    c, n = _encode_core(ad.constant(batch), view, cfg, stacks, pad_rows)

    def per_utterance(out: Tensor | None):
        if out is None:
            return None
        rows = []
        for i, t_i in enumerate(lengths):
            row = ad.reshape(ad.slice_axis(out, 0, i, i + 1), (t_max, cfg.joint_projection_dim))
            rows.append(ad.slice_axis(row, 0, 0, t_i) if t_i < t_max else row)
        return rows

    return per_utterance(c), per_utterance(n)


def desk_preset() -> EncoderConfig:
    return EncoderConfig(
        feature_dim=16,
        causal_blocks=3,
        noncausal_blocks=4,
        d_causal=64,
        d_noncausal=80,
        joint_projection_dim=48,
        ffn_multiplier=4,
        num_heads=4,
        conv_kernel=7,
        mhsa_skip_first_n=1,
        right_context_frames=8,
    )


def paper_preset() -> EncoderConfig:
    return EncoderConfig(
        feature_dim=128,
        causal_blocks=7,
        noncausal_blocks=10,
        d_causal=512,
        d_noncausal=640,
        joint_projection_dim=384,
        ffn_multiplier=4,
        num_heads=8,
        conv_kernel=15,
        mhsa_skip_first_n=2,
        right_context_frames=24,
    )
