"""Per-domain routing over a frozen backbone.

A model owns one set of backbone parameters plus any number of registered
domains. Each domain carries a plan: component overrides (fresh parameters
that shadow a module, block, stack or decoder part) and bottleneck adapters
attached to encoder module sites, either sequentially (rewriting the stream
after a module) or in parallel (reading the module's residual input and adding
alongside its contribution). Every parameter belongs to exactly one owner, so
domains can be added, retrained or removed without disturbing each other.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from . import conformer as cf
from . import transducer as td
from .autodiff import Tensor
from .errors import (
    ConfigError,
    DuplicateDomainError,
    InvalidPathError,
    SiteConflictError,
    UnknownDomainError,
)

ADAPTER_LEAVES = ("w_down", "b_down", "w_up", "b_up")
ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "swish": ad.swish,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda t: t,
}


@dataclass(frozen=True)
class ModelConfig:
    encoder: cf.EncoderConfig
    decoder: td.DecoderConfig
    num_onehot: int = 0  # trailing feature columns reserved for a domain one-hot

    def __post_init__(self):
        if self.num_onehot < 0 or self.num_onehot >= self.encoder.feature_dim:
            raise ConfigError("num_onehot must leave room for acoustic features")

    def to_json(self) -> dict:
        return {
            "encoder": self.encoder.to_json(),
            "decoder": self.decoder.to_json(),
            "num_onehot": self.num_onehot,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        return cls(
            encoder=cf.EncoderConfig.from_json(obj["encoder"]),
            decoder=td.DecoderConfig.from_json(obj["decoder"]),
            num_onehot=obj.get("num_onehot", 0),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(source: str | Path) -> ModelConfig:
    """Load a model config from a preset name ('desk'/'paper') or a JSON file."""
    name = str(source)
    if name in ("desk", "paper"):
        text = resources.files("modasr.presets").joinpath(f"{name}.json").read_text()
    else:
        text = Path(source).read_text()
    return ModelConfig.from_json(json.loads(text))


@dataclass(frozen=True)
class AdapterSpec:
    mode: str  # sequential | parallel
    sites: tuple[str, ...]
    bottleneck_dim: int
    activation: str = "swish"

    def __post_init__(self):
        if self.mode not in ("sequential", "parallel"):
            raise ConfigError(f"unknown adapter mode '{self.mode}'")
        if self.bottleneck_dim < 1:
            raise ConfigError("bottleneck_dim must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown adapter activation '{self.activation}'")

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "sites": list(self.sites),
            "bottleneck_dim": self.bottleneck_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "AdapterSpec":
        return cls(
            mode=obj["mode"],
            sites=tuple(obj["sites"]),
            bottleneck_dim=int(obj["bottleneck_dim"]),
            activation=obj.get("activation", "swish"),
        )


@dataclass(frozen=True)
class DomainPlan:
    domain: str
    overrides: tuple[str, ...] = ()
    adapters: tuple[AdapterSpec, ...] = ()
    init_seed: int = 0

    def is_empty(self) -> bool:
        return not self.overrides and not self.adapters

    def to_json(self) -> dict:
        return {
            "domain": self.domain,
            "overrides": list(self.overrides),
            "adapters": [a.to_json() for a in self.adapters],
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DomainPlan":
        return cls(
            domain=obj["domain"],
            overrides=tuple(obj.get("overrides", ())),
            adapters=tuple(AdapterSpec.from_json(a) for a in obj.get("adapters", ())),
            init_seed=int(obj.get("init_seed", 0)),
        )


def model_shapes(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    yield from cf.all_encoder_shapes(config.encoder)
    for stack in td.DECODER_STACKS:
        for key, shape in td.decoder_shapes(config.decoder, config.encoder.joint_projection_dim):
            yield f"{stack}.{key}", shape


def count_model_params(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in model_shapes(config))


def module_paths(config: ModelConfig) -> frozenset[str]:
    """All addresses that can be overridden for a domain."""
    paths: set[str] = set()
    for stack in cf.STACKS:
        paths.add(stack)
        sp = cf.stack_spec(config.encoder, stack)
        for k in range(sp.blocks):
            base = f"{stack}.block{k}"
            paths.add(base)
            paths.add(f"{base}.ffn_start")
            if k >= sp.mhsa_from:
                paths.add(f"{base}.mhsa")
            paths.add(f"{base}.conv")
            paths.add(f"{base}.ffn_end")
    for stack in td.DECODER_STACKS:
        paths.update((stack, f"{stack}.prediction", f"{stack}.joint"))
    return frozenset(paths)


def adapter_sites(config: ModelConfig) -> frozenset[str]:
    """Encoder module sites where a bottleneck adapter can attach."""
    return frozenset(p for p in module_paths(config) if p.count(".") == 2)


def _covered(path: str, roots) -> bool:
    return any(path == r or path.startswith(r + ".") for r in roots)


@dataclass
class DomainState:
    domain_id: int
    name: str
    plan: DomainPlan
    params: dict[str, np.ndarray] = field(default_factory=dict)
    adapter_index: dict[str, tuple[str, str]] = field(default_factory=dict)  # site -> (mode, activation)


class Model:
    """Backbone parameters plus registered domains; domain id 0 is the backbone's."""

    def __init__(self, config: ModelConfig, backbone: dict[str, np.ndarray], backbone_domain: str = "backbone"):
        expected = dict(model_shapes(config))
        if set(backbone) != set(expected):
            missing = sorted(set(expected) - set(backbone))[:3]
            raise ConfigError(f"backbone parameter set does not match config (missing e.g. {missing})")
        self.config = config
        self.backbone = backbone
        self.domains: dict[str, DomainState] = {
            backbone_domain: DomainState(0, backbone_domain, DomainPlan(domain=backbone_domain))
        }

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, backbone_domain: str = "backbone") -> "Model":
        rng = np.random.default_rng(seed)
        backbone = {key: cf.init_array(rng, key, shape) for key, shape in model_shapes(config)}
        return cls(config, backbone, backbone_domain)

    @property
    def backbone_domain(self) -> str:
        return next(name for name, st in self.domains.items() if st.domain_id == 0)

    def domain_state(self, domain: str | int) -> DomainState:
        if isinstance(domain, int):
            for st in self.domains.values():
                if st.domain_id == domain:
                    return st
            raise UnknownDomainError(f"no domain with id {domain}")
        try:
            return self.domains[domain]
        except KeyError:
            raise UnknownDomainError(f"domain '{domain}' is not registered") from None


def register_domain(model: Model, plan: DomainPlan) -> int:
    """Allocate per-domain parameters for ``plan`` and attach them to the model.

    Overrides are freshly initialized; adapter down-projections are initialized
    like any weight matrix while up-projections start at zero, so a new domain
    routes exactly like the backbone until trained.
    """
    if plan.domain in model.domains:
        raise DuplicateDomainError(f"domain '{plan.domain}' already registered")
    valid_paths = module_paths(model.config)
    valid_sites = adapter_sites(model.config)
    for path in plan.overrides:
        if path not in valid_paths:
            raise InvalidPathError(f"override path '{path}' does not resolve")
    for i, root in enumerate(plan.overrides):
        for other in plan.overrides[i + 1:]:
            if _covered(root, [other]) or _covered(other, [root]):
                raise SiteConflictError(f"nested override paths '{root}' and '{other}'")
    seen_sites: set[str] = set()
    for spec in plan.adapters:
        for site in spec.sites:
            if site not in valid_sites:
                raise InvalidPathError(f"adapter site '{site}' is not an encoder module")
            if site in seen_sites:
                raise SiteConflictError(f"two adapters on site '{site}'")
            if _covered(site, plan.overrides):
                raise SiteConflictError(f"adapter site '{site}' lies inside an override")
            seen_sites.add(site)

    rng = np.random.default_rng(plan.init_seed)
    params: dict[str, np.ndarray] = {}
    for key, shape in model_shapes(model.config):
        if _covered(key, plan.overrides):
            params[key] = cf.init_array(rng, key, shape)
    adapter_index: dict[str, tuple[str, str]] = {}
    for spec in plan.adapters:
        for site in spec.sites:
            d = model.config.encoder.d_causal if site.startswith("causal") else model.config.encoder.d_noncausal
            b = spec.bottleneck_dim
            params[f"adapter.{site}.w_down"] = ad.xavier_uniform(rng, (d, b))
            params[f"adapter.{site}.b_down"] = np.zeros(b, dtype=ad.default_dtype())
            params[f"adapter.{site}.w_up"] = np.zeros((b, d), dtype=ad.default_dtype())
            params[f"adapter.{site}.b_up"] = np.zeros(d, dtype=ad.default_dtype())
            adapter_index[site] = (spec.mode, spec.activation)

    domain_id = 1 + max(st.domain_id for st in model.domains.values())
    model.domains[plan.domain] = DomainState(domain_id, plan.domain, plan, params, adapter_index)
    return domain_id


def remove_domain(model: Model, domain: str) -> None:
    st = model.domain_state(domain)
    if st.domain_id == 0:
        raise UnknownDomainError("the backbone domain cannot be removed")
    del model.domains[st.name]


def resolve(model: Model, path: str, domain: str | int) -> str:
    """Parameter source for ``path`` under ``domain``: 'domain-override' or 'backbone'."""
    st = model.domain_state(domain)
    known = module_paths(model.config)
    if path not in known and not any(path.startswith(p + ".") for p in known):
        raise InvalidPathError(f"path '{path}' does not resolve")
    return "domain-override" if _covered(path, st.plan.overrides) else "backbone"


def trainable_mask(model: Model, domain: str | int) -> frozenset[str]:
    """Exactly the keys owned by ``domain``; empty for the backbone domain."""
    return frozenset(model.domain_state(domain).params)


def backbone_keys(model: Model) -> frozenset[str]:
    return frozenset(model.backbone)


def trainable_scalar_count(model: Model, domain: str | int) -> int:
    st = model.domain_state(domain)
    return sum(a.size for a in st.params.values())


def _adapter_contribution(x: Tensor, p: Mapping[str, Tensor], activation: str) -> Tensor:
    z = ACTIVATIONS[activation](ad.add(ad.matmul(x, p["w_down"]), p["b_down"]))
    return ad.add(ad.matmul(z, p["w_up"]), p["b_up"])


def apply_adapter(h: Tensor, params: Mapping[str, Tensor], mode: str = "sequential", activation: str = "swish") -> Tensor:
    """Bottleneck residual update h <- h + f(h W_down + b) W_up + b.

    The formula is shared by both modes; placement differs at the call site
    (sequential rewrites a module's output stream, parallel reads the module's
    residual input and its result is added next to the module's contribution).
    """
    if mode not in ("sequential", "parallel"):
        raise ConfigError(f"unknown adapter mode '{mode}'")
    return ad.add(h, _adapter_contribution(h, params, activation))


class DomainView:
    """Parameter view that shadows backbone keys with a domain's overrides and
    interposes the domain's adapters at their sites."""

    def __init__(self, backbone_t: Mapping[str, Tensor], domain_t: Mapping[str, Tensor], adapter_index: Mapping[str, tuple[str, str]]):
        self._backbone = backbone_t
        self._domain = domain_t
        self._adapters = adapter_index

    def get(self, key: str) -> Tensor:
        hit = self._domain.get(key)
        return hit if hit is not None else self._backbone[key]

    def run_site(self, path: str, x: Tensor, branch: Callable[[Tensor], Tensor]) -> Tensor:
        y = ad.add(x, branch(x))
        info = self._adapters.get(path)
        if info is not None:
            mode, activation = info
            p = {leaf: self._domain[f"adapter.{path}.{leaf}"] for leaf in ADAPTER_LEAVES}
            src = x if mode == "parallel" else y
            y = ad.add(y, _adapter_contribution(src, p, activation))
        return y

    def decoder_params(self, stack: str) -> dict[str, Tensor]:
        if stack not in ("causal", "noncausal"):
            raise ConfigError(f"decoder stack must be causal/noncausal, got '{stack}'")
        prefix = f"decoder_{stack}."
        return {key[len(prefix):]: self.get(key) for key in self._backbone if key.startswith(prefix)}


def make_view(model: Model, domain: str | int, trainable: frozenset[str] = frozenset()) -> DomainView:
    """Wrap parameters as tensors; ``trainable`` marks keys of the owning side.

    For the backbone domain the trainable set refers to backbone keys; for any
    other domain it may only name that domain's keys, which keeps the backbone
    frozen during per-domain training by construction.
    """
    st = model.domain_state(domain)
    if trainable:
        owner = set(model.backbone) if st.domain_id == 0 else set(st.params)
        stray = set(trainable) - owner
        if stray:
            raise ConfigError(f"trainable keys not owned by '{st.name}': {sorted(stray)[:3]}")
    backbone_t = {
        key: ad.Tensor(arr, requires_grad=(st.domain_id == 0 and key in trainable))
        for key, arr in model.backbone.items()
    }
    domain_t = {
        key: ad.Tensor(arr, requires_grad=key in trainable)
        for key, arr in st.params.items()
    }
    return DomainView(backbone_t, domain_t, st.adapter_index)


def forward_with_domain(model: Model, features, domain: str | int) -> tuple[Tensor, Tensor, DomainView]:
    """Encode ``features`` routed through ``domain``; returns both encoder
    outputs plus the view for resolving the matching decoders."""
    view = make_view(model, domain)
    causal_out, noncausal_out = cf.encode(features, view, model.config.encoder)
    return causal_out, noncausal_out, view


def training_view(model: Model, domain: str | int, mask: frozenset[str]) -> tuple[DomainView, dict[str, Tensor], dict[str, np.ndarray]]:
    """View plus (tensor handles, raw arrays) for the trainable side of ``domain``."""
    view = make_view(model, domain, trainable=mask)
    st = model.domain_state(domain)
    if st.domain_id == 0:
        handles, arrays = view._backbone, model.backbone
    else:
        handles, arrays = view._domain, st.params
    return view, {k: handles[k] for k in mask}, arrays


def with_onehot(config: ModelConfig, width: int = 16) -> ModelConfig:
    """Widen the input features by a trailing domain one-hot block."""
    from dataclasses import replace

    if config.num_onehot:
        raise ConfigError("config already carries a one-hot block")
    enc = replace(config.encoder, feature_dim=config.encoder.feature_dim + width)
    return ModelConfig(encoder=enc, decoder=config.decoder, num_onehot=width)


# ---------------------------------------------------------------------------
# plan builders
# ---------------------------------------------------------------------------


def module_override_paths(config: ModelConfig, site: str, stacks=("causal", "noncausal")) -> tuple[str, ...]:
    """Every block-level path of one module type across the given stacks."""
    if site not in cf.MODULE_SITES:
        raise ConfigError(f"unknown module site '{site}'")
    out = []
    for stack in stacks:
        sp = cf.stack_spec(config.encoder, stack)
        for k in range(sp.blocks):
            if site == "mhsa" and k < sp.mhsa_from:
                continue
            out.append(f"{stack}.block{k}.{site}")
    return tuple(out)


def ffn_adapter_sites(config: ModelConfig, stacks=("causal", "noncausal")) -> tuple[str, ...]:
    return module_override_paths(config, "ffn_start", stacks) + module_override_paths(config, "ffn_end", stacks)


def adapter_grid_dims(config: ModelConfig) -> tuple[int, int, int]:
    """Bottleneck sweep sizes: 10%, 20% and 40% of the non-causal model dim."""
    d = config.encoder.d_noncausal
    return tuple(max(1, round(f * d)) for f in (0.1, 0.2, 0.4))


def plan_adapters(domain: str, config: ModelConfig, mode: str, bottleneck: int, stacks=("causal", "noncausal"), seed: int = 0) -> DomainPlan:
    return DomainPlan(
        domain=domain,
        adapters=(AdapterSpec(mode=mode, sites=ffn_adapter_sites(config, stacks), bottleneck_dim=bottleneck),),
        init_seed=seed,
    )


def plan_module_override(domain: str, config: ModelConfig, site: str, stacks=("causal", "noncausal"), seed: int = 0) -> DomainPlan:
    return DomainPlan(domain=domain, overrides=module_override_paths(config, site, stacks), init_seed=seed)


def plan_block_override(domain: str, stack: str, block: int, seed: int = 0) -> DomainPlan:
    return DomainPlan(domain=domain, overrides=(f"{stack}.block{block}",), init_seed=seed)


def plan_final_recipe(domain: str, config: ModelConfig, bottleneck: int | None = None, seed: int = 0) -> DomainPlan:
    """Parallel adapters on causal FFN sites plus fresh FFN-end modules in the
    non-causal stack: quality where capacity matters, adapters where it doesn't."""
    b = bottleneck if bottleneck is not None else adapter_grid_dims(config)[2]
    return DomainPlan(
        domain=domain,
        overrides=module_override_paths(config, "ffn_end", ("noncausal",)),
        adapters=(AdapterSpec(mode="parallel", sites=ffn_adapter_sites(config, ("causal",)), bottleneck_dim=b),),
        init_seed=seed,
    )


def count_adapter_params(config: ModelConfig, spec: AdapterSpec) -> int:
    total = 0
    for site in spec.sites:
        d = config.encoder.d_causal if site.startswith("causal") else config.encoder.d_noncausal
        total += 2 * d * spec.bottleneck_dim + spec.bottleneck_dim + d
    return total


def count_plan_params(config: ModelConfig, plan: DomainPlan) -> int:
    total = sum(
        int(np.prod(shape))
        for key, shape in model_shapes(config)
        if _covered(key, plan.overrides)
    )
    return total + sum(count_adapter_params(config, spec) for spec in plan.adapters)
