"""Modular parameter persistence.

One ``.mdab`` file holds one bundle: the backbone, or one domain's overrides
and adapters. Byte layout: an 8-byte little-endian length prefix, a UTF-8 JSON
manifest, then the raw little-endian float32 arrays concatenated in manifest
entry order. Entries are sorted by key and the manifest is canonicalized, so
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import routing as rt
from .errors import (
    BundleShapeError,
    CorruptBundleError,
    DuplicateDomainError,
    FingerprintMismatchError,
    UnsupportedVersionError,
)

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class ParameterBundle:
    manifest: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def domain(self) -> str:
        return self.manifest["domain"]

    @property
    def kind(self) -> str:
        return self.manifest["kind"]

    def config(self) -> rt.ModelConfig:
        return rt.ModelConfig.from_json(self.manifest["config"])

    def plan(self) -> rt.DomainPlan:
        return rt.DomainPlan.from_json(self.manifest["plan"])


def _expected_entries(config: rt.ModelConfig, kind: str, plan: rt.DomainPlan) -> dict[str, tuple[int, ...]]:
    if kind == "backbone":
        return {k: tuple(s) for k, s in rt.model_shapes(config)}
    expected: dict[str, tuple[int, ...]] = {}
    for key, shape in rt.model_shapes(config):
        if rt._covered(key, plan.overrides):
            expected[key] = tuple(shape)
    enc = config.encoder
    for spec in plan.adapters:
        for site in spec.sites:
            d = enc.d_causal if site.startswith("causal") else enc.d_noncausal
            b = spec.bottleneck_dim
            expected[f"adapter.{site}.w_down"] = (d, b)
            expected[f"adapter.{site}.b_down"] = (b,)
            expected[f"adapter.{site}.w_up"] = (b, d)
            expected[f"adapter.{site}.b_up"] = (d,)
    return expected


def _validate_arrays(bundle: ParameterBundle) -> None:
    expected = _expected_entries(bundle.config(), bundle.kind, bundle.plan())
    if set(bundle.arrays) != set(expected):
        extra = sorted(set(bundle.arrays) ^ set(expected))[:3]
        raise BundleShapeError(f"bundle keys do not resolve under its config (e.g. {extra})")
    for key, arr in bundle.arrays.items():
        if tuple(arr.shape) != expected[key]:
            raise BundleShapeError(f"entry '{key}' has shape {arr.shape}, expected {expected[key]}")


def backbone_bundle(model: rt.Model, step: int = 0) -> ParameterBundle:
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "backbone",
        "domain": model.backbone_domain,
        "config": model.config.to_json(),
        "fingerprint": model.config.fingerprint(),
        "plan": rt.DomainPlan(domain=model.backbone_domain).to_json(),
        "created_step": int(step),
        "entries": [],
    }
    return ParameterBundle(manifest, {k: v.copy() for k, v in model.backbone.items()})


def domain_bundle(model: rt.Model, domain: str, step: int = 0) -> ParameterBundle:
    st = model.domain_state(domain)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "domain",
        "domain": st.name,
        "config": model.config.to_json(),
        "fingerprint": model.config.fingerprint(),
        "plan": st.plan.to_json(),
        "created_step": int(step),
        "entries": [],
    }
    return ParameterBundle(manifest, {k: v.copy() for k, v in st.params.items()})


def save_bundle(bundle: ParameterBundle, destination: str | Path) -> Path:
    keys = sorted(bundle.arrays)
    manifest = dict(bundle.manifest)
    manifest["entries"] = [{"key": k, "shape": list(bundle.arrays[k].shape)} for k in keys]
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(destination)
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        for k in keys:
            fh.write(np.ascontiguousarray(bundle.arrays[k], dtype="<f4").tobytes())
    return path


def load_bundle(source: str | Path, expected_config: rt.ModelConfig | None = None) -> ParameterBundle:
    raw = Path(source).read_bytes()
    if len(raw) < _LEN.size:
        raise CorruptBundleError("file too small for a length prefix")
    (hlen,) = _LEN.unpack_from(raw)
    if _LEN.size + hlen > len(raw):
        raise CorruptBundleError("manifest extends past end of file")
    try:
        manifest = json.loads(raw[_LEN.size:_LEN.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptBundleError(f"manifest is not valid JSON: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version!r} not supported")
    bundle = ParameterBundle(manifest)
    own_fp = bundle.config().fingerprint()
    if manifest.get("fingerprint") != own_fp:
        raise FingerprintMismatchError("manifest fingerprint does not match its embedded config")
    if expected_config is not None and expected_config.fingerprint() != own_fp:
        raise FingerprintMismatchError(
            f"bundle was written for config {own_fp}, expected {expected_config.fingerprint()}"
        )
    offset = _LEN.size + hlen
    payload = raw[offset:]
    total = sum(int(np.prod(e["shape"])) for e in manifest["entries"])
    if len(payload) != total * 4:
        raise CorruptBundleError(f"payload holds {len(payload)} bytes, manifest implies {total * 4}")
    pos = 0
    for entry in manifest["entries"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(entry["shape"])
        bundle.arrays[entry["key"]] = arr.astype(np.float32, copy=True)
        pos += n * 4
    _validate_arrays(bundle)
    return bundle


def compose(backbone: ParameterBundle, *domains: ParameterBundle) -> rt.Model:
    """Assemble a routed model from a backbone bundle plus domain bundles.

    Composition is order-independent across domains; every bundle must carry
    the same config fingerprint and names must be unique.
    """
    if backbone.kind != "backbone":
        raise BundleShapeError("first bundle must be a backbone bundle")
    config = backbone.config()
    fp = config.fingerprint()
    model = rt.Model(config, {k: v.copy() for k, v in backbone.arrays.items()}, backbone.domain)
    for db in sorted(domains, key=lambda b: b.domain):
        if db.kind != "domain":
            raise BundleShapeError(f"'{db.domain}' is not a domain bundle")
        if db.manifest["fingerprint"] != fp:
            raise FingerprintMismatchError(f"domain '{db.domain}' was saved under a different config")
        if db.domain in model.domains:
            raise DuplicateDomainError(f"two bundles claim domain '{db.domain}'")
        rt.register_domain(model, db.plan())
        st = model.domain_state(db.domain)
        if set(st.params) != set(db.arrays):
            raise BundleShapeError(f"domain '{db.domain}' entries disagree with its plan")
        st.params = {k: v.copy() for k, v in db.arrays.items()}
    return model


@dataclass
class DiffReport:
    added: tuple[str, ...]
    removed: tuple[str, ...]
    changed: dict[str, float]  # key -> max abs delta

    def is_empty(self) -> bool:
        return not (self.added or self.removed or self.changed)

    def to_json(self) -> dict:
        return {
            "added": list(self.added),
            "removed": list(self.removed),
            "changed": {k: float(v) for k, v in self.changed.items()},
        }


def diff(a: ParameterBundle, b: ParameterBundle) -> DiffReport:
    """Structural and numeric difference between two bundles (a -> b)."""
    if a.manifest.get("format_version") != b.manifest.get("format_version"):
        raise UnsupportedVersionError("cannot diff bundles of different format versions")
    added = tuple(sorted(set(b.arrays) - set(a.arrays)))
    removed = tuple(sorted(set(a.arrays) - set(b.arrays)))
    changed = {}
    for key in sorted(set(a.arrays) & set(b.arrays)):
        xa, xb = a.arrays[key], b.arrays[key]
        if xa.shape != xb.shape:
            changed[key] = float("inf")
        else:
            delta = float(np.max(np.abs(xa - xb), initial=0.0))
            if delta > 0.0:
                changed[key] = delta
    return DiffReport(added, removed, changed)
