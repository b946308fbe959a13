"""Per-parameter trainability masks.

Selector expressions are ``+``-separated unions of terms:

* a group name: ``batchnorm``, ``output``, ``shortcut``, ``body`` or ``all``
* ``random:K`` -- K random kernel weights per output channel of every body conv
* ``random_layer:K`` -- the same number of weights scattered uniformly over
  each body conv kernel instead of per channel

e.g. ``batchnorm+output+shortcut`` or ``random:2+output``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .architectures import GROUPS, ConfigError, Network
from .rng import Prng


@dataclass(frozen=True)
class GroupSelector:
    groups: frozenset = frozenset()
    random_k: int | None = None
    random_layerwise: bool = False

    @classmethod
    def parse(cls, expr: str) -> "GroupSelector":
        if not isinstance(expr, str) or not expr.strip():
            raise ConfigError("empty selector: at least one group must be trainable")
        groups, k, layerwise = set(), None, False
        for term in re.split(r"[+,]", expr):
            term = term.strip().lower()
            m = re.fullmatch(r"(random|random_layer):(\d+)", term)
            if m:
                if k is not None:
                    raise ConfigError(f"selector {expr!r} has more than one random term")
                k, layerwise = int(m.group(2)), m.group(1) == "random_layer"
                if k < 1:
                    raise ConfigError("random selection needs k >= 1")
            elif term == "all":
                groups.update(GROUPS)
            elif term in GROUPS:
                groups.add(term)
            else:
                raise ConfigError(f"unknown selector term {term!r} in {expr!r}")
        return cls(frozenset(groups), k, layerwise)

    def __str__(self) -> str:
        terms = [g for g in GROUPS if g in self.groups]
        if set(GROUPS) <= self.groups:
            terms = ["all"]
        if self.random_k is not None:
            terms.append(f"{'random_layer' if self.random_layerwise else 'random'}:{self.random_k}")
        return "+".join(terms)


@dataclass(frozen=True)
class TrainabilityMask:
    masks: Mapping[str, np.ndarray]
    selector: str
    seed: int | None
    trainable: int = 0
    total: int = 0
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.masks[name]

    def any(self, name: str) -> bool:
        return bool(self.masks[name].any())

    @property
    def fraction(self) -> float:
        return self.trainable / self.total if self.total else 0.0

    def describe(self) -> dict:
        return {"selector": self.selector, "seed": self.seed, "trainable": self.trainable, "total": self.total}


def _freeze(masks: dict[str, np.ndarray], net: Network, selector: str, seed) -> TrainabilityMask:
    for m in masks.values():
        m.setflags(write=False)
    trainable = int(sum(int(m.sum()) for m in masks.values()))
    total = int(sum(m.size for m in masks.values()))
    if trainable == 0:
        raise ConfigError(f"selector {selector!r} makes no parameter trainable")
    return TrainabilityMask(MappingProxyType(masks), selector, seed, trainable, total,
                            {"selector": selector, "seed": seed, "trainable": trainable})


def select_groups(net: Network, groups: GroupSelector | str) -> TrainabilityMask:
    sel = GroupSelector.parse(groups) if isinstance(groups, str) else groups
    if sel.random_k is not None:
        raise ConfigError("random terms need select(), which takes a seed")
    if not sel.groups:
        raise ConfigError("empty selector: at least one group must be trainable")
    masks = {n: np.full(p.shape, net.groups[n] in sel.groups) for n, p in net.params.items()}
    return _freeze(masks, net, str(sel), None)


def _body_kernels(net: Network) -> list[str]:
    return [n for n in net.params if net.groups[n] == "body" and n.endswith(".weight") and net.params[n].data.ndim == 4]


def select_random_per_channel(net: Network, k: int, rng: Prng, layerwise: bool = False,
                              extra_groups=frozenset()) -> TrainabilityMask:
    """Mark ``k`` weights per output channel of each body conv kernel as trainable."""
    kernels = _body_kernels(net)
    smallest = min(int(np.prod(net.params[n].shape[1:])) for n in kernels)
    if k < 1 or k > smallest:
        raise ConfigError(f"k={k} must lie in [1, {smallest}] (smallest per-channel kernel size in the body)")
    masks = {n: np.full(p.shape, net.groups[n] in extra_groups) for n, p in net.params.items()}
    for name in kernels:
        shape = net.params[name].shape
        per = int(np.prod(shape[1:]))
        r = rng.child(name)
        m = np.zeros((shape[0], per), dtype=bool)
        if layerwise:
            flat = m.reshape(-1)
            flat[r.choice(flat.size, k * shape[0])] = True
        else:
            for c in range(shape[0]):
                m[c, r.choice(per, k)] = True
        masks[name] = masks[name] | m.reshape(shape)
    sel = GroupSelector(frozenset(extra_groups), k, layerwise)
    return _freeze(masks, net, str(sel), rng.seed)


def select(net: Network, expr: str, seed: int = 0) -> TrainabilityMask:
    """Build the mask for a full selector expression."""
    sel = GroupSelector.parse(expr)
    if sel.random_k is None:
        return select_groups(net, sel)
    return select_random_per_channel(net, sel.random_k, Prng(seed).child("mask"), sel.random_layerwise, sel.groups)


def apply_mask(gradients: Mapping[str, np.ndarray], mask: TrainabilityMask) -> dict[str, np.ndarray]:
    """Zero gradient entries of frozen coordinates."""
    out = {}
    for name, g in gradients.items():
        m = mask[name]
        if m.shape != g.shape:
            raise RuntimeError(f"mask for {name} has shape {m.shape}, gradient {g.shape}")
        out[name] = np.where(m, g, 0).astype(g.dtype, copy=False)
    return out


@dataclass
class FrozenReport:
    violations: list[str]
    changed: dict[str, dict]
    unchanged_trainable: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def changed_roles(self) -> list[str]:
        return sorted({n.rsplit(".", 1)[1] for n in self.changed})

    def summary(self) -> str:
        if self.violations:
            return f"violations in {len(self.violations)} tensor(s): " + ", ".join(self.violations)
        roles = ", ".join(self.changed_roles) or "nothing"
        return f"ok: no frozen parameter changed; changed: {roles} only ({len(self.changed)} tensors)"


def verify_frozen(before, after, mask: TrainabilityMask) -> FrozenReport:
    """Compare two checkpoints of the same plan under ``mask``.

    Returns the tensors whose frozen coordinates differ (must be empty) and
    per-tensor change statistics among trainable coordinates.
    """
    if before.manifest_key() != after.manifest_key():
        raise ValueError("checkpoints come from different plans")
    violations, changed, untouched = [], {}, []
    for name, m in mask.masks.items():
        a, b = before.params[name], after.params[name]
        if a.shape != b.shape:
            raise ValueError(f"{name}: shape {a.shape} vs {b.shape}")
        diff = a.view(np.uint8).reshape(a.shape + (-1,)) != b.view(np.uint8).reshape(b.shape + (-1,))
        diff = diff.any(axis=-1)
        if np.any(diff & ~m):
            violations.append(name)
        moved = diff & m
        if moved.any():
            delta = np.abs(b.astype(np.float64) - a.astype(np.float64))[moved]
            changed[name] = {"count": int(moved.sum()), "max_abs": float(delta.max()), "mean_abs": float(delta.mean())}
        elif m.any():
            untouched.append(name)
    return FrozenReport(violations, changed, untouched)
