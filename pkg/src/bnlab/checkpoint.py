"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"BNLABCK\\x00"
    version    uint32
    manifest   uint64 length + UTF-8 JSON (architecture, plan, tensor index, metadata)
    count      uint32    number of tensor records
    records    name: uint32 length + UTF-8 bytes
               dtype tag: uint8 (1 = float32, 2 = float64, 3 = int64, 4 = bool)
               rank: uint8, extents: uint64 * rank
               raw little-endian values, row-major

Parameter tensors are stored under their network names; batchnorm running
statistics under ``<bn>.running_mean`` / ``<bn>.running_var``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import ArchSpec, Network, build_plan

MAGIC = b"BNLABCK\x00"
FORMAT_VERSION = 1
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3, np.dtype("bool"): 4}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    code = 10


class BadMagicError(CheckpointError):
    code = 11


class VersionError(CheckpointError):
    code = 12


class TensorCountError(CheckpointError):
    code = 13


class ShapeMismatchError(CheckpointError):
    code = 14


class TruncatedError(CheckpointError):
    code = 15


@dataclass
class Checkpoint:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    stats: dict[str, np.ndarray]
    plan_manifest: dict
    mask: dict = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_network(cls, net: Network, **kw) -> "Checkpoint":
        params = {n: p.data.copy() for n, p in net.params.items()}
        stats = {}
        for name, st in net.bn.items():
            stats[f"{name}.running_mean"] = st.running_mean.copy()
            stats[f"{name}.running_var"] = st.running_var.copy()
        meta = dict(kw.pop("meta", {}) or {})
        meta.setdefault("bn_eps", next(iter(net.bn.values())).eps if net.bn else None)
        meta.setdefault("bn_stat_momentum", next(iter(net.bn.values())).stat_momentum if net.bn else None)
        meta.setdefault("bn_stats_ready", all(st.stats_ready for st in net.bn.values()))
        return cls(net.spec, params, stats, net.plan.manifest(), meta=meta, **kw)

    def to_network(self) -> Network:
        plan = build_plan(self.arch)
        if plan.manifest() != self.plan_manifest:
            raise CheckpointError("stored plan manifest does not match the architecture it names")
        dtype = next(iter(self.params.values())).dtype if self.params else np.float32
        net = Network(plan, dtype=dtype)
        for name, arr in self.params.items():
            net.params[name].data = arr.copy()
        ready = self.meta.get("bn_stats_ready", True)
        for name, st in net.bn.items():
            st.load_statistics(self.stats[f"{name}.running_mean"], self.stats[f"{name}.running_var"])
            st.stats_ready = ready
        return net

    def manifest_key(self) -> str:
        return json.dumps(self.plan_manifest, sort_keys=True)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.arch, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()}, self.plan_manifest, dict(self.mask),
                          dict(self.hyperparams), dict(self.seeds), self.epoch, dict(self.meta), self.version)

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.stats}

    def gammas(self) -> dict[str, np.ndarray]:
        return {n: v for n, v in self.params.items() if n.endswith(".gamma")}

    def betas(self) -> dict[str, np.ndarray]:
        return {n: v for n, v in self.params.items() if n.endswith(".beta")}


def _manifest(ckpt: Checkpoint) -> dict:
    return {
        "arch": ckpt.arch.to_dict(),
        "plan": ckpt.plan_manifest,
        "tensors": [{"name": n, "dtype": str(np.dtype(a.dtype)), "shape": list(a.shape), "kind": kind}
                    for kind, group in (("param", ckpt.params), ("stat", ckpt.stats)) for n, a in group.items()],
        "mask": ckpt.mask,
        "hyperparams": ckpt.hyperparams,
        "seeds": ckpt.seeds,
        "epoch": ckpt.epoch,
        "meta": ckpt.meta,
    }


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    man = json.dumps(_manifest(ckpt), sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(man)), man]
    items = list(ckpt.tensors().items())
    out.append(struct.pack("<I", len(items)))
    for name, arr in items:
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.kind != "b" else a.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
        nb = name.encode("utf-8")
        out += [struct.pack("<I", len(nb)), nb, struct.pack("<BB", _TAGS[dt], a.ndim),
                struct.pack(f"<{a.ndim}Q", *a.shape), a.astype(dt, copy=False).tobytes()]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"{self.path}: unexpected end of file at byte {self.pos}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes, path="<bytes>") -> Checkpoint:
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    (mlen,) = r.unpack("<Q")
    man = json.loads(r.take(mlen).decode("utf-8"))
    (count,) = r.unpack("<I")
    index = man["tensors"]
    if count != len(index):
        raise TensorCountError(f"{path}: {count} tensor records but manifest lists {len(index)}")
    params, stats = {}, {}
    for entry in index:
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        tag, rank = r.unpack("<BB")
        if tag not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name}")
        shape = r.unpack(f"<{rank}Q")
        dt = _DTYPES[tag]
        if name != entry["name"] or list(shape) != entry["shape"] or dt != np.dtype(entry["dtype"]).newbyteorder("<"):
            raise ShapeMismatchError(f"{path}: record {name} {list(shape)} does not match manifest entry "
                                     f"{entry['name']} {entry['shape']}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="), copy=True)
        (params if entry["kind"] == "param" else stats)[name] = arr
    plan = build_plan(ArchSpec.from_dict(man["arch"]))
    expected = {n: tuple(s) for n, s, _, _ in plan.params()}
    got = {n: a.shape for n, a in params.items()}
    if expected != got:
        bad = sorted(set(expected.items()) ^ set(got.items()))[:3]
        raise ShapeMismatchError(f"{path}: parameter tensors do not match the architecture: {bad}")
    return Checkpoint(ArchSpec.from_dict(man["arch"]), params, stats, man["plan"], man["mask"],
                      man["hyperparams"], man["seeds"], man["epoch"], man["meta"], version)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), path)
