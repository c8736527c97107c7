"""IRWT checkpoints: a minimal little-endian named-tensor container.

Layout::

    "IRWT"  u32 version=1
    u32 metadata count, then per item: u16 key len, key, u32 value len, value
    u32 entry count, then per entry: u16 name len, name, u8 dtype (0 = f32),
        u8 ndim, u32 x ndim dims, raw little-endian f32 data

Strings are UTF-8. No padding, no compression. Entries are the model's
parameters in enumeration order followed by the batchnorm running
statistics ``<layer>/moving_mean`` and ``<layer>/moving_var``.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"IRWT"
VERSION = 1
DTYPE_F32 = 0
POLICIES = ("strict", "skip_missing", "skip_mismatched")


@dataclass
class Checkpoint:
    entries: list = field(default_factory=list)  # [(name, ndarray float32)]
    metadata: dict = field(default_factory=dict)
    format_version: int = VERSION

    def __post_init__(self):
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise CheckpointError("duplicate entry names in checkpoint")

    def names(self):
        return [n for n, _ in self.entries]

    def as_dict(self):
        return dict(self.entries)


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    skipped: list = field(default_factory=list)  # [(name, reason)]

    def to_dict(self):
        return {"loaded": len(self.loaded),
                "skipped": [{"name": n, "reason": r} for n, r in self.skipped]}


def model_entries(model):
    out = [(p.name, p.value) for p in model.params]
    out += list(model.buffers())
    return out


def checkpoint_from_model(model, metadata=None):
    entries = [(n, np.array(v, dtype=np.float32, order="C"))
               for n, v in model_entries(model)]
    meta = {"config_digest": config_digest(model.cfg)}
    meta.update(metadata or {})
    return Checkpoint(entries, {str(k): str(v) for k, v in meta.items()})


def config_digest(cfg):
    text = repr(sorted(cfg.to_dict().items()))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def encode(ckpt):
    parts = [MAGIC, struct.pack("<I", ckpt.format_version), struct.pack("<I", len(ckpt.metadata))]
    for k, v in ckpt.metadata.items():
        kb, vb = k.encode("utf-8"), v.encode("utf-8")
        parts += [struct.pack("<H", len(kb)), kb, struct.pack("<I", len(vb)), vb]
    parts.append(struct.pack("<I", len(ckpt.entries)))
    for name, arr in ckpt.entries:
        nb = name.encode("utf-8")
        a = np.require(arr, dtype="<f4", requirements="C")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", DTYPE_F32, a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), a.tobytes()]
    return b"".join(parts)


def decode(buf, path="<bytes>"):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}", path=path)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not an IRWT checkpoint (bad magic)", path=path)
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", path=path)
    meta = {}
    (n_meta,) = struct.unpack("<I", take(4))
    for _ in range(n_meta):
        (kl,) = struct.unpack("<H", take(2))
        k = take(kl).decode("utf-8")
        (vl,) = struct.unpack("<I", take(4))
        meta[k] = take(vl).decode("utf-8")
    entries = []
    (n_entries,) = struct.unpack("<I", take(4))
    for _ in range(n_entries):
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode("utf-8")
        dtype, ndim = struct.unpack("<BB", take(2))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"entry {name}: unknown dtype code {dtype}", path=path)
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append((name, data))
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry", path=path)
    try:
        return Checkpoint(entries, meta, version)
    except CheckpointError as exc:
        raise CheckpointError(str(exc), path=path) from None


def save(model, path, metadata=None):
    """Write ``model`` (parameters plus running stats) to ``path``."""
    ckpt = checkpoint_from_model(model, metadata)
    write_checkpoint(ckpt, path)
    return ckpt


def write_checkpoint(ckpt, path):
    try:
        with open(path, "wb") as fh:
            fh.write(encode(ckpt))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint: {exc}", path=str(path)) from None


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}", path=str(path)) from None
    return decode(buf, str(path))


def digest(ckpt):
    return hashlib.sha256(encode(ckpt)).hexdigest()


def load_partial(model, ckpt, policy="strict"):
    """Copy checkpoint entries into ``model`` by name and shape.

    ``strict`` fails on any checkpoint entry without a same-shaped target
    and on any model tensor absent from the checkpoint. ``skip_missing``
    tolerates entries with no target name; ``skip_mismatched`` also
    tolerates shape mismatches. Nothing is written unless the whole plan
    validates.
    """
    if policy not in POLICIES:
        raise CheckpointError(f"unknown load policy {policy!r}")
    params = {p.name: p for p in model.params}
    buffers = {}
    for unit in model.units:
        for name, arr in unit.buffers():
            buffers[name] = (unit, name.rsplit("/", 1)[1], arr)

    plan, report, problems = [], LoadReport(), []
    for name, data in ckpt.entries:
        if name in params:
            target_shape = params[name].value.shape
        elif name in buffers:
            target_shape = buffers[name][2].shape
        else:
            if policy == "strict":
                problems.append(f"{name}: not in model")
            report.skipped.append((name, "missing"))
            continue
        if tuple(data.shape) != tuple(target_shape):
            reason = f"shape {tuple(data.shape)} != model {tuple(target_shape)}"
            if policy != "skip_mismatched":
                problems.append(f"{name}: {reason}")
            report.skipped.append((name, reason))
            continue
        plan.append((name, data))
    if policy == "strict":
        present = set(ckpt.names())
        problems += [f"{n}: absent from checkpoint" for n in list(params) + list(buffers)
                     if n not in present]
    if problems:
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(problems),
                              mismatches=problems)

    for name, data in plan:
        if name in params:
            p = params[name]
            p.value = data.astype(p.value.dtype, copy=True)
        else:
            unit, key, _ = buffers[name]
            unit.set_buffer(key, data.astype(np.float32, copy=True))
        report.loaded.append(name)
    return report
