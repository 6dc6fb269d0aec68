"""Binary checkpoint of a trained learner.

Layout (little-endian)::

    b"APGCKPT\\0" | u32 version | u32 len | utf-8 JSON config
    u32 n_params, then per parameter:
        u16 len | utf-8 path | u8 ndim | u32[ndim] shape | f32[...] values
    candidate list: u32 N | u32 d | u32 group_size | f32[N*d]
                    u32 n_groups | (i64 class, u32 start, u32 stop)*
                    u32 n_tasks | u32[n_tasks] rows per task
    classifier:     u32 C | u32 d | i64[C] class ids | f32[C*d] weight | f32[C] bias
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np
import torch

from .backbone import BackboneConfig
from .protocol import IncrementalLearner, TrainConfig

MAGIC = b"APGCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _f32(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def serialize_checkpoint(learner: IncrementalLearner) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(
        {"backbone": asdict(learner.bcfg), "train": asdict(learner.cfg), "task": learner.task,
         "task_classes": learner.task_classes}
    ).encode()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(meta)) + meta)

    named = [
        (n, p) for n, p in learner.net.named_parameters()
        if n not in ("apg.candidates.candidates", "head.weight", "head.bias")
    ]
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", p.dim()) + struct.pack(f"<{p.dim()}I", *p.shape))
        buf.write(_f32(p))

    cands = learner.net.apg.candidates
    n, d = cands.candidates.shape
    buf.write(struct.pack("<III", n, d, cands.group_size) + _f32(cands.candidates))
    buf.write(struct.pack("<I", len(cands.groups)))
    for c, (s, e) in cands.groups.items():
        buf.write(struct.pack("<qII", c, s, e))
    buf.write(struct.pack("<I", len(cands.task_sizes)) + struct.pack(f"<{len(cands.task_sizes)}I", *cands.task_sizes))

    head = learner.net.head
    buf.write(struct.pack("<II", len(head), head.dim))
    buf.write(struct.pack(f"<{len(head)}q", *head.class_ids))
    buf.write(_f32(head.weight) + _f32(head.bias))
    return buf.getvalue()


def deserialize_checkpoint(data: bytes) -> IncrementalLearner:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def floats(shape) -> torch.Tensor:
        count = int(np.prod(shape)) if len(shape) else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
        return torch.as_tensor(arr, dtype=torch.get_default_dtype())

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, meta_len = unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(meta_len)).decode())
    bcfg = BackboneConfig(**meta["backbone"])
    cfg = TrainConfig(**meta["train"])
    learner = IncrementalLearner(bcfg, cfg)

    params = dict(learner.net.named_parameters())
    (n_params,) = unpack("<I")
    with torch.no_grad():
        for _ in range(n_params):
            (name_len,) = unpack("<H")
            name = bytes(take(name_len)).decode()
            (ndim,) = unpack("<B")
            shape = unpack(f"<{ndim}I")
            if name not in params:
                raise CheckpointError(f"unknown parameter {name!r}")
            if tuple(params[name].shape) != tuple(shape):
                raise CheckpointError(f"shape mismatch for {name}: {shape} vs {tuple(params[name].shape)}")
            params[name].copy_(floats(shape))

        n, d, group_size = unpack("<III")
        cands = learner.net.apg.candidates
        if group_size != cands.group_size:
            raise CheckpointError("candidate group size does not match config")
        values = floats((n, d))
        (n_groups,) = unpack("<I")
        groups = {}
        for _ in range(n_groups):
            c, s, e = unpack("<qII")
            groups[int(c)] = (s, e)
        (n_tasks,) = unpack("<I")
        task_sizes = list(unpack(f"<{n_tasks}I"))
        cands.candidates = torch.nn.Parameter(values)
        cands.groups, cands.task_sizes = groups, task_sizes

        n_cls, dim = unpack("<II")
        head = learner.net.head
        head.class_ids = [int(c) for c in unpack(f"<{n_cls}q")]
        head.weight = torch.nn.Parameter(floats((n_cls, dim)))
        head.bias = torch.nn.Parameter(floats((n_cls,)))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint data")

    learner.task = meta["task"]
    learner.task_classes = [list(t) for t in meta["task_classes"]]
    if cfg.freeze_mode == "frozen" or learner.task > 0:
        learner.net.backbone.freeze(True)
    return learner


def save_checkpoint(learner: IncrementalLearner, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_checkpoint(learner))


def load_checkpoint(path) -> IncrementalLearner:
    with open(path, "rb") as fh:
        return deserialize_checkpoint(fh.read())
