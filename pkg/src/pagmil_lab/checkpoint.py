"""Versioned model checkpoints.

Layout (all text lines are ASCII, terminated by ``\\n``)::

    pagmil-ckpt 1
    dims dim=<d> thumb=<S> hidden=<h> gen_hidden=<g> p_dim=<p> tasks=<T> heads=<H>
    meta <json: min_margin, active head, per-head task id and frozen flag, prompt entries>
    tensor <name> <ndim> <shape...>
    <prod(shape) little-endian float64 values, row-major>
    ...
    end

Tensors appear in ``ModelState.named_params`` order followed by ``prompt.<task>``
means.  Values are stored bit-exactly, so save -> load -> save reproduces the file.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from . import prompt_guide as pg
from .errors import CheckpointError
from .mil_core import AttentionNetParams, InstanceClassifierParams, ModelState
from .task_heads import Head, HeadRegistry

MAGIC = b"pagmil-ckpt"
VERSION = 1
_DTYPE = np.dtype("<f8")


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    shape = " ".join(str(s) for s in arr.shape)
    buf.write(f"tensor {name} {arr.ndim} {shape}\n".encode())
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())


def dumps_model(model: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + f" {VERSION}\n".encode())
    buf.write((f"dims dim={model.dim} thumb={model.thumb_size} hidden={model.attn.V.shape[0]} "
               f"gen_hidden={model.gen.W1.shape[0]} p_dim={model.gen.p_dim} "
               f"tasks={len(model.prompts)} heads={len(model.heads)}\n").encode())
    meta = {
        "min_margin": model.prompts.min_margin,
        "active_head": model.heads.active_id,
        "heads": [{"task_id": h.task_id, "frozen": h.frozen} for h in model.heads.heads],
        "prompts": [{"task_id": e.task_id, "head_id": e.head_id} for e in model.prompts.entries],
    }
    buf.write(b"meta " + json.dumps(meta, sort_keys=True).encode() + b"\n")
    for name, arr, _ in model.named_params():
        _write_tensor(buf, name, arr)
    for e in model.prompts.entries:
        _write_tensor(buf, f"prompt.{e.task_id}", e.mean)
    buf.write(b"end\n")
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def line(self) -> str:
        end = self.data.find(b"\n", self.pos)
        if end < 0:
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.data[self.pos:end]
        self.pos = end + 1
        try:
            return out.decode("ascii")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt header line at byte {self.pos}") from exc

    def tensor(self) -> tuple[str, np.ndarray]:
        parts = self.line().split()
        if len(parts) < 3 or parts[0] != "tensor":
            raise CheckpointError(f"expected a tensor record, got {' '.join(parts[:3])!r}")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3:3 + ndim])
        if len(shape) != ndim:
            raise CheckpointError(f"tensor {name}: shape has {len(shape)} dims, header says {ndim}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        raw = self.data[self.pos:self.pos + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"tensor {name}: truncated values")
        self.pos += nbytes
        return name, np.frombuffer(raw, dtype=_DTYPE).reshape(shape).astype(float)


def _parse_dims(line: str) -> dict[str, int]:
    parts = line.split()
    if not parts or parts[0] != "dims":
        raise CheckpointError("missing dims line")
    try:
        return {k: int(v) for k, v in (p.split("=", 1) for p in parts[1:])}
    except ValueError as exc:
        raise CheckpointError(f"bad dims line {line!r}") from exc


def loads_model(data: bytes) -> ModelState:
    r = _Reader(data)
    head = r.line().split()
    if len(head) != 2 or head[0].encode() != MAGIC:
        raise CheckpointError("not a pagmil checkpoint")
    if int(head[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head[1]} (expected {VERSION})")
    dims = _parse_dims(r.line())
    meta_line = r.line()
    if not meta_line.startswith("meta "):
        raise CheckpointError("missing meta line")
    meta = json.loads(meta_line[5:])

    tensors: dict[str, np.ndarray] = {}
    n_expected = 9 + 2 * dims["heads"] + dims["tasks"]
    for _ in range(n_expected):
        name, arr = r.tensor()
        tensors[name] = arr
    if r.line() != "end":
        raise CheckpointError("missing end marker")

    try:
        attn = AttentionNetParams(tensors["attn.V"], tensors["attn.U"], tensors["attn.w"])
        inst = InstanceClassifierParams(tensors["inst.W"], tensors["inst.b"])
        gen = pg.PromptGeneratorParams(tensors["gen.W1"], tensors["gen.b1"],
                                       tensors["gen.W2"], tensors["gen.b2"])
        heads = HeadRegistry()
        for i, h in enumerate(meta["heads"]):
            hd = Head(tensors[f"head.{i}.W"], tensors[f"head.{i}.b"], h["task_id"])
            if h["frozen"]:
                hd.freeze()
            heads.heads.append(hd)
        heads.active_id = meta["active_head"]
        prompts = pg.TaskPromptRegistry(min_margin=meta["min_margin"])
        for e in meta["prompts"]:
            mean = tensors[f"prompt.{e['task_id']}"]
            mean.setflags(write=False)
            prompts.entries.append(pg.PromptEntry(e["task_id"], mean, e["head_id"]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor or field {exc}") from exc

    model = ModelState(attn, inst, gen, heads, prompts)
    if model.dim != dims["dim"] or model.thumb_size != dims["thumb"]:
        raise CheckpointError("tensor shapes disagree with the dims header")
    return model


def save_model(model: ModelState, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> ModelState:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return loads_model(p.read_bytes())
