"""Single-file checkpoint archive.

Layout: magic `RRSRCKPT1`, u32 manifest length, JSON manifest (config,
iteration, RNG states, optimizer scalars), u32 tensor count, then named raw
tensors (u16 name length + utf-8 name, u8 ndim, u32 dims, little-endian
float32 data). Model parameters are stored losslessly; optimizer first and
second moments ride along so a resumed run continues bit-identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointFormatError

CHECKPOINT_MAGIC = b"RRSRCKPT1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray]

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])

    @property
    def config(self) -> dict:
        return self.manifest["config"]


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw
    head += struct.pack("<B", data.ndim)
    head += struct.pack("<%dI" % data.ndim, *data.shape)
    return head + data.tobytes()


def save_checkpoint(
    path,
    model: torch.nn.Module,
    config: dict,
    iteration: int,
    optimizer: torch.optim.Optimizer | None = None,
    rng_states: dict | None = None,
    extras: dict | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    param_names = []
    for name, p in model.named_parameters():
        param_names.append(name)
        tensors.append(("model/" + name, p.detach().cpu().numpy()))
    for name, b in model.named_buffers():
        tensors.append(("model/" + name, b.detach().cpu().numpy()))

    adam = None
    if optimizer is not None:
        steps = {}
        params = dict(model.named_parameters())
        for name, p in params.items():
            state = optimizer.state.get(p)
            if not state:
                continue
            steps[name] = float(state["step"])
            tensors.append(("adam/%s/exp_avg" % name, state["exp_avg"].cpu().numpy()))
            tensors.append(
                ("adam/%s/exp_avg_sq" % name, state["exp_avg_sq"].cpu().numpy())
            )
        group = optimizer.param_groups[0]
        adam = {
            "steps": steps,
            "lr": group["lr"],
            "betas": list(group["betas"]),
            "eps": group["eps"],
        }

    manifest = {
        "format_version": FORMAT_VERSION,
        "iteration": int(iteration),
        "config": config,
        "rng": rng_states or {},
        "param_names": param_names,
        "adam": adam,
    }
    # JSON-safe trainer state that is neither a tensor nor an RNG stream
    # (e.g. a partially filled logging window).
    if extras:
        manifest.update(extras)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        parts.append(_pack_tensor(name, arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("%s is not a checkpoint (bad magic)" % (path,))
    pos = len(CHECKPOINT_MAGIC)
    try:
        (mlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        manifest = json.loads(raw[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from("<%dI" % ndim, raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos)
            pos += 4 * n
            tensors[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError("%s is truncated or corrupt: %s" % (path, exc))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            "%s has unsupported format version %r"
            % (path, manifest.get("format_version"))
        )
    if pos != len(raw):
        raise CheckpointFormatError("%s has %d trailing bytes" % (path, len(raw) - pos))
    return Checkpoint(manifest=manifest, tensors=tensors)


def restore_model(ckpt: Checkpoint, model: torch.nn.Module) -> None:
    state = model.state_dict()
    expected = {"model/" + k for k in state}
    stored = {k for k in ckpt.tensors if k.startswith("model/")}
    if expected != stored:
        missing = sorted(expected - stored)[:3]
        extra = sorted(stored - expected)[:3]
        raise CheckpointFormatError(
            "model mismatch: missing %r, unexpected %r" % (missing, extra)
        )
    dt = next(model.parameters()).dtype
    new_state = {
        k: torch.from_numpy(ckpt.tensors["model/" + k]).to(dt) for k in state
    }
    model.load_state_dict(new_state)


def restore_optimizer(
    ckpt: Checkpoint, optimizer: torch.optim.Optimizer, model: torch.nn.Module
) -> None:
    adam = ckpt.manifest.get("adam")
    if adam is None:
        raise CheckpointFormatError("checkpoint carries no optimizer state")
    params = dict(model.named_parameters())
    for name, step in adam["steps"].items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(ckpt.tensors["adam/%s/exp_avg" % name]).to(
                p.dtype
            ),
            "exp_avg_sq": torch.from_numpy(
                ckpt.tensors["adam/%s/exp_avg_sq" % name]
            ).to(p.dtype),
        }
