"""Tensor archive persistence: a text manifest plus one raw binary blob.

The manifest lists every array as ``name dtype shape offset nbytes`` in
sorted name order, followed by metadata lines (config snapshot, epoch/step
counters, RNG state).  The blob holds the arrays back to back,
little-endian.  save -> load round-trips are bit-exact; writes go through a
temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = "tensor-archive-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_archive(path: str, arrays: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write arrays plus JSON-serializable metadata; atomic."""
    names = sorted(arrays)
    records = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
        records.append((name, arr.dtype.name,
                        ",".join(map(str, arr.shape)), offset, len(raw)))
        blobs.append(raw)
        offset += len(raw)

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        header = [MAGIC, f"count {len(records)}"]
        for rec in records:
            header.append("tensor\t" + "\t".join(map(str, rec)))
        header.append("meta\t" + json.dumps(meta or {}, sort_keys=True))
        header.append("blob")
        fh.write(("\n".join(header) + "\n").encode())
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); every tensor is byte-identical to what was saved."""
    with open(path, "rb") as fh:
        content = fh.read()
    nl = content.index(b"\n")
    if content[:nl].decode() != MAGIC:
        raise ValueError(f"{path}: not a tensor archive")
    # header ends at the line 'blob'
    marker = b"\nblob\n"
    head_end = content.index(marker)
    header_lines = content[:head_end].decode().split("\n")
    blob = content[head_end + len(marker):]

    arrays = {}
    meta = {}
    for line in header_lines[2:]:
        kind, _, rest = line.partition("\t")
        if kind == "tensor":
            name, dtype, shape_s, off_s, nbytes_s = rest.split("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            off, nbytes = int(off_s), int(nbytes_s)
            arr = np.frombuffer(blob[off:off + nbytes],
                                dtype=_DTYPES[dtype]).astype(dtype).reshape(shape)
            arrays[name] = arr.copy()
        elif kind == "meta":
            meta = json.loads(rest)
    return arrays, meta


# -- model checkpoints ------------------------------------------------------------

def save_checkpoint(path: str, net_params: dict, disc_params: dict,
                    opt_g, opt_d, epoch: int, step: int,
                    config_snapshot: dict, rng_state: dict,
                    global_step: int = 0) -> None:
    """Persist every parameter and optimizer moment plus training position."""
    arrays = {}
    for name, p in net_params.items():
        arrays[f"gen.{name}"] = p.data
    for name, p in disc_params.items():
        arrays[f"dis.{name}"] = p.data
    for name, arr in opt_g.state_arrays().items():
        arrays[f"opt_g.{name}"] = arr
    for name, arr in opt_d.state_arrays().items():
        arrays[f"opt_d.{name}"] = arr
    meta = {
        "epoch": epoch,
        "step": step,
        "global_step": global_step,
        "opt_g_t": opt_g.t,
        "opt_d_t": opt_d.t,
        "config": config_snapshot,
        "rng_state": rng_state,
    }
    save_archive(path, arrays, meta)


def load_checkpoint(path: str, net_params: dict, disc_params: dict,
                    opt_g=None, opt_d=None) -> dict:
    """Restore parameters (bit-exact) and optimizer state in place; returns meta."""
    arrays, meta = load_archive(path)
    for name, p in net_params.items():
        key = f"gen.{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint missing {key}")
        if arrays[key].shape != p.data.shape:
            raise ValueError(f"{key}: shape {arrays[key].shape} != {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype, copy=True)
    for name, p in disc_params.items():
        key = f"dis.{name}"
        if key in arrays:
            p.data = arrays[key].astype(p.data.dtype, copy=True)
    if opt_g is not None:
        opt_g.load_state_arrays(
            {k[len("opt_g."):]: v for k, v in arrays.items() if k.startswith("opt_g.")},
            int(meta.get("opt_g_t", 0)))
    if opt_d is not None:
        opt_d.load_state_arrays(
            {k[len("opt_d."):]: v for k, v in arrays.items() if k.startswith("opt_d.")},
            int(meta.get("opt_d_t", 0)))
    return meta
