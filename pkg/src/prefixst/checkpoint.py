"""Checkpoint files: text header (config + tensor manifest) + raw float data.

Layout::

    PREFIXST-CKPT v1\n
    [config]\n      canonical RunConfig text
    [meta]\n        free-form run state (step counters, rng, ...)
    [tensors]\n     one `name<TAB>dim,dim,...<TAB>offset` line per tensor
    [data]\n        little-endian float32, concatenated in manifest order

Offsets are element offsets into the data block. Files are published by
write-to-temp-then-rename so concurrent readers never observe a partial file.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = "PREFIXST-CKPT v1"


def save_checkpoint(
    path: str | Path,
    config_text: str,
    tensors: dict[str, np.ndarray],
    meta: dict[str, str] | None = None,
) -> None:
    path = Path(path)
    lines = [MAGIC, "[config]"]
    lines.extend(config_text.rstrip("\n").splitlines())
    lines.append("[meta]")
    for k, v in (meta or {}).items():
        if "\n" in str(v):
            raise ValueError(f"meta value for {k!r} must be single-line")
        lines.append(f"{k} = {v}")
    lines.append("[tensors]")
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else ""
        lines.append(f"{name}\t{shape}\t{offset}")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        blobs.append(blob)
        offset += arr.size
    lines.append("[data]")
    header = ("\n".join(lines) + "\n").encode()

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path):
    """Returns (config_text, meta dict, tensors dict of float32 arrays)."""
    raw = Path(path).read_bytes()
    marker = b"\n[data]\n"
    split = raw.find(marker)
    if split < 0:
        raise ValueError(f"{path}: not a checkpoint file (missing data section)")
    header = raw[:split].decode()
    data = np.frombuffer(raw[split + len(marker):], dtype="<f4")

    lines = header.splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: bad magic {lines[0] if lines else ''!r}")
    section = None
    config_lines: list[str] = []
    meta: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for line in lines[1:]:
        if line in ("[config]", "[meta]", "[tensors]"):
            section = line
            continue
        if section == "[config]":
            config_lines.append(line)
        elif section == "[meta]":
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
        elif section == "[tensors]":
            name, shape_s, off_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            manifest.append((name, shape, int(off_s)))

    tensors: dict[str, np.ndarray] = {}
    for name, shape, off in manifest:
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = data[off : off + n].reshape(shape).copy()
    return "\n".join(config_lines) + "\n", meta, tensors
