"""Named-tensor archives and the key-value text format used for manifests
and run configs.

An archive is a zip container (stored, not compressed) holding

* ``manifest.txt``  - ``key = value`` lines, values JSON-encoded, nested keys dotted
* ``index.txt``     - one ``name<TAB>dtype<TAB>shape`` line per tensor
* ``tensors/<name>`` - the raw little-endian bytes of each tensor
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
    "uint8": (torch.uint8, "u1"),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and v:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(d: dict) -> dict:
    out: dict = {}
    for key, v in d.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return out


def dump_kv(d: dict) -> str:
    lines = []
    for k, v in flatten(d).items():
        lines.append(f"{k} = {json.dumps(v, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str, nested: bool = True) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value
    return unflatten(flat) if nested else flat


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, tensors: dict, manifest: dict, extra_files: dict = None) -> None:
    """Write tensors + manifest to ``path`` atomically."""
    manifest = {"format_version": FORMAT_VERSION, **manifest}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            index = []
            for name, t in tensors.items():
                t = t.detach().cpu().contiguous()
                if t.dtype not in _TORCH_TO_NAME:
                    raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name}")
                dname = _TORCH_TO_NAME[t.dtype]
                arr = t.numpy().astype(_DTYPES[dname][1], copy=False)
                shape = ",".join(str(s) for s in t.shape)
                index.append(f"{name}\t{dname}\t{shape}")
                zf.writestr(f"tensors/{name}", arr.tobytes())
            zf.writestr("manifest.txt", dump_kv(manifest))
            zf.writestr("index.txt", "\n".join(index) + "\n")
            for fname, text in (extra_files or {}).items():
                zf.writestr(fname, text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_archive(path):
    """Returns (tensors, manifest, extra_files)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"archive not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"not a tensor archive: {path}") from exc
    with zf:
        names = set(zf.namelist())
        for required in ("manifest.txt", "index.txt"):
            if required not in names:
                raise CheckpointError(f"{path}: missing {required}")
        manifest = parse_kv(zf.read("manifest.txt").decode())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
        tensors = {}
        for line in zf.read("index.txt").decode().splitlines():
            if not line.strip():
                continue
            name, dname, shape = line.split("\t")
            shape = tuple(int(s) for s in shape.split(",") if s)
            tdtype, npdtype = _DTYPES[dname]
            raw = zf.read(f"tensors/{name}")
            arr = np.frombuffer(raw, dtype=npdtype).reshape(shape)
            tensors[name] = torch.from_numpy(arr.copy()).to(tdtype)
        extra = {
            n: zf.read(n).decode()
            for n in names
            if n not in ("manifest.txt", "index.txt") and not n.startswith("tensors/")
        }
    return tensors, manifest, extra


def module_tensors(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: dict, prefix: str) -> None:
    own = module.state_dict()
    sub = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(sub))
    unexpected = sorted(set(sub) - set(own))
    if missing or unexpected:
        raise CheckpointError(
            f"parameter mismatch under '{prefix}': missing={missing[:5]} unexpected={unexpected[:5]}"
        )
    for k, v in sub.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise CheckpointError(f"shape mismatch for {prefix}{k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    module.load_state_dict(sub)
