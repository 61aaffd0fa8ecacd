"""Checkpoint serialization for student models.

Layout: one JSON header line, a single newline, then a raw blob of
little-endian float32 parameter values. The header records the format
version, architecture tag, config (including the training label scale),
and an ordered tensor index of ``{name, shape, byte_offset}`` with offsets
relative to the blob start. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import LoadError
from .models import StudentModel, config_from_dict, param_count
from .tensor import Tensor, parameter

FORMAT_VERSION = 1


def _header_bytes(model: StudentModel) -> tuple[bytes, list[np.ndarray]]:
    arrays = []
    index = []
    offset = 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        arrays.append(arr)
        index.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        offset += arr.nbytes
    config = dict(asdict(model.config))
    config["label_scale"] = float(model.output_scale)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": model.arch,
        "config": config,
        "tensors": index,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8"), arrays


def save_checkpoint(model: StudentModel, path) -> None:
    header, arrays = _header_bytes(model)
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\n")
        for arr in arrays:
            f.write(arr.tobytes())


def read_header(path) -> dict:
    """Parse and validate just the JSON header of a checkpoint file."""
    try:
        with open(path, "rb") as f:
            line = f.readline()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if not line.endswith(b"\n"):
        raise LoadError(f"checkpoint {path} is truncated (no header line)")
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"checkpoint {path} has a malformed header: {exc}") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise LoadError(f"checkpoint {path}: unsupported format version {version!r}")
    for key in ("architecture", "config", "tensors"):
        if key not in header:
            raise LoadError(f"checkpoint {path}: header missing {key!r}")
    return header


def load_checkpoint(path) -> StudentModel:
    header = read_header(path)
    with open(path, "rb") as f:
        f.readline()
        blob = f.read()

    config_dict = dict(header["config"])
    label_scale = float(config_dict.pop("label_scale", 1.0))
    arch = header["architecture"]
    cfg = config_from_dict(arch, config_dict)

    expected = 0
    for entry in header["tensors"]:
        expected = max(expected, entry["byte_offset"] + 4 * int(np.prod(entry["shape"])))
    if len(blob) != expected:
        raise LoadError(
            f"checkpoint {path}: blob has {len(blob)} bytes, header implies {expected}"
        )

    params: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        params[entry["name"]] = parameter(arr.copy())

    model = StudentModel(arch=arch, config=cfg, params=params, output_scale=label_scale)
    if getattr(cfg, "frozen", False):
        from .models import set_frozen

        set_frozen(model, "backbone.", True)
    return model


def load_backbone_weights(model: StudentModel, path) -> None:
    """Copy every ``backbone.*`` tensor from a checkpoint into ``model``.

    All backbone tensors of ``model`` must be present in the file with
    matching shapes, otherwise the load fails.
    """
    donor = load_checkpoint(path)
    wanted = [name for name in model.params if name.startswith("backbone.")]
    for name in wanted:
        if name not in donor.params:
            raise LoadError(f"weight file {path} is missing tensor {name!r}")
        src = donor.params[name].data
        dst = model.params[name]
        if src.shape != dst.data.shape:
            raise LoadError(
                f"weight file {path}: tensor {name!r} has shape {src.shape}, "
                f"model expects {dst.data.shape}"
            )
        dst.data = src.astype(dst.data.dtype)


def checkpoint_param_count(path) -> int:
    """Parameter count implied by a checkpoint header alone."""
    header = read_header(path)
    return int(sum(int(np.prod(e["shape"])) for e in header["tensors"]))
