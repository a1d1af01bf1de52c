"""Checkpoint and parameter-bank containers.

A container is a directory holding

* ``manifest.json`` - format name, version, model config, the
  conditioning (parameter-set names and source map) and, for every named
  parameter, its shape, byte offset and element count;
* ``params.f64`` - all parameters as one raw little-endian float64 blob,
  concatenated in manifest order.

A *bank* container uses the same layout but carries only the
normalization affine parameters plus the layer widths, so banks trained
elsewhere can be fed straight into the analysis.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .conditioning import ConditionBank, ConditioningMode
from .model import ModelConfig, SegmentationNet, build, load_state

FORMAT_VERSION = 1
CHECKPOINT_KIND = "styleseg-checkpoint"
BANK_KIND = "styleseg-bank"


class FormatError(ValueError):
    """A container that is missing, malformed, or of an unsupported version."""


def _write(directory, kind: str, header: dict, params: dict[str, np.ndarray]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (d / "params.f64").write_bytes(b"".join(chunks))
    manifest = {"format": kind, "version": FORMAT_VERSION, **header, "parameters": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def _read(directory, kinds: tuple[str, ...]) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{d}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d}/manifest.json: {exc}") from None
    if manifest.get("format") not in kinds:
        raise FormatError(f"{d}: expected one of {kinds}, found format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported {manifest['format']} version {manifest.get('version')!r}")
    try:
        blob = (d / "params.f64").read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{d}: no params.f64") from None
    params = {}
    for e in manifest["parameters"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(blob):
            raise FormatError(f"{d}: parameter {e['name']} runs past the end of params.f64")
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return manifest, params


def save_checkpoint(model: SegmentationNet, directory, extra: dict | None = None) -> Path:
    header = {"model": model.config.to_dict()}
    if model.bank is not None:
        header["parameter_sets"] = list(model.bank.set_names)
        header["source_map"] = model.bank.source_map
    if extra:
        header["extra"] = extra
    params = {k: v.data for k, v in model.parameters().items()}
    return _write(directory, CHECKPOINT_KIND, header, params)


def load_checkpoint(directory) -> SegmentationNet:
    manifest, params = _read(directory, (CHECKPOINT_KIND,))
    try:
        config = ModelConfig.from_dict(manifest["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{directory}: bad model config ({exc})") from None
    model = build(config)
    try:
        load_state(model, params)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{directory}: {exc}") from None
    return model


def checkpoint_extra(directory) -> dict:
    manifest, _ = _read(directory, (CHECKPOINT_KIND,))
    return manifest.get("extra", {})


def save_bank(bank: ConditionBank, directory) -> Path:
    header = {
        "layer_count": len(bank.widths),
        "widths": list(bank.widths),
        "conditioning": bank.mode.to_dict(),
        "parameter_sets": list(bank.set_names),
    }
    return _write(directory, BANK_KIND, header, {k: v.data for k, v in bank.parameters().items()})


def load_bank(directory) -> ConditionBank:
    """Read a bank container, or pull the bank out of a checkpoint."""
    manifest, params = _read(directory, (BANK_KIND, CHECKPOINT_KIND))
    if manifest["format"] == CHECKPOINT_KIND:
        model = load_checkpoint(directory)
        if model.bank is None:
            raise FormatError(f"{directory}: image-conditioned checkpoints carry no parameter bank")
        return model.bank
    try:
        mode = ConditioningMode.from_dict(manifest["conditioning"])
        bank = ConditionBank(manifest["widths"], mode)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{directory}: bad bank header ({exc})") from None
    if len(bank.widths) != manifest["layer_count"]:
        raise FormatError(f"{directory}: layer_count disagrees with widths")
    expected = bank.parameters()
    if set(expected) != set(params):
        raise FormatError(f"{directory}: parameter names do not match the declared sets and widths")
    for name, arr in params.items():
        if expected[name].shape != arr.shape:
            raise FormatError(f"{directory}: {name} has shape {arr.shape}, expected {expected[name].shape}")
        expected[name].data[...] = arr
    return bank
