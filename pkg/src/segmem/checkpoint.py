"""Self-describing checkpoint container.

A checkpoint is a zip archive holding a JSON manifest (format version,
model config, optimizer step, caller metadata) plus one ``.npy`` entry per
named array. The ``.npy`` format keeps an explicit shape header and the
arrays are written little-endian, so the files are readable without this
package. Associative carry snapshots (A, z, memory tokens) can be embedded
the same way.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .assoc import AssociativeState, FeatureMapSpec
from .errors import CheckpointError
from .models import ModelConfig, RecurrentCarry, SegmentRecurrentModel, build_model
from .nn import Adam, AdamHyper

FORMAT_VERSION = 1

_LE_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.uint8: "|u1",
}


def model_config_to_dict(config: ModelConfig) -> dict:
    return asdict(config)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    fm = d.pop("feature_map", None)
    known = set(ModelConfig.__dataclass_fields__) - {"feature_map"}
    unknown = set(d) - known
    if unknown:
        raise CheckpointError(f"unknown model config field '{sorted(unknown)[0]}'")
    kwargs: dict[str, Any] = dict(d)
    if fm is not None:
        kwargs["feature_map"] = FeatureMapSpec(**fm)
    return ModelConfig(**kwargs)


def _to_le_array(t: torch.Tensor) -> np.ndarray:
    dtype = _LE_DTYPES.get(t.dtype)
    if dtype is None:
        raise CheckpointError(f"unsupported tensor dtype {t.dtype}")
    return t.detach().cpu().numpy().astype(dtype, copy=False)


def _write_array(zf: zipfile.ZipFile, name: str, t: torch.Tensor) -> None:
    buf = io.BytesIO()
    np.save(buf, _to_le_array(t))
    zf.writestr(name, buf.getvalue())


def _read_array(zf: zipfile.ZipFile, name: str) -> np.ndarray:
    with zf.open(name) as f:
        return np.load(io.BytesIO(f.read()))


def save_checkpoint(
    path: str | Path,
    model: SegmentRecurrentModel,
    optimizer: Adam | None = None,
    extra: dict | None = None,
    carry: RecurrentCarry | None = None,
) -> Path:
    """Write model (and optionally optimizer state and a carry snapshot)
    plus the torch RNG state. `extra` is caller metadata (curriculum
    position, seeds, ...) stored verbatim in the manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {
        "format": "segmem-checkpoint",
        "version": FORMAT_VERSION,
        "config": model_config_to_dict(model.config),
        "dtype": str(model.dtype).removeprefix("torch."),
        "extra": extra or {},
        "has_optimizer": optimizer is not None,
        "has_carry": carry is not None,
    }
    if optimizer is not None:
        manifest["adam_step"] = optimizer.state.step
        manifest["adam_hyper"] = asdict(optimizer.hyper)
    if carry is not None:
        manifest["carry_segments_seen"] = carry.segments_seen
        manifest["carry_mem_count"] = len(carry.mem)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for name, p in model.named_parameters():
            _write_array(zf, f"params/{name}.npy", p)
        if optimizer is not None:
            for name in optimizer.params:
                _write_array(zf, f"adam/m/{name}.npy", optimizer.state.m[name])
                _write_array(zf, f"adam/v/{name}.npy", optimizer.state.v[name])
        if carry is not None:
            for i, m in enumerate(carry.mem):
                _write_array(zf, f"carry/mem_{i}.npy", m)
            if carry.assoc is not None:
                for i, st in enumerate(carry.assoc):
                    _write_array(zf, f"carry/A_{i}.npy", st.A)
                    _write_array(zf, f"carry/z_{i}.npy", st.z)
        _write_array(zf, "rng/torch.npy", torch.random.get_rng_state())
    return path


class CheckpointBundle:
    def __init__(self, model, optimizer, extra, carry, manifest):
        self.model: SegmentRecurrentModel = model
        self.optimizer: Adam | None = optimizer
        self.extra: dict = extra
        self.carry: RecurrentCarry | None = carry
        self.manifest: dict = manifest


def load_checkpoint(
    path: str | Path,
    expected_config: ModelConfig | None = None,
    restore_rng: bool = False,
) -> CheckpointBundle:
    """Rebuild the model (and optimizer state if stored) from a checkpoint.

    If `expected_config` is given, any differing field is an error; this is
    how resume-time config drift and wrong-model loads are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} has no manifest.json") from None
        if manifest.get("format") != "segmem-checkpoint":
            raise CheckpointError(f"{path} is not a segmem checkpoint")
        if manifest.get("version") != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint version {manifest.get('version')} != supported {FORMAT_VERSION}"
            )
        config = model_config_from_dict(manifest["config"])
        if expected_config is not None and config != expected_config:
            for f in ModelConfig.__dataclass_fields__:
                if getattr(config, f) != getattr(expected_config, f):
                    raise CheckpointError(
                        f"checkpoint config mismatch on '{f}': "
                        f"stored {getattr(config, f)!r} != expected {getattr(expected_config, f)!r}"
                    )
        dtype = getattr(torch, manifest["dtype"])
        model = build_model(config, seed=0, dtype=dtype)
        params = dict(model.named_parameters())
        stored = {n[len("params/") : -len(".npy")] for n in zf.namelist() if n.startswith("params/")}
        if stored != set(params):
            missing = sorted(set(params) - stored) + sorted(stored - set(params))
            raise CheckpointError(f"checkpoint parameter set mismatch: {missing[:4]}")
        with torch.no_grad():
            for name, p in params.items():
                arr = _read_array(zf, f"params/{name}.npy")
                if tuple(arr.shape) != tuple(p.shape):
                    raise CheckpointError(f"shape mismatch for '{name}'")
                p.copy_(torch.from_numpy(arr.copy()))
        optimizer = None
        if manifest.get("has_optimizer"):
            optimizer = Adam(model.named_parameters(), AdamHyper(**manifest["adam_hyper"]))
            optimizer.state.step = int(manifest["adam_step"])
            with torch.no_grad():
                for name in optimizer.params:
                    optimizer.state.m[name].copy_(torch.from_numpy(_read_array(zf, f"adam/m/{name}.npy").copy()))
                    optimizer.state.v[name].copy_(torch.from_numpy(_read_array(zf, f"adam/v/{name}.npy").copy()))
        carry = None
        if manifest.get("has_carry"):
            mem = [
                torch.from_numpy(_read_array(zf, f"carry/mem_{i}.npy").copy()).to(dtype)
                for i in range(manifest["carry_mem_count"])
            ]
            assoc = None
            if config.uses_assoc:
                assoc = [
                    AssociativeState(
                        torch.from_numpy(_read_array(zf, f"carry/A_{i}.npy").copy()).to(dtype),
                        torch.from_numpy(_read_array(zf, f"carry/z_{i}.npy").copy()).to(dtype),
                    )
                    for i in range(config.layers)
                ]
            carry = RecurrentCarry(mem, assoc, manifest["carry_segments_seen"])
        if restore_rng:
            torch.random.set_rng_state(torch.from_numpy(_read_array(zf, "rng/torch.npy").copy()))
    return CheckpointBundle(model, optimizer, manifest.get("extra", {}), carry, manifest)
