"""
Self-describing checkpoint container.

    magic "TIUE" | version u32 LE | header length u64 LE | JSON header | tensor payload (LE, table order)

One format serves teacher, student and LoRA weights. Student checkpoints store EMA weights
under the plain parameter names, raw weights under `raw.` and LoRA factors under `lora.`.
"""
import json
import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .constant import CHECKPOINT_MAGIC, CHECKPOINT_PREAMBLE_BYTES, CHECKPOINT_VERSION, LORA_PREFIX, RAW_PREFIX
from .diffusion.lora import LoRAParams
from .diffusion.schedule import NoiseSchedule, SamplerPlan
from .diffusion.unet import UNetParams
from .errors import Corrupt, VersionUnsupported
from .logs import error_and_raise, escape, logger
from .models.checkpoint_models import CheckpointHeader, TensorEntry, TrainingMeta
from .models.config_models import ScheduleConfig, UNetConfig

_PREAMBLE = struct.Struct("<4sIQ")
_LE_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    header: CheckpointHeader
    arrays: Dict[str, np.ndarray]

    @property
    def unet_config(self) -> UNetConfig:
        return UNetConfig(**self.header.unet_config)

    @property
    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(**self.header.schedule_params)

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_config(self.schedule_config)

    @property
    def plan(self) -> SamplerPlan | None:
        plan = self.header.sampler_plan
        return SamplerPlan(**plan) if plan is not None else None

    @property
    def meta(self) -> TrainingMeta:
        return self.header.training_meta

    def unet_params(self, prefix: str = "", requires_grad: bool = False) -> UNetParams:
        """UNet weights stored under `prefix` (empty for the served weights, `raw.` for raw student weights)."""
        if prefix:
            arrays = {n[len(prefix):]: a for n, a in self.arrays.items() if n.startswith(prefix)}
        else:
            arrays = {n: a for n, a in self.arrays.items()
                      if not n.startswith(RAW_PREFIX) and not n.startswith(LORA_PREFIX)}
        return UNetParams.from_arrays(self.unet_config, arrays, requires_grad=requires_grad)

    def lora_params(self) -> LoRAParams | None:
        if self.meta.lora_rank is None or not any(n.startswith(LORA_PREFIX) for n in self.arrays):
            return None
        return LoRAParams.from_arrays(self.arrays, self.meta.lora_rank, self.meta.lora_alpha)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], unet_config: UNetConfig,
                    schedule_config: ScheduleConfig, plan: SamplerPlan | None = None,
                    meta: TrainingMeta | None = None) -> Path:
    """Write atomically: the file appears complete or not at all."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _LE_DTYPES:
            error_and_raise(f"cannot store {name} with dtype {arr.dtype}", Corrupt)
        blob = np.ascontiguousarray(arr, dtype=_LE_DTYPES[arr.dtype.name]).tobytes()
        entries.append(TensorEntry(name=name, dtype=arr.dtype.name, shape=list(arr.shape),
                                   byte_offset=offset, byte_len=len(blob)))
        blobs.append(blob)
        offset += len(blob)

    header = CheckpointHeader(
        unet_config=unet_config.model_dump(mode="json"),
        schedule_params=schedule_config.model_dump(mode="json"),
        sampler_plan=plan.model_dump(mode="json") if plan is not None else None,
        tensors=entries,
        training_meta=meta or TrainingMeta(),
    )
    header_bytes = header.model_dump_json(by_alias=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)
    logger.info(f"Saved checkpoint <green>{escape(path)}</green> ({len(entries)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Validate the whole container before materialising any tensor."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        error_and_raise(f"cannot read checkpoint {path}: {e}", Corrupt)

    if len(raw) < CHECKPOINT_PREAMBLE_BYTES:
        error_and_raise(f"{path} is too short to be a checkpoint", Corrupt)
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        error_and_raise(f"{path} is not a checkpoint (bad magic {magic!r})", Corrupt)
    if version != CHECKPOINT_VERSION:
        error_and_raise(f"{path} has format version {version}, only {CHECKPOINT_VERSION} is supported",
                        VersionUnsupported)
    if CHECKPOINT_PREAMBLE_BYTES + header_len > len(raw):
        error_and_raise(f"{path}: header runs past the end of the file", Corrupt)

    header_bytes = raw[CHECKPOINT_PREAMBLE_BYTES:CHECKPOINT_PREAMBLE_BYTES + header_len]
    try:
        header = CheckpointHeader(**json.loads(header_bytes.decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError, TypeError) as e:
        error_and_raise(f"{path}: invalid header: {e}", Corrupt)

    payload_start = CHECKPOINT_PREAMBLE_BYTES + header_len
    if len(raw) != payload_start + header.payload_bytes:
        error_and_raise(f"{path}: expected {payload_start + header.payload_bytes} bytes, found {len(raw)}", Corrupt)

    arrays = {}
    for entry in header.tensors:
        dtype = _LE_DTYPES[entry.dtype]
        arr = np.frombuffer(raw, dtype=dtype, count=entry.byte_len // dtype.itemsize,
                            offset=payload_start + entry.byte_offset)
        arrays[entry.name] = arr.reshape(entry.shape).astype(np.dtype(entry.dtype), copy=True)
    ckpt = Checkpoint(header=header, arrays=arrays)
    try:
        _ = (ckpt.unet_config, ckpt.schedule_config, ckpt.plan)
    except (ValidationError, TypeError) as e:
        error_and_raise(f"{path}: header describes an invalid model: {e}", Corrupt)
    logger.debug(f"Loaded checkpoint {escape(path)} ({len(arrays)} tensors)")
    return ckpt


def student_arrays(ema: UNetParams, raw: UNetParams, lora: LoRAParams | None) -> Dict[str, np.ndarray]:
    """EMA weights under the plain names (served at inference), raw weights and LoRA factors namespaced."""
    arrays = dict(ema.arrays())
    arrays.update({f"{RAW_PREFIX}{n}": a for n, a in raw.arrays().items()})
    if lora is not None:
        arrays.update(lora.arrays())
    return arrays
