"""Model checkpoints and their binary container.

Layout::

    u8        format version
    u32 LE    header length, then UTF-8 JSON {"config": {...}, "tensors": [{"name", "shape"}, ...]}
    f64 LE    tensor payloads, in header order, C-contiguous
    u32 LE    provenance length, then UTF-8 JSON provenance
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import CarprefError
from .model import DTYPE, CausalLM, ModelConfig

FORMAT_VERSION = 1


class CheckpointFormatError(CarprefError, ValueError):
    exit_code = 3


@dataclass(frozen=True)
class Provenance:
    phase: str = "init"  # init | pretrained | finetuned
    loss_variant: str | None = None
    beta: float | None = None
    learning_rate: float | None = None
    schedule: str = "linear"
    epoch: int = 0
    step: int = 0
    validation_loss: float | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    state: dict[str, torch.Tensor]
    provenance: Provenance = field(default_factory=Provenance)

    @classmethod
    def from_model(cls, model: CausalLM, provenance: Provenance | None = None) -> "ModelCheckpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.config, state, provenance or Provenance())

    def to_model(self) -> CausalLM:
        model = CausalLM(self.config)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def with_provenance(self, **changes) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, self.state, replace(self.provenance, **changes))


def as_model(obj) -> CausalLM:
    return obj.to_model() if isinstance(obj, ModelCheckpoint) else obj


def _blob(obj) -> bytes:
    data = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(data)) + data


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    names = list(ckpt.state)
    header = {
        "config": ckpt.config.to_dict(),
        "tensors": [{"name": n, "shape": list(ckpt.state[n].shape)} for n in names],
    }
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(_blob(header))
        for n in names:
            arr = ckpt.state[n].detach().to(DTYPE).contiguous().numpy()
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))
        fh.write(_blob(asdict(ckpt.provenance)))


def _read_blob(buf: memoryview, offset: int):
    if offset + 4 > len(buf):
        raise CheckpointFormatError("truncated checkpoint")
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + n > len(buf):
        raise CheckpointFormatError("truncated checkpoint")
    return json.loads(bytes(buf[offset : offset + n]).decode("utf-8")), offset + n


def load_checkpoint(path) -> ModelCheckpoint:
    buf = memoryview(Path(path).read_bytes())
    if not len(buf) or buf[0] != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint format in {path}")
    header, offset = _read_blob(buf, 1)
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(buf):
            raise CheckpointFormatError("truncated tensor payload")
        arr = np.frombuffer(buf[offset:end], dtype="<f8").reshape(t["shape"]).astype(np.float64)
        state[t["name"]] = torch.from_numpy(arr.copy())
        offset = end
    prov, offset = _read_blob(buf, offset)
    if offset != len(buf):
        raise CheckpointFormatError("trailing bytes after provenance")
    return ModelCheckpoint(ModelConfig(**header["config"]), state, Provenance(**prov))
