"""Self-describing single-file checkpoints.

Layout: 4-byte magic, a little-endian uint32 header length, a canonical
JSON header (model config, vocabulary, schedule constants, training info,
parameter manifest, blob checksum), then raw little-endian float32
parameter data in manifest order.  Serialization is canonical so that
save(load(f)) reproduces ``f`` byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .diffusion import DiffusionSchedule, build_schedule
from .errors import DataError
from .vocab import MODALITIES, Vocabulary

MAGIC = b"LGCP"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: DenoiserConfig
    vocab: Vocabulary
    schedule: DiffusionSchedule
    params: dict = field(repr=False, default_factory=dict)  # name -> float32 array
    ema_loss: float = float("nan")
    steps: int = 0

    @classmethod
    def from_model(cls, model: Denoiser, vocab: Vocabulary,
                   schedule: DiffusionSchedule, ema_loss: float = float("nan"),
                   steps: int = 0) -> "Checkpoint":
        params = {name: np.ascontiguousarray(p.data, dtype="<f4")
                  for name, p in model.named_params()}
        return cls(model.config, vocab, schedule, params, float(ema_loss), steps)

    def build_model(self) -> Denoiser:
        model = Denoiser(self.config, self.vocab, np.random.default_rng(0))
        model.load_state(self.params)
        return model


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                    for v in ckpt.params.values())
    header = {
        "version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "vocab": json.loads(ckpt.vocab.to_json()),
        "schedule": {"timesteps": ckpt.schedule.timesteps,
                     "alpha_bar_T": float(ckpt.schedule.alpha_bar[-1]),
                     "gamma_bar_T": float(ckpt.schedule.gamma_bar[-1])},
        "train": {"ema_loss": ckpt.ema_loss, "steps": ckpt.steps},
        "manifest": [{"name": n, "shape": list(v.shape)}
                     for n, v in ckpt.params.items()],
        "blob_crc32": zlib.crc32(blob),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError("CORRUPT_FILE", f"{path} is not a checkpoint")
    head_len = struct.unpack("<I", raw[4:8])[0]
    if len(raw) < 8 + head_len:
        raise DataError("CORRUPT_FILE", f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + head_len])
    except json.JSONDecodeError as err:
        raise DataError("CORRUPT_FILE", f"{path}: bad header: {err}") from err
    if header.get("version") != FORMAT_VERSION:
        raise DataError("VERSION_MISMATCH",
                        f"checkpoint version {header.get('version')} != {FORMAT_VERSION}")
    blob = raw[8 + head_len:]
    expect = sum(int(np.prod(m["shape"])) for m in header["manifest"]) * 4
    if len(blob) != expect:
        raise DataError("CORRUPT_FILE",
                        f"{path}: parameter blob is {len(blob)} bytes, expected {expect}")
    if zlib.crc32(blob) != header["blob_crc32"]:
        raise DataError("CORRUPT_FILE", f"{path}: checksum mismatch")

    params = {}
    offset = 0
    for m in header["manifest"]:
        shape = tuple(m["shape"])
        n = int(np.prod(shape)) * 4
        params[m["name"]] = np.frombuffer(blob[offset:offset + n],
                                          dtype="<f4").reshape(shape).copy()
        offset += n
    config = DenoiserConfig(**header["config"])
    vocab = Vocabulary.from_json(json.dumps(header["vocab"]))
    sched = build_schedule(header["schedule"]["timesteps"],
                           {m: vocab.ordinary_count(m) for m in MODALITIES},
                           alpha_bar_T=header["schedule"]["alpha_bar_T"],
                           gamma_bar_T=header["schedule"]["gamma_bar_T"])
    return Checkpoint(config, vocab, sched, params,
                      header["train"]["ema_loss"], header["train"]["steps"])
