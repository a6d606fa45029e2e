"""Versioned binary checkpoints: config snapshot plus named float64 sections.

Layout: magic "GMG1" | version u32 | payload length u64 | crc32 u32 | payload.
The payload holds a JSON config blob and little-endian float64 arrays; the
CRC covers the payload, and load refuses on any magic/version/CRC mismatch.
Round-trips are bit-exact.
"""

import dataclasses
import json
import struct
import zlib

import numpy as np

from .encoder import ModelProfile
from .errors import CheckpointError

MAGIC = b"GMG1"
VERSION = 1


def _pack_sections(sections):
    out = [struct.pack("<I", len(sections))]
    for name, arr in sections:
        arr = np.asarray(arr, dtype="<f8")
        shape = arr.shape  # kept before ascontiguousarray promotes 0-d to 1-d
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<I", len(shape)))
        out.append(struct.pack("<%dQ" % len(shape), *shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint payload")
        piece = self.blob[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _unpack_sections(reader):
    count = reader.u32()
    sections = []
    for _ in range(count):
        name = reader.take(reader.u32()).decode("utf-8")
        ndim = reader.u32()
        shape = struct.unpack("<%dQ" % ndim, reader.take(8 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").reshape(shape)
        sections.append((name, data.copy()))
    return sections


def config_to_blob(config, vocab_tokens, style_labels=0, extra=None):
    cfg = dataclasses.asdict(config)  # recurses into a ModelProfile profile
    blob = {"train_config": cfg, "vocab_tokens": list(vocab_tokens),
            "style_labels": style_labels}
    if extra:
        blob["extra"] = extra
    return blob


def write_checkpoint(path, sections, config_blob):
    config_bytes = json.dumps(config_blob, sort_keys=True).encode("utf-8")
    payload = (struct.pack("<I", len(config_bytes)) + config_bytes
               + _pack_sections(sections))
    header = (MAGIC + struct.pack("<I", VERSION)
              + struct.pack("<Q", len(payload))
              + struct.pack("<I", zlib.crc32(payload)))
    with open(path, "wb") as f:
        f.write(header + payload)


def read_checkpoint(path):
    """Returns (config_blob, sections dict). Refuses corrupt files."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError("not a GMG1 checkpoint")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError("unsupported checkpoint version %d" % version)
    length = struct.unpack("<Q", raw[8:16])[0]
    crc = struct.unpack("<I", raw[16:20])[0]
    payload = raw[20:]
    if len(payload) != length:
        raise CheckpointError("checkpoint payload length mismatch")
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    reader = _Reader(payload)
    config_blob = json.loads(reader.take(reader.u32()).decode("utf-8"))
    sections = dict(_unpack_sections(reader))
    return config_blob, sections


# ---------------------------------------------------------------------------
# model-level save/load
# ---------------------------------------------------------------------------

def save_models(path, models, vocab, optimizers=None, extra=None):
    sections = [(name, t.values) for name, t in models.all_tensors()]
    sections.append(("meta.feature_norm", np.array([models.feature_norm])))
    sections.append(("meta.pretrained", np.array([1.0 if models.pretrained
                                                  else 0.0])))
    if optimizers is not None:
        for group in ("generator", "guider", "discriminator"):
            opt = getattr(optimizers, group)
            for name, arr in opt.state_arrays():
                sections.append(("optim.%s.%s" % (group, name), arr))
    blob = config_to_blob(models.config, vocab.id_to_token,
                          style_labels=models.guider.num_labels, extra=extra)
    write_checkpoint(path, sections, blob)


def load_models(path):
    """Rebuild Models (and optimizer state, when present) from a checkpoint.

    Returns (models, vocab, optimizers_or_None, config_blob).
    """
    from .corpus import Vocabulary
    from .trainer import Models, Optimizers, TrainConfig

    blob, sections = read_checkpoint(path)
    cfg = dict(blob["train_config"])
    if isinstance(cfg.get("profile"), dict):
        cfg["profile"] = ModelProfile(
            embed_dim=cfg["profile"]["embed_dim"],
            feature_dim=cfg["profile"]["feature_dim"],
            hidden_dim=cfg["profile"]["hidden_dim"],
            conv_channels=tuple(cfg["profile"]["conv_channels"]),
            conv_widths=tuple(cfg["profile"]["conv_widths"]),
            conv_strides=tuple(cfg["profile"]["conv_strides"]),
            max_len=cfg["profile"]["max_len"])
    config = TrainConfig(**cfg)
    vocab = Vocabulary(blob["vocab_tokens"])
    models = Models(len(vocab), config, style_labels=blob.get("style_labels", 0))
    for name, t in models.all_tensors():
        if name not in sections:
            raise CheckpointError("checkpoint missing section %r" % name)
        arr = sections[name]
        if arr.shape != t.values.shape:
            raise CheckpointError("section %r has shape %r, expected %r"
                                  % (name, arr.shape, t.values.shape))
        t.values[...] = arr
    models.feature_norm = float(sections["meta.feature_norm"][0])
    models.pretrained = bool(sections["meta.pretrained"][0])

    optimizers = None
    if any(name.startswith("optim.") for name in sections):
        optimizers = Optimizers(models, config)
        for group in ("generator", "guider", "discriminator"):
            prefix = "optim.%s." % group
            arrays = [(name[len(prefix):], arr)
                      for name, arr in sections.items()
                      if name.startswith(prefix)]
            getattr(optimizers, group).load_state_arrays(arrays)
    return models, vocab, optimizers, blob
