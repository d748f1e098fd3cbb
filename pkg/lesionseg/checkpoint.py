"""
Versioned binary checkpoint container.

Byte layout (all integers little-endian)::

    8 bytes   magic  b"LSEGCKPT"
    u32       format version (1)
    u32 n, n bytes   run config, canonical text, UTF-8
    u32 n, n bytes   metadata text ("phase = ...", "epoch = ..."), UTF-8
    u32       number of blobs
    per blob, in parameter order:
        u16 n, n bytes   name, UTF-8 ("backbone/head/weight", "text/embedding", ...)
        u8               ndim
        ndim x u32       shape
        u8               itemsize (4 or 8)
        payload          little-endian IEEE-754 values, row-major

The text embedding is stored as the blob ``text/embedding`` so that evaluation
needs nothing but the checkpoint.
"""

import logging
import struct
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from lesionseg.config import RunConfig, load_config_text
from lesionseg.errors import CaseFormatError
from lesionseg.guidance import TextEmbedding
from lesionseg.model import TextGuidedSegmenter

logger = logging.getLogger(__name__)

MAGIC = b"LSEGCKPT"
VERSION = 1
EMBEDDING_BLOB = "text/embedding"
REFINER_PREFIX = "refiner/"
_FLOAT_BY_SIZE = {4: "<f4", 8: "<f8"}


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config_text: str
    phase: str
    epoch: int = Field(..., ge=-1)
    blobs: dict[str, np.ndarray]

    @property
    def has_refiner(self) -> bool:
        return any(name.startswith(REFINER_PREFIX) for name in self.blobs)


def _encode_text(text: str) -> bytes:
    payload = text.encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


def _encode_blob(name: str, array: np.ndarray) -> bytes:
    if array.dtype.itemsize not in _FLOAT_BY_SIZE:
        raise CaseFormatError(name, f"unsupported blob dtype {array.dtype}")
    encoded_name = name.encode("utf-8")
    parts = [
        struct.pack("<H", len(encoded_name)),
        encoded_name,
        struct.pack("<B", array.ndim),
        struct.pack(f"<{array.ndim}I", *array.shape),
        struct.pack("<B", array.dtype.itemsize),
        np.ascontiguousarray(array, dtype=_FLOAT_BY_SIZE[array.dtype.itemsize]).tobytes(),
    ]
    return b"".join(parts)


def save_checkpoint(
    path: str | Path,
    model: TextGuidedSegmenter,
    config_text: str,
    phase: str,
    epoch: int,
) -> Path:
    """Write the model parameters and its text embedding."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = list(model.named_parameters())
    embedding = model.embedding.vector.astype(np.float64)
    chunks = [
        MAGIC,
        struct.pack("<I", VERSION),
        _encode_text(config_text),
        _encode_text(f"phase = {phase}\nepoch = {epoch}\n"),
        struct.pack("<I", len(blobs) + 1),
    ]
    chunks.extend(_encode_blob(name, param.data) for name, param in blobs)
    chunks.append(_encode_blob(EMBEDDING_BLOB, embedding))
    path.write_bytes(b"".join(chunks))
    logger.info(f"Wrote checkpoint {path} ({phase}, epoch {epoch}, {len(blobs)} parameters)")
    return path


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int, field: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise CaseFormatError(field, f"truncated: need {n} bytes at offset {self.offset}")
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, field: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def text(self, field: str) -> str:
        (n,) = self.unpack("<I", field)
        try:
            return self.take(n, field).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CaseFormatError(field, "not valid UTF-8") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint container.

    Raises:
        FileNotFoundError: If the file does not exist
        CaseFormatError: Naming the header field or blob that is invalid
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint {path} not found")
    reader = _Reader(path.read_bytes())
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CaseFormatError("magic", f"{path} is not a lesionseg checkpoint")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CaseFormatError("version", f"unsupported checkpoint version {version}")
    config_text = reader.text("config")
    meta = dict(
        (k.strip(), v.strip())
        for k, _, v in (line.partition("=") for line in reader.text("meta").splitlines() if line)
    )
    if "phase" not in meta or "epoch" not in meta:
        raise CaseFormatError("meta", "phase or epoch missing")

    (count,) = reader.unpack("<I", "blob_count")
    blobs: dict[str, np.ndarray] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"blob[{index}].name")
        name = reader.take(name_len, f"blob[{index}].name").decode("utf-8")
        (ndim,) = reader.unpack("<B", name)
        shape = reader.unpack(f"<{ndim}I", name)
        (itemsize,) = reader.unpack("<B", name)
        if itemsize not in _FLOAT_BY_SIZE:
            raise CaseFormatError(name, f"unsupported itemsize {itemsize}")
        dtype = np.dtype(_FLOAT_BY_SIZE[itemsize])
        payload = reader.take(int(np.prod(shape, dtype=np.int64)) * itemsize, name)
        blobs[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.offset != len(reader.payload):
        raise CaseFormatError("payload", f"{len(reader.payload) - reader.offset} trailing bytes")
    if EMBEDDING_BLOB not in blobs:
        raise CaseFormatError(EMBEDDING_BLOB, "text embedding missing")

    return Checkpoint(
        config_text=config_text, phase=meta["phase"], epoch=int(meta["epoch"]), blobs=blobs
    )


def restore_model(path: str | Path) -> tuple[RunConfig, TextGuidedSegmenter, Checkpoint]:
    """Rebuild the run config and the model (refiner included if stored) from a checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = load_config_text(ckpt.config_text)
    cfg.apply_precision()
    embedding = TextEmbedding(vector=ckpt.blobs[EMBEDDING_BLOB], source="file", path=str(path))
    model = TextGuidedSegmenter(cfg.backbone, cfg.guidance, embedding=embedding, seed=cfg.seed)
    if ckpt.has_refiner:
        model.attach_refiner(cfg.refiner)
    state = {k: v for k, v in ckpt.blobs.items() if k != EMBEDDING_BLOB}
    model.load_state_dict(state, strict=True)
    logger.info(f"Restored model from {path} (phase {ckpt.phase}, epoch {ckpt.epoch})")
    return cfg, model, ckpt
