"""
On-disk case format.

A case is a directory holding ``header.txt`` and one raw little-endian blob per
modality (``<modality>.bin``) plus ``mask.bin`` (one byte per voxel) when the
case carries a ground-truth mask. The header is canonical text, one
``key = value`` pair per line, always in this order::

    format = lesionseg-case
    version = 1
    case_id = case_0000
    extents = 16 32 32
    spacing = 3.0 0.5 0.5
    modalities = t2w adc dwi
    dtype = float32
    byte_order = little
    mask = true
    lesion_count = 1

On load the mask must hold only 0 and 1 and its 6-connected component count
must equal ``lesion_count``. The ellipsoid parameters of generated lesions are
not stored; a loaded mask has an empty ``lesions`` list.
"""

import logging
from pathlib import Path

import numpy as np

from lesionseg.errors import CaseFormatError
from lesionseg.phantom import LesionMask, Volume, count_components

logger = logging.getLogger(__name__)

CASE_FORMAT = "lesionseg-case"
CASE_VERSION = 1
HEADER_FILE = "header.txt"
MASK_FILE = "mask.bin"
HEADER_KEYS = (
    "format",
    "version",
    "case_id",
    "extents",
    "spacing",
    "modalities",
    "dtype",
    "byte_order",
    "mask",
    "lesion_count",
)
SUPPORTED_DTYPES = ("float32", "float64")


def _format_header(volume: Volume, mask: LesionMask | None) -> str:
    values = {
        "format": CASE_FORMAT,
        "version": str(CASE_VERSION),
        "case_id": volume.case_id,
        "extents": " ".join(str(n) for n in volume.extents),
        "spacing": " ".join(repr(float(s)) for s in volume.spacing),
        "modalities": " ".join(volume.modalities),
        "dtype": volume.data.dtype.name,
        "byte_order": "little",
        "mask": "true" if mask is not None else "false",
        "lesion_count": str(mask.lesion_count if mask is not None else 0),
    }
    return "".join(f"{key} = {values[key]}\n" for key in HEADER_KEYS)


def save_case(path: str | Path, volume: Volume, mask: LesionMask | None = None) -> Path:
    """
    Write a case directory.

    Args:
        path: Directory to create (parents included)
        volume: Multi-modal intensities
        mask: Ground truth; omitted for exported heatmaps

    Returns:
        The case directory
    """
    path = Path(path)
    if volume.data.dtype.name not in SUPPORTED_DTYPES:
        raise CaseFormatError("dtype", f"unsupported volume dtype {volume.data.dtype}")
    if mask is not None and mask.extents != volume.extents:
        raise CaseFormatError(
            "extents", f"mask extents {mask.extents} differ from volume {volume.extents}"
        )
    path.mkdir(parents=True, exist_ok=True)
    little = volume.data.dtype.newbyteorder("<")
    for index, name in enumerate(volume.modalities):
        (path / f"{name}.bin").write_bytes(volume.data[index].astype(little).tobytes())
    if mask is not None:
        (path / MASK_FILE).write_bytes(mask.data.astype(np.uint8).tobytes())
    (path / HEADER_FILE).write_text(_format_header(volume, mask), encoding="utf-8")
    logger.debug(f"Saved case {volume.case_id} to {path}")
    return path


def read_header(path: str | Path) -> dict[str, str]:
    header_path = Path(path) / HEADER_FILE
    if not header_path.exists():
        raise CaseFormatError("header", f"{header_path} not found")
    entries: dict[str, str] = {}
    for number, line in enumerate(header_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CaseFormatError("header", f"line {number} is not 'key = value': {line!r}")
        entries[key.strip()] = value.strip()
    for key in HEADER_KEYS:
        if key not in entries:
            raise CaseFormatError(key, "missing from header")
    unknown = sorted(set(entries) - set(HEADER_KEYS))
    if unknown:
        raise CaseFormatError(unknown[0], "unknown header field")
    return entries


def _parse_numbers(entries: dict[str, str], key: str, kind, count: int) -> tuple:
    try:
        values = tuple(kind(v) for v in entries[key].split())
    except ValueError as e:
        raise CaseFormatError(key, f"cannot parse {entries[key]!r}") from e
    if len(values) != count:
        raise CaseFormatError(key, f"expected {count} values, got {len(values)}")
    return values


def _read_blob(path: Path, field: str, dtype: np.dtype, extents: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise CaseFormatError(field, f"payload {path.name} not found")
    payload = path.read_bytes()
    expected = int(np.prod(extents)) * dtype.itemsize
    if len(payload) < expected:
        raise CaseFormatError(field, f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) != expected:
        raise CaseFormatError(
            field,
            f"payload has {len(payload)} bytes, header extents {extents} require {expected}",
        )
    return np.frombuffer(payload, dtype=dtype).reshape(extents).astype(dtype.newbyteorder("="))


def load_case(path: str | Path) -> tuple[Volume, LesionMask | None]:
    """
    Read a case directory written by ``save_case``.

    Raises:
        CaseFormatError: Naming the header field or payload that is invalid
    """
    path = Path(path)
    entries = read_header(path)
    if entries["format"] != CASE_FORMAT:
        raise CaseFormatError("format", f"expected {CASE_FORMAT!r}, got {entries['format']!r}")
    if entries["version"] != str(CASE_VERSION):
        raise CaseFormatError("version", f"unsupported version {entries['version']!r}")
    if entries["byte_order"] != "little":
        raise CaseFormatError("byte_order", f"unsupported byte order {entries['byte_order']!r}")
    if entries["dtype"] not in SUPPORTED_DTYPES:
        raise CaseFormatError("dtype", f"unsupported dtype {entries['dtype']!r}")
    if entries["mask"] not in ("true", "false"):
        raise CaseFormatError("mask", f"expected true or false, got {entries['mask']!r}")

    extents = _parse_numbers(entries, "extents", int, 3)
    if any(n < 1 for n in extents):
        raise CaseFormatError("extents", f"extents must be positive, got {extents}")
    spacing = _parse_numbers(entries, "spacing", float, 3)
    modalities = tuple(entries["modalities"].split())
    if not modalities:
        raise CaseFormatError("modalities", "no modalities listed")
    try:
        lesion_count = int(entries["lesion_count"])
    except ValueError as e:
        raise CaseFormatError("lesion_count", f"not an integer: {entries['lesion_count']!r}") from e

    dtype = np.dtype(entries["dtype"]).newbyteorder("<")
    data = np.stack(
        [_read_blob(path / f"{name}.bin", name, dtype, extents) for name in modalities]
    )
    volume = Volume(
        case_id=entries["case_id"], modalities=modalities, data=data, spacing=spacing
    )
    mask = None
    if entries["mask"] == "true":
        mask_data = _read_blob(path / MASK_FILE, "mask", np.dtype(np.uint8), extents)
        if not np.isin(mask_data, (0, 1)).all():
            raise CaseFormatError("mask", "mask values must be 0 or 1")
        components = count_components(mask_data)
        if components != lesion_count:
            raise CaseFormatError(
                "lesion_count", f"header says {lesion_count}, mask has {components} component(s)"
            )
        mask = LesionMask(data=mask_data, lesion_count=lesion_count)
    return volume, mask
