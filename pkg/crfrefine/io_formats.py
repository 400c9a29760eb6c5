"""File formats.

DTEN v1 tensor container (all integers little-endian, no padding):

    offset 0   4 bytes   magic "DTEN"
    offset 4   1 byte    version = 0x01
    offset 5   1 byte    dtype: 0x01 float32, 0x02 uint8, 0x03 uint16
    offset 6   1 byte    ndim (>= 1)
    offset 7   4 * ndim  dims, uint32 each, outermost first
    then       payload   product(dims) elements, row-major

Masks are binary PGM (P5, maxval 255): 0 is background, >= 128 is label 1.
The case manifest is a JSON document validated against `CaseManifest`.
"""
import json
import struct
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

from crfrefine.errors import FormatError, InvalidInputError, ManifestError
from crfrefine.tensors import DenseTensor, LabelMask, ProbabilityMap, SliceImage
from crfrefine.validators import expand_vars_and_user

PathLike = Union[str, Path]

MAGIC = b"DTEN"
VERSION = 0x01
DTYPE_CODES = {
    0x01: np.dtype("<f4"),
    0x02: np.dtype("u1"),
    0x03: np.dtype("<u2"),
}
_CODE_OF = {np.dtype(np.float32): 0x01, np.dtype(np.uint8): 0x02, np.dtype(np.uint16): 0x03}
_FIXED_HEADER = 7

PGM_MAXVAL = 255
PGM_THRESHOLD = 128

MANIFEST_SCHEMA_VERSION = 1


# --- DTEN -------------------------------------------------------------------

def encode_tensor(t: DenseTensor) -> bytes:
    if len(t.dims) > 255:
        raise InvalidInputError(f"DTEN holds at most 255 dims, got {len(t.dims)}")
    if any(d > 0xFFFFFFFF for d in t.dims):
        raise InvalidInputError(f"extent too large for DTEN: {t.dims}")
    code = _CODE_OF[t.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, len(t.dims))
    header += struct.pack(f"<{len(t.dims)}I", *t.dims)
    return header + t.data.astype(DTYPE_CODES[code], copy=False).tobytes()


def _parse_header(data: bytes) -> Tuple[np.dtype, Tuple[int, ...], int]:
    """Validate the header; return element type, dims and the payload offset."""
    if len(data) < 4:
        raise FormatError("truncated", "file ends inside the magic", len(data))
    if data[:4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {bytes(data[:4])!r}", 0)
    if len(data) < _FIXED_HEADER:
        raise FormatError("truncated", "file ends inside the fixed header", len(data))
    version, code, ndim = data[4], data[5], data[6]
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}", 4)
    if code not in DTYPE_CODES:
        raise FormatError("dtype", f"unknown dtype code 0x{code:02x}", 5)
    if ndim == 0:
        raise FormatError("header", "ndim must be at least 1", 6)
    payload_offset = _FIXED_HEADER + 4 * ndim
    if len(data) < payload_offset:
        raise FormatError("truncated", "file ends inside the dims", len(data))
    dims = struct.unpack_from(f"<{ndim}I", data, _FIXED_HEADER)
    for i, extent in enumerate(dims):
        if extent == 0:
            raise FormatError("header", f"dim {i} is zero", _FIXED_HEADER + 4 * i)
    return DTYPE_CODES[code], dims, payload_offset


def decode_tensor(data: bytes) -> DenseTensor:
    dtype, dims, offset = _parse_header(data)
    count = 1
    for extent in dims:
        count *= extent
    end = offset + count * dtype.itemsize
    if len(data) < end:
        raise FormatError(
            "truncated", f"payload needs {end - offset} bytes, found {len(data) - offset}", len(data)
        )
    if len(data) > end:
        raise FormatError("trailing", f"{len(data) - end} bytes after the payload", end)
    values = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return DenseTensor(dims=dims, data=values.astype(dtype.newbyteorder("="), copy=True))


def write_tensor(t: DenseTensor, path: PathLike) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path: PathLike) -> DenseTensor:
    return decode_tensor(Path(path).read_bytes())


def peek_dims(path: PathLike) -> Tuple[int, ...]:
    """Dims of a DTEN or PGM file from its header, without reading the payload."""
    path = Path(path)
    with open(path, "rb") as file:
        head = file.read(_FIXED_HEADER + 4 * 255 if path.suffix != ".pgm" else 4096)
    if path.suffix == ".pgm":
        width, height, _, _ = _parse_pgm_header(head)
        return height, width
    return _parse_header(head)[1]


# --- PGM / PPM --------------------------------------------------------------

def _parse_pgm_header(data: bytes) -> Tuple[int, int, int, int]:
    """Return width, height, maxval and the payload offset of a P5 header."""
    if len(data) < 2:
        raise FormatError("truncated", "file ends inside the magic", len(data))
    magic = bytes(data[:2])
    if magic == b"P2":
        raise FormatError("ascii", "ASCII PGM (P2) is not supported", 0)
    if magic != b"P5":
        raise FormatError("magic", f"expected b'P5', found {magic!r}", 0)

    pos = 2
    fields: List[int] = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError("truncated", "file ends inside the header", pos)
        char = data[pos:pos + 1]
        if char.isspace():
            pos += 1
        elif char == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("truncated", "file ends inside a comment", len(data))
            pos = end + 1
        elif char.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            if pos - start > 9:
                raise FormatError("header", "header value too large", start)
            fields.append(int(data[start:pos]))
        else:
            raise FormatError("header", f"unexpected byte {char!r}", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("header", "missing whitespace before the raster", pos)
    width, height, maxval = fields
    if width == 0 or height == 0:
        raise FormatError("header", f"empty raster {width}x{height}", pos)
    if maxval != PGM_MAXVAL:
        raise FormatError("maxval", f"maxval must be {PGM_MAXVAL}, got {maxval}", pos)
    return width, height, maxval, pos + 1


def decode_pgm(data: bytes) -> np.ndarray:
    width, height, _, offset = _parse_pgm_header(data)
    end = offset + width * height
    if len(data) < end:
        raise FormatError("truncated", f"raster needs {width * height} bytes", len(data))
    if len(data) > end:
        raise FormatError("trailing", f"{len(data) - end} bytes after the raster", end)
    return np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset) \
        .reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    return f"P5\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii") + pixels.tobytes()


def decode_pgm_mask(data: bytes) -> LabelMask:
    pixels = decode_pgm(data)
    ambiguous = (pixels > 0) & (pixels < PGM_THRESHOLD)
    if ambiguous.any():
        first = int(np.flatnonzero(ambiguous)[0])
        offset = len(data) - pixels.size + first
        raise FormatError("ambiguous", f"pixel value {int(pixels.flat[first])} is neither 0 nor >= 128", offset)
    return LabelMask((pixels >= PGM_THRESHOLD).astype(np.uint8))


def read_pgm_mask(path: PathLike) -> LabelMask:
    return decode_pgm_mask(Path(path).read_bytes())


def write_pgm_mask(mask: LabelMask, path: PathLike) -> None:
    if mask.n_labels != 2:
        raise InvalidInputError("PGM masks hold two labels; store other masks as uint8 DTEN")
    Path(path).write_bytes(encode_pgm(np.where(mask.label > 0, 255, 0)))


def write_pgm_image(pixels: np.ndarray, path: PathLike) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def write_ppm(rgb: np.ndarray, path: PathLike) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InvalidInputError(f"PPM needs H x W x 3 pixels, got {rgb.shape}")
    height, width, _ = rgb.shape
    header = f"P6\n{width} {height}\n{PGM_MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


# --- slice loaders ------------------------------------------------------------

def load_image(path: PathLike) -> SliceImage:
    path = Path(path)
    if path.suffix == ".pgm":
        return SliceImage(decode_pgm(path.read_bytes()).astype(np.float32))
    tensor = read_tensor(path)
    if len(tensor.dims) != 2:
        raise InvalidInputError(f"{path}: image tensor must be 2D, got dims {tensor.dims}")
    return SliceImage(tensor.to_array().astype(np.float32))


def load_prob(path: PathLike) -> ProbabilityMap:
    tensor = read_tensor(path)
    if len(tensor.dims) != 3 or tensor.dtype != np.float32:
        raise InvalidInputError(f"{path}: probabilities must be float32 H x W x L, got {tensor.dims}")
    return ProbabilityMap.load(tensor.to_array())


def load_mask(path: PathLike, n_labels: int = 2) -> LabelMask:
    path = Path(path)
    if path.suffix == ".pgm":
        return read_pgm_mask(path)
    tensor = read_tensor(path)
    if len(tensor.dims) != 2 or tensor.dtype != np.uint8:
        raise InvalidInputError(f"{path}: label tensor must be uint8 H x W, got {tensor.dims}")
    return LabelMask(tensor.to_array(), n_labels=n_labels)


def save_mask(mask: LabelMask, path: PathLike) -> None:
    if Path(path).suffix == ".pgm":
        write_pgm_mask(mask, path)
    else:
        write_tensor(DenseTensor.from_array(mask.label), path)


# --- manifest -----------------------------------------------------------------

class SliceEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_path: str = Field(min_length=1)
    prob_path: str = Field(min_length=1)
    truth_path: Optional[str] = Field(default=None, min_length=1)


class CaseEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    case_id: str = Field(min_length=1)
    slices: List[SliceEntry] = Field(min_length=1)


class CaseManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: int = MANIFEST_SCHEMA_VERSION
    cases: List[CaseEntry] = Field(min_length=1)
    fold_count: Optional[int] = Field(default=None, ge=2)
    folds: Optional[Dict[str, int]] = None

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    def resolve(self, relative: str) -> Path:
        path = Path(expand_vars_and_user(relative))
        return path if path.is_absolute() else self._base_dir / path

    def case_ids(self) -> List[str]:
        return [case.case_id for case in self.cases]


def _json_path(loc: Tuple) -> str:
    out = "$"
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else f".{part}"
    return out


def _cross_check(manifest: CaseManifest) -> List[Tuple[str, str]]:
    issues = []
    for c, case in enumerate(manifest.cases):
        for s, entry in enumerate(case.slices):
            where = f"$.cases[{c}].slices[{s}]"
            dims = {}
            for name in ("image_path", "prob_path", "truth_path"):
                relative = getattr(entry, name)
                if relative is None:
                    continue
                path = manifest.resolve(relative)
                if not path.is_file():
                    issues.append((f"{where}.{name}", f"file not found: {path}"))
                    continue
                try:
                    dims[name] = tuple(peek_dims(path))
                except (FormatError, OSError) as e:
                    issues.append((f"{where}.{name}", str(e)))
            image = dims.get("image_path")
            prob = dims.get("prob_path")
            truth = dims.get("truth_path")
            if prob is not None and len(prob) != 3:
                issues.append((f"{where}.prob_path", f"expected H x W x L dims, got {prob}"))
            elif image is not None and prob is not None and prob[:2] != image:
                issues.append((f"{where}.prob_path", f"dims {prob[:2]} disagree with image dims {image}"))
            if image is not None and truth is not None and truth != image:
                issues.append((f"{where}.truth_path", f"dims {truth} disagree with image dims {image}"))
    return issues


def parse_manifest(text: str, base_dir: PathLike = ".", check_files: bool = True) -> CaseManifest:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ManifestError([("$", f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})")]) from e
    except (ValueError, RecursionError) as e:
        raise ManifestError([("$", f"unreadable JSON: {type(e).__name__}")]) from e

    try:
        manifest = CaseManifest.model_validate(document)
    except ValidationError as e:
        raise ManifestError([(_json_path(err["loc"]), err["msg"]) for err in e.errors()]) from e
    manifest._base_dir = Path(base_dir)  # pylint: disable=protected-access

    issues = []
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION:
        issues.append(("$.schema_version", f"unsupported schema version {manifest.schema_version}"))
    seen = set()
    for c, case in enumerate(manifest.cases):
        if case.case_id in seen:
            issues.append((f"$.cases[{c}].case_id", f"duplicate case id {case.case_id!r}"))
        seen.add(case.case_id)
    if manifest.folds is not None:
        k = manifest.fold_count
        for case_id, fold in manifest.folds.items():
            if case_id not in seen:
                issues.append((f"$.folds.{case_id}", "unknown case id"))
            elif fold < 0 or (k is not None and fold >= k):
                issues.append((f"$.folds.{case_id}", f"fold index {fold} out of range"))
    if check_files and not issues:
        issues.extend(_cross_check(manifest))
    if issues:
        raise ManifestError(issues)
    return manifest


def read_manifest(path: PathLike, check_files: bool = True) -> CaseManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ManifestError([("$", f"not UTF-8 text: {e.reason}")]) from e
    return parse_manifest(text, path.resolve().parent, check_files)


def manifest_to_json(manifest: CaseManifest) -> str:
    return json.dumps(manifest.model_dump(exclude_none=True), indent=2) + "\n"


def write_manifest(manifest: CaseManifest, path: PathLike) -> None:
    Path(path).write_text(manifest_to_json(manifest), encoding="utf-8")
