"""Versioned persistence: model banks, feature files, manifests, reports.

This module owns every byte-level layout. Binary formats are a JSON
header followed by little-endian float32 blocks (banks) or pure
little-endian records (feature files); block sizes are checked before
reads and truncation errors name the missing block. All writes go through
a temp-file + rename so readers never observe partial files.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import (
    CorruptModelError,
    DecodeError,
    SchemaError,
    UnsupportedVersionError,
)
from .nr import BANK_VERSION, VARIANCE_FLOOR, DiagGmm, OrganModelBank, PcaModel

BANK_MAGIC = "USQB1"
FEATURE_MAGIC = b"USQF1"

# load-time tolerances are float32-aware: parameters are stored as float32
_WEIGHT_SUM_TOL = 1e-5
_FLOOR_SLACK = 1e-9


def artifact_timestamp() -> int:
    """Creation timestamp for artifact headers.

    Honors SOURCE_DATE_EPOCH and defaults to 0 so identical runs produce
    byte-identical artifacts.
    """
    return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))


def atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".usqm-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_bank(bank: OrganModelBank, path: str) -> None:
    """Serialize a bank: length-prefixed JSON header + float32 blocks."""
    organs = list(bank.organ_names)
    k = bank.organs[organs[0]].n_components
    header = {
        "magic": BANK_MAGIC,
        "version": bank.version,
        "created_at": bank.created_at,
        "config_hash": bank.config_hash,
        "extractor_fingerprint": bank.extractor_fingerprint,
        "descriptor_dim": bank.pca.input_dim,
        "pca_dim": bank.pca.output_dim,
        "components": k,
        "organs": organs,
        "layers": list(bank.layers),
        "tile_size": bank.tile_size,
        "stride": bank.stride,
    }
    head = json.dumps(header, sort_keys=True).encode()
    blocks = [
        _f32_bytes(bank.pca.mean),
        _f32_bytes(bank.pca.components),
        _f32_bytes(bank.pca.variances),
    ]
    for organ in organs:
        g = bank.organs[organ]
        blocks.extend([_f32_bytes(g.weights), _f32_bytes(g.means), _f32_bytes(g.variances)])
    payload = struct.pack("<I", len(head)) + head + b"".join(blocks)
    try:
        atomic_write_bytes(path, payload)
    except OSError as exc:
        raise CorruptModelError(f"{path}: cannot write bank ({exc})") from exc


class _BlockReader:
    def __init__(self, path: str, data: bytes, offset: int):
        self.path = path
        self.data = data
        self.pos = offset

    def floats(self, count: int, name: str) -> np.ndarray:
        nbytes = 4 * count
        if self.pos + nbytes > len(self.data):
            raise DecodeError(f"{self.path}: truncated file, missing block {name!r}")
        out = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.pos)
        self.pos += nbytes
        return out.astype(np.float64)


def load_bank(path: str) -> OrganModelBank:
    """Decode and re-validate a bank file (weights sum, variance floor)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read bank ({exc})") from exc
    if len(data) < 4:
        raise DecodeError(f"{path}: truncated file, missing block 'header length'")
    (head_len,) = struct.unpack_from("<I", data)
    if 4 + head_len > len(data):
        raise DecodeError(f"{path}: truncated file, missing block 'header'")
    try:
        header = json.loads(data[4 : 4 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"{path}: header is not valid JSON ({exc})") from exc
    version = header.get("version")
    if version != BANK_VERSION:
        raise UnsupportedVersionError(
            f"{path}: version {version!r} not supported (this build reads {BANK_VERSION!r})"
        )
    if header.get("magic") != BANK_MAGIC:
        raise DecodeError(f"{path}: bad magic {header.get('magic')!r}")

    dim = int(header["descriptor_dim"])
    d = int(header["pca_dim"])
    k = int(header["components"])
    organs = list(header["organs"])
    reader = _BlockReader(path, data, 4 + head_len)
    mean = reader.floats(dim, "pca mean")
    comps = reader.floats(d * dim, "pca components").reshape(d, dim)
    variances = reader.floats(d, "pca variances")
    pca = PcaModel(mean=mean, components=comps, variances=variances)

    models: dict[str, DiagGmm] = {}
    for organ in organs:
        w = reader.floats(k, f"{organ} weights")
        mu = reader.floats(k * d, f"{organ} means").reshape(k, d)
        var = reader.floats(k * d, f"{organ} variances").reshape(k, d)
        if abs(float(w.sum()) - 1.0) > _WEIGHT_SUM_TOL or np.any(w < 0):
            raise CorruptModelError(
                f"{path}: organ {organ!r} weights sum to {float(w.sum()):.9f}"
            )
        if np.any(var < VARIANCE_FLOOR - _FLOOR_SLACK):
            raise CorruptModelError(
                f"{path}: organ {organ!r} has variances below the {VARIANCE_FLOOR} floor"
            )
        models[organ] = DiagGmm(weights=w, means=mu, variances=var)
    if reader.pos != len(data):
        raise DecodeError(f"{path}: {len(data) - reader.pos} trailing bytes after last block")
    return OrganModelBank(
        pca=pca,
        organs=models,
        extractor_fingerprint=header["extractor_fingerprint"],
        layers=tuple(int(l) for l in header["layers"]),
        tile_size=int(header["tile_size"]),
        stride=int(header["stride"]),
        version=version,
        created_at=int(header.get("created_at", 0)),
        config_hash=header.get("config_hash", ""),
    )


def write_feature_file(path: str, features_by_id: dict[str, dict[int, np.ndarray]]) -> None:
    """Write precomputed layer tokens.

    Layout per image: u16 id length + id bytes, u16 layer count, then per
    layer u16 layer index, u32 token count, u32 channels, tokens*channels
    float32 values. Everything little-endian.
    """
    chunks = [FEATURE_MAGIC]
    for image_id, layers in features_by_id.items():
        ident = image_id.encode()
        if len(ident) > 0xFFFF:
            raise SchemaError(f"image id too long: {image_id[:40]!r}...")
        chunks.append(struct.pack("<H", len(ident)))
        chunks.append(ident)
        chunks.append(struct.pack("<H", len(layers)))
        for layer in sorted(layers):
            mat = np.ascontiguousarray(layers[layer], dtype="<f4")
            t, c = mat.shape
            chunks.append(struct.pack("<HII", layer, t, c))
            chunks.append(mat.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_feature_file(path: str) -> tuple[dict[str, dict[int, np.ndarray]], str]:
    """Read a feature file; returns (features by image id, content digest)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read feature file ({exc})") from exc
    if data[:5] != FEATURE_MAGIC:
        raise DecodeError(f"{path}: bad magic {data[:5]!r}, expected {FEATURE_MAGIC!r}")
    pos = 5
    out: dict[str, dict[int, np.ndarray]] = {}

    def need(n: int, what: str):
        nonlocal pos
        if pos + n > len(data):
            raise DecodeError(f"{path}: truncated file, missing {what}")
        start = pos
        pos += n
        return start

    while pos < len(data):
        off = need(2, "image id length")
        (id_len,) = struct.unpack_from("<H", data, off)
        off = need(id_len, "image id bytes")
        image_id = data[off : off + id_len].decode()
        off = need(2, f"layer count for {image_id!r}")
        (n_layers,) = struct.unpack_from("<H", data, off)
        layers: dict[int, np.ndarray] = {}
        for _ in range(n_layers):
            off = need(10, f"layer record header for {image_id!r}")
            layer, t, c = struct.unpack_from("<HII", data, off)
            off = need(4 * t * c, f"layer {layer} values for {image_id!r}")
            mat = np.frombuffer(data, dtype="<f4", count=t * c, offset=off).reshape(t, c)
            layers[int(layer)] = mat
        out[image_id] = layers
    digest = hashlib.sha256(data).hexdigest()
    return out, digest


def read_fit_manifest(path: str) -> list[dict]:
    """JSON-lines fit manifest: one {"path": ..., "organ": ...} per line."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(row, dict) or "path" not in row or "organ" not in row:
                raise SchemaError(f"{path}:{lineno}: need keys 'path' and 'organ'")
            rows.append(row)
    return rows


_DEGRADATION_KEYS = ("source", "kind", "theta", "seed", "achieved_psnr", "output_path")


def write_degradation_manifest(path: str, rows: list[dict]) -> None:
    for i, row in enumerate(rows):
        missing = [k for k in _DEGRADATION_KEYS if k not in row]
        if missing:
            raise SchemaError(f"manifest row {i}: missing keys {missing}")
    atomic_write_bytes(path, json.dumps(rows, indent=2, sort_keys=True).encode() + b"\n")


def read_degradation_manifest(path: str) -> list[dict]:
    try:
        with open(path) as fh:
            rows = json.load(fh)
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read manifest ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(rows, list):
        raise SchemaError(f"{path}: manifest must be a JSON list")
    for i, row in enumerate(rows):
        missing = [k for k in _DEGRADATION_KEYS if not isinstance(row, dict) or k not in row]
        if missing:
            raise SchemaError(f"{path}: row {i} missing keys {missing}")
    return rows


def write_json(path: str, obj) -> None:
    atomic_write_bytes(path, json.dumps(obj, indent=2, sort_keys=True).encode() + b"\n")


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return rows
