"""Trajectory dataset files.

A dataset holds full solver trajectories for offline training and
cross-run comparisons. Binary layout (all integers little-endian):

    magic      4 bytes  b"MTRJ"
    version    u16      = 1
    manifest   u32 length prefix + UTF-8 JSON
    records    repeated until EOF:
        record_len   u32   byte length of the rest of the record
        sim_id       u64
        param_count  u32
        params       f64 * param_count
        t_count      u32
        field_dim    u32
        fields       f64 * (t_count * field_dim), row-major by time

The manifest carries experiment metadata (parameter names and space,
record count, field shape, generating seed) so a file is
self-describing. Floats are raw IEEE-754 bytes; reading a file back
reproduces every value bitwise.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .sampler import ParamVector

MAGIC = b"MTRJ"
VERSION = 1

_HEAD = struct.Struct("<4sH")
_U32 = struct.Struct("<I")
_REC_FIXED = struct.Struct("<QI")  # sim_id, param_count


class DatasetError(Exception):
    pass


@dataclass
class TrajectoryRecord:
    sim_id: int
    params: ParamVector
    fields: np.ndarray  # (t_count, field_dim) float64

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2:
            raise ValueError(f"fields must be 2-D (t, k), got shape {self.fields.shape}")

    @property
    def t_count(self) -> int:
        return self.fields.shape[0]


def _encode_record(rec: TrajectoryRecord) -> bytes:
    params = rec.params.values
    body = (
        _REC_FIXED.pack(rec.sim_id, len(params))
        + params.tobytes()
        + _U32.pack(rec.fields.shape[0])
        + _U32.pack(rec.fields.shape[1])
        + np.ascontiguousarray(rec.fields).tobytes()
    )
    return _U32.pack(len(body)) + body


def write_dataset(path, manifest: dict, records) -> int:
    """Write records (iterable of TrajectoryRecord) to path.

    The manifest must name the parameters; record count is filled in.
    Returns the number of records written.
    """
    if "param_names" not in manifest:
        raise DatasetError("manifest needs param_names")
    param_names = tuple(manifest["param_names"])
    count = 0
    with io.BytesIO() as payload:
        for rec in records:
            if rec.params.names != param_names:
                raise DatasetError(
                    f"record {rec.sim_id} params {rec.params.names} != manifest {param_names}"
                )
            payload.write(_encode_record(rec))
            count += 1
        manifest = dict(manifest, count=count)
        blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(_HEAD.pack(MAGIC, VERSION))
            f.write(_U32.pack(len(blob)))
            f.write(blob)
            f.write(payload.getvalue())
    return count


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DatasetError(f"truncated dataset: expected {n} bytes for {what}, got {len(data)}")
    return data


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        magic, version = _HEAD.unpack(_read_exact(f, _HEAD.size, "header"))
        if magic != MAGIC:
            raise DatasetError(f"bad magic {magic!r}, not a trajectory dataset")
        if version != VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        (blob_len,) = _U32.unpack(_read_exact(f, 4, "manifest length"))
        blob = _read_exact(f, blob_len, "manifest")
    try:
        manifest = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise DatasetError(f"corrupt manifest: {err}") from err
    if "param_names" not in manifest:
        raise DatasetError("manifest lacks param_names")
    return manifest


def read_dataset(path):
    """Load (manifest, [TrajectoryRecord]) from path."""
    manifest = read_manifest(path)
    param_names = tuple(manifest["param_names"])
    records = []
    with open(path, "rb") as f:
        f.seek(_HEAD.size)
        (blob_len,) = _U32.unpack(_read_exact(f, 4, "manifest length"))
        f.seek(blob_len, io.SEEK_CUR)
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DatasetError("truncated dataset: partial record length")
            (rec_len,) = _U32.unpack(head)
            body = _read_exact(f, rec_len, "record body")
            records.append(_decode_record(body, param_names))
    if manifest.get("count") is not None and manifest["count"] != len(records):
        raise DatasetError(
            f"manifest count {manifest['count']} != {len(records)} records on disk"
        )
    return manifest, records


def _decode_record(body: bytes, param_names: tuple) -> TrajectoryRecord:
    if len(body) < _REC_FIXED.size:
        raise DatasetError("record too short for fixed fields")
    sim_id, param_count = _REC_FIXED.unpack_from(body, 0)
    offset = _REC_FIXED.size
    if param_count != len(param_names):
        raise DatasetError(
            f"record {sim_id}: {param_count} params but manifest names {len(param_names)}"
        )
    need = param_count * 8
    if len(body) < offset + need + 8:
        raise DatasetError(f"record {sim_id} truncated in params")
    params = np.frombuffer(body, dtype="<f8", count=param_count, offset=offset).copy()
    offset += need
    t_count, field_dim = struct.unpack_from("<II", body, offset)
    offset += 8
    need = t_count * field_dim * 8
    if len(body) != offset + need:
        raise DatasetError(
            f"record {sim_id}: field block is {len(body) - offset} bytes, expected {need}"
        )
    fields = np.frombuffer(body, dtype="<f8", count=t_count * field_dim, offset=offset)
    fields = fields.reshape(t_count, field_dim).copy()
    return TrajectoryRecord(sim_id, ParamVector(param_names, params), fields)


def subsample_dataset(src, dst, every: int) -> int:
    """Keep only timesteps with index divisible by `every`.

    A 2001-step trajectory subsampled with every=100 keeps indices
    0, 100, ..., 2000 (21 rows). Returns records written.
    """
    if every < 1:
        raise DatasetError(f"subsample stride must be >= 1, got {every}")
    manifest, records = read_dataset(src)
    thinned = [
        TrajectoryRecord(r.sim_id, r.params, r.fields[::every].copy()) for r in records
    ]
    manifest = dict(manifest)
    manifest["subsample_every"] = every * manifest.get("subsample_every", 1)
    manifest.pop("count", None)
    return write_dataset(dst, manifest, thinned)
