"""Binary checkpoint container.

Layout::

    magic        8 bytes   b"MMCKPT\\x00\\x00"
    version      u32 LE
    header_len   u64 LE
    header_sha   32 bytes  sha256 of the header bytes
    header       JSON (utf-8, indented, sorted keys)
    payload      raw little-endian tensor bytes, in directory order

The header carries the tensor directory (name, shape, dtype, offset,
nbytes), the payload length and its sha256, plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import flow, mmdit, ptd
from ..mmdit import MMDiT

MAGIC = b"MMCKPT\x00\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ32s")

# stages in the order they may be applied; a chain must be a subsequence
STAGE_ORDER = ("teacher", "C1", "C2", "C3", "C4", "PTD", "textdistill")
_DTYPES = {"<f8": np.float64, "<i8": np.int64}
_STATIC = "@static/"


class CheckpointError(Exception):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ProvenanceError(CheckpointError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "<f8"
    if arr.dtype.kind in "iub":
        return "<i8"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_tensors(path, tensors: dict[str, np.ndarray], header: dict) -> str:
    """Write ``tensors`` with ``header``; returns the payload sha256."""
    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    full = dict(header)
    full.update({"format_version": FORMAT_VERSION, "tensors": directory, "payload_bytes": len(payload), "payload_sha256": digest})
    hbytes = json.dumps(full, indent=1, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes), hashlib.sha256(hbytes).digest()))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)
    return digest


def read_header(path) -> dict:
    return _read(path, payload=False)[0]


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    return _read(path, payload=True)


def _read(path, payload: bool):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREFIX.size:
        raise TruncatedError(f"{path}: file shorter than the fixed prefix")
    magic, version, hlen, hsha = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    hbytes = blob[start:start + hlen]
    if len(hbytes) < hlen:
        raise TruncatedError(f"{path}: header truncated")
    if hashlib.sha256(hbytes).digest() != hsha:
        raise ChecksumError(f"{path}: header checksum mismatch")
    header = json.loads(hbytes.decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: header declares version {header.get('format_version')}")
    body = blob[start + hlen:]
    if len(body) < header["payload_bytes"]:
        raise TruncatedError(f"{path}: payload has {len(body)} of {header['payload_bytes']} bytes")
    if len(body) > header["payload_bytes"]:
        raise CheckpointError(f"{path}: {len(body) - header['payload_bytes']} trailing bytes")
    if hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    verify_provenance(header.get("provenance", []))
    if not payload:
        return header, {}
    tensors = {}
    for ent in header["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        tensors[ent["name"]] = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).copy()
    return header, tensors


def verify_provenance(chain: list) -> None:
    """A chain is a strictly increasing subsequence of :data:`STAGE_ORDER`."""
    last = -1
    for stage in chain:
        if stage not in STAGE_ORDER:
            raise ProvenanceError(f"unknown stage {stage!r} in provenance")
        pos = STAGE_ORDER.index(stage)
        if pos <= last:
            raise ProvenanceError(f"stage {stage!r} out of order in {chain}")
        last = pos


def append_stage(chain: list, stage: str) -> list:
    out = list(chain) + [stage]
    verify_provenance(out)
    return out


# -- typed wrappers -------------------------------------------------------------


def save_model(path, model: MMDiT, seed: int, meta: dict | None = None) -> str:
    tensors = dict(model.params)
    if model.static_ln is not None:
        tensors[_STATIC + "timesteps"] = model.static_ln.timesteps
        for site, arr in model.static_ln.coeffs.items():
            tensors[_STATIC + site] = arr
    header = {
        "kind": "mmdit",
        "config": model.config.to_dict(),
        "provenance": list(model.provenance),
        "seed": int(seed),
        "static_ln": None if model.static_ln is None else {"interpolate": bool(model.static_ln.interpolate)},
        "ptd": None if model.ptd is None else model.ptd.to_dict(),
        "meta": meta or {},
    }
    return save_tensors(path, tensors, header)


def load_model(path) -> tuple[MMDiT, dict]:
    header, tensors = load_tensors(path)
    if header.get("kind") != "mmdit":
        raise CheckpointError(f"{path}: expected an mmdit checkpoint, found {header.get('kind')!r}")
    cfg = mmdit.ModelConfig(**header["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith(_STATIC)}
    static = None
    if header["static_ln"] is not None:
        coeffs = {k[len(_STATIC):]: v for k, v in tensors.items() if k.startswith(_STATIC) and k != _STATIC + "timesteps"}
        static = mmdit.StaticLnTable(tensors[_STATIC + "timesteps"], coeffs, header["static_ln"]["interpolate"])
    pcfg = None if header["ptd"] is None else ptd.PtdConfig(**header["ptd"])
    return MMDiT(cfg, params, static, pcfg, list(header["provenance"])), header


def save_encoder(path, enc: flow.ToyTextEncoder, seed: int, provenance: list, meta: dict | None = None) -> str:
    header = {
        "kind": "text-encoder",
        "config": {"vocab": enc.vocab, "d_enc": enc.d_enc, "txt_len": enc.txt_len, "n_heads": enc.n_heads, "out_dim": enc.out_dim, "frozen": enc.frozen},
        "provenance": list(provenance),
        "seed": int(seed),
        "meta": meta or {},
    }
    return save_tensors(path, enc.params, header)


def load_encoder(path) -> tuple[flow.ToyTextEncoder, dict]:
    header, tensors = load_tensors(path)
    if header.get("kind") != "text-encoder":
        raise CheckpointError(f"{path}: expected a text-encoder checkpoint, found {header.get('kind')!r}")
    c = header["config"]
    enc = flow.ToyTextEncoder(c["vocab"], c["d_enc"], c["txt_len"], tensors, c["n_heads"], c["out_dim"], c["frozen"])
    return enc, header


def save_bundle(path, kind: str, tensors: dict[str, np.ndarray], seed: int, config: dict, meta: dict | None = None) -> str:
    """Any other named-array artifact (datasets, samples)."""
    return save_tensors(path, tensors, {"kind": kind, "config": config, "provenance": [], "seed": int(seed), "meta": meta or {}})


def load_bundle(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    header, tensors = load_tensors(path)
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')!r}")
    return tensors, header


def spec_dict(spec: flow.SynthSpec) -> dict:
    return asdict(spec)
