"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CDA1" | u32 format version | u32 header length | header (UTF-8 JSON)
    | payload: float64 LE arrays, concatenated in header order | u32 CRC32 of payload

The header carries the schema fingerprint, model kind, phase tag, training
config snapshot and the name/shape of every stored array (network
parameters and per-group Adam moments).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from anchorda.models import Checkpoint, FeatureSchema, ModelBundle, SchemaMismatchError, TrainConfig
from anchorda.nn import AdamState, DenseNet

MAGIC = b"CDA1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


def _net_meta(net: DenseNet) -> dict:
    return {
        "dims": net.dims,
        "output_activation": net.output_activation,
        "dropout_rate": net.dropout_rate,
        "dropout_after": list(net.dropout_after),
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    bundle = ckpt.bundle
    arrays: list[tuple[str, np.ndarray]] = []
    nets = {}
    for name, net in bundle.nets().items():
        nets[name] = _net_meta(net)
        for i, p in enumerate(net.params()):
            arrays.append((f"{name}/param{i}", p))
    optim = {}
    for name, st in sorted(ckpt.optim.items()):
        optim[name] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        for i, (m, v) in enumerate(zip(st.m, st.v)):
            arrays.append((f"optim/{name}/m{i}", m))
            arrays.append((f"optim/{name}/v{i}", v))
    header = {
        "kind": bundle.kind,
        "alpha": bundle.alpha,
        "schema": {"category_dim": bundle.schema.category_dim, "campaign_dim": bundle.schema.campaign_dim},
        "fingerprint": bundle.schema.fingerprint,
        "phase": ckpt.phase,
        "config": ckpt.config.to_dict(),
        "history": list(ckpt.history),
        "nets": nets,
        "optim": optim,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return b"".join([
        MAGIC,
        struct.pack("<II", FORMAT_VERSION, len(head)),
        head,
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def from_bytes(blob: bytes, expected_fingerprint: str | None = None) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint file (bad magic bytes)")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if 12 + head_len > len(blob):
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(blob[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from exc

    entries = header["arrays"]
    sizes = [int(np.prod(s["shape"], dtype=np.int64)) for s in entries]
    start = 12 + head_len
    end = start + 8 * sum(sizes)
    if len(blob) != end + 4:
        raise CorruptCheckpointError(f"payload has {len(blob) - start} bytes, expected {end + 4 - start}")
    payload = blob[start:end]
    (crc,) = struct.unpack_from("<I", blob, end)
    if zlib.crc32(payload) != crc:
        raise CorruptCheckpointError("payload checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    off = 0
    for entry, size in zip(entries, sizes):
        arrays[entry["name"]] = flat[off:off + size].reshape(entry["shape"]).astype(np.float64)
        off += size

    schema = FeatureSchema(**header["schema"])
    if schema.fingerprint != header["fingerprint"]:
        raise CorruptCheckpointError("schema fingerprint does not match stored dimensions")
    if expected_fingerprint is not None and expected_fingerprint != header["fingerprint"]:
        raise SchemaMismatchError("checkpoint schema does not match the data schema")

    nets = {}
    for name, meta in header["nets"].items():
        n_layers = len(meta["dims"]) - 1
        layers = [(arrays[f"{name}/param{2 * i}"], arrays[f"{name}/param{2 * i + 1}"]) for i in range(n_layers)]
        nets[name] = DenseNet(layers, meta["output_activation"], meta["dropout_rate"], list(meta["dropout_after"]))
    optim = {}
    for name, meta in header["optim"].items():
        n = len(nets[name].params())
        optim[name] = AdamState(
            m=[arrays[f"optim/{name}/m{i}"] for i in range(n)],
            v=[arrays[f"optim/{name}/v{i}"] for i in range(n)],
            step=meta["step"], lr=meta["lr"], beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"],
        )
    bundle = ModelBundle(header["kind"], schema, nets["g"], nets["f"], header["alpha"], nets.get("he"))
    return Checkpoint(bundle, optim, TrainConfig.from_dict(header["config"]), header["phase"], header["history"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_fingerprint)
