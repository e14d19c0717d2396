"""Binary checkpoint format for :class:`PolicyParams`.

Layout::

    b"RLPOSTCK"                         8-byte magic
    <header JSON>\\n                    version, V, D, n_filler, L_hard, n_buckets, tokens
    <V * D float64, little-endian>      weights, row-major
    <sha256 of all preceding bytes>     32 bytes

Weights are stored as raw IEEE-754 doubles so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import IntegrityError, VersionError
from .policy import FeatureMap, PolicyParams, Vocabulary

MAGIC = b"RLPOSTCK"
CHECKPOINT_VERSION = 1
_DIGEST = 32


def encode(params: PolicyParams, version: int = CHECKPOINT_VERSION) -> bytes:
    fmap = params.fmap
    header = {
        "version": version,
        "V": fmap.V,
        "D": fmap.dim,
        "n_filler": fmap.vocab.n_filler,
        "L_hard": fmap.L_hard,
        "n_buckets": fmap.n_buckets,
        "tokens": fmap.vocab.tokens,
        "dtype": "<f8",
    }
    body = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n"
    body += np.ascontiguousarray(params.weights, dtype="<f8").tobytes()
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> PolicyParams:
    if len(blob) < len(MAGIC) + _DIGEST:
        raise IntegrityError("checkpoint is truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch")
    if not body.startswith(MAGIC):
        raise IntegrityError("not a checkpoint file")
    nl = body.index(b"\n", len(MAGIC))
    header = json.loads(body[len(MAGIC):nl])
    if header.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"checkpoint version {header.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
        )
    vocab = Vocabulary(n_filler=header["n_filler"])
    fmap = FeatureMap(vocab, header["L_hard"], header["n_buckets"])
    if header["tokens"] != vocab.tokens or (header["V"], header["D"]) != (fmap.V, fmap.dim):
        raise IntegrityError("checkpoint header is inconsistent with its vocabulary")
    raw = body[nl + 1:]
    if len(raw) != fmap.V * fmap.dim * 8:
        raise IntegrityError("checkpoint weight block has the wrong size")
    weights = np.frombuffer(raw, dtype="<f8").reshape(fmap.V, fmap.dim).astype(np.float64)
    return PolicyParams(fmap, weights, version=header["version"])


def save(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_bytes(encode(params))


def load(path: str | Path) -> PolicyParams:
    return decode(Path(path).read_bytes())


def checkpoint_roundtrip(params: PolicyParams, path: str | Path) -> PolicyParams:
    save(params, path)
    return load(path)


def params_digest(params: PolicyParams) -> str:
    return hashlib.sha256(encode(params)).hexdigest()
