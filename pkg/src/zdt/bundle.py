"""Versioned binary container for trained detectors.

Layout (little-endian)::

    magic      8 bytes  b"ZDTBNDL\\0"
    version    u32
    layout     u32      CRC32 of the comma-joined feature names
    body_len   u64
    digest     32 bytes SHA-256 of the body
    body       sections: u16 name length, name, u64 payload length, payload

The ``meta`` section is JSON (thresholds, activations, labels, k). Every
other section is one float64 array: u8 ndim, ndim x u64 shape, raw data.
Output is a pure function of the detector contents, so saving the same model
twice gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib

import numpy as np

from .flow_data import FEATURE_NAMES
from .neural_core import Autoencoder, DenseNetwork, Layer
from .pipeline import AnomalyDetector, NoveltyDetector
from .preprocess import MinMaxParams, NdNormalizerParams

MAGIC = b"ZDTBNDL\x00"
FORMAT_VERSION = 1
LAYOUT_CHECKSUM = zlib.crc32(",".join(FEATURE_NAMES).encode("utf-8"))
_HEADER = struct.Struct("<8sIIQ32s")


class BundleError(Exception):
    pass


class BundleFormatError(BundleError):
    pass


class BundleVersionError(BundleError):
    pass


class BundleTruncatedError(BundleError):
    pass


class BundleChecksumError(BundleError):
    pass


class BundleLayoutError(BundleChecksumError):
    """Feature layout of the bundle differs from this build."""


def _array_bytes(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f8")
    return struct.pack(f"<B{a.ndim}Q", a.ndim, *a.shape) + a.tobytes()


def _array_from(buf: bytes) -> np.ndarray:
    ndim = buf[0]
    shape = struct.unpack_from(f"<{ndim}Q", buf, 1)
    off = 1 + 8 * ndim
    expected = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != expected:
        raise BundleTruncatedError("array payload size mismatch")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def _net_sections(prefix: str, net: DenseNetwork):
    for i, layer in enumerate(net.layers):
        yield f"{prefix}.{i}.W", layer.W
        yield f"{prefix}.{i}.b", layer.b


def _net_meta(net: DenseNetwork) -> list[str]:
    return [l.activation for l in net.layers]


def _net_from(prefix: str, acts: list[str], arrays: dict) -> DenseNetwork:
    return DenseNetwork([
        Layer(arrays[f"{prefix}.{i}.W"], arrays[f"{prefix}.{i}.b"], act)
        for i, act in enumerate(acts)
    ])


def dumps_bundle(ad: AnomalyDetector | None, nd: NoveltyDetector | None = None) -> bytes:
    """Serialize one or both detectors; at least one must be given."""
    if ad is None and nd is None:
        raise ValueError("nothing to save: both detectors are None")
    meta: dict = {"features": list(FEATURE_NAMES)}
    arrays: list[tuple[str, np.ndarray]] = []
    if ad is not None:
        meta["ad"] = {
            "threshold": ad.threshold,
            "encoder": _net_meta(ad.model.encoder),
            "decoder": _net_meta(ad.model.decoder),
        }
        arrays += [
            *_net_sections("ad.enc", ad.model.encoder),
            *_net_sections("ad.dec", ad.model.decoder),
            ("ad.min", ad.scaler.min),
            ("ad.max", ad.scaler.max),
        ]
    if nd is not None:
        meta["nd"] = {
            "threshold": nd.threshold,
            "k": nd.k,
            "encoder": _net_meta(nd.model.encoder),
            "decoder": _net_meta(nd.model.decoder),
            "ref_labels": [str(c) for c in nd.ref_labels],
        }
        arrays += [
            *_net_sections("nd.enc", nd.model.encoder),
            *_net_sections("nd.dec", nd.model.decoder),
            ("nd.mean", nd.normalizer.mean),
            ("nd.std", nd.normalizer.std),
            ("nd.lambdas", nd.normalizer.lambdas),
            ("nd.ref", nd.ref_embeddings),
        ]
    sections = [("meta", json.dumps(meta, sort_keys=True).encode("utf-8"))]
    sections += [(name, _array_bytes(a)) for name, a in arrays]
    body = b"".join(
        struct.pack("<H", len(name.encode())) + name.encode()
        + struct.pack("<Q", len(payload)) + payload
        for name, payload in sections
    )
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, LAYOUT_CHECKSUM, len(body),
                          hashlib.sha256(body).digest())
    return header + body


def loads_bundle(data: bytes) -> tuple[AnomalyDetector | None, NoveltyDetector | None]:
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        if MAGIC.startswith(data[:len(MAGIC)]):
            raise BundleTruncatedError("file ends inside the header")
        raise BundleFormatError("not a detector bundle (bad magic)")
    if len(data) < _HEADER.size:
        raise BundleTruncatedError("file ends inside the header")
    _, version, layout, body_len, digest = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"bundle format version {version}, expected {FORMAT_VERSION}")
    body = data[_HEADER.size:]
    if len(body) < body_len:
        raise BundleTruncatedError(f"body has {len(body)} of {body_len} bytes")
    body = body[:body_len]
    if hashlib.sha256(body).digest() != digest:
        raise BundleChecksumError("body checksum mismatch")
    if layout != LAYOUT_CHECKSUM:
        raise BundleLayoutError("feature layout checksum mismatch")

    sections, off = {}, 0
    while off < len(body):
        (nlen,) = struct.unpack_from("<H", body, off)
        name = body[off + 2:off + 2 + nlen].decode("utf-8")
        off += 2 + nlen
        (plen,) = struct.unpack_from("<Q", body, off)
        off += 8
        sections[name] = body[off:off + plen]
        off += plen
    meta = json.loads(sections.pop("meta"))
    arrays = {k: _array_from(v) for k, v in sections.items()}

    ad = None
    if "ad" in meta:
        m = meta["ad"]
        ad = AnomalyDetector(
            Autoencoder(_net_from("ad.enc", m["encoder"], arrays), _net_from("ad.dec", m["decoder"], arrays)),
            MinMaxParams(arrays["ad.min"], arrays["ad.max"]),
            m["threshold"],
        )
    nd = None
    if "nd" in meta:
        m = meta["nd"]
        nd = NoveltyDetector(
            Autoencoder(_net_from("nd.enc", m["encoder"], arrays), _net_from("nd.dec", m["decoder"], arrays)),
            NdNormalizerParams(arrays["nd.mean"], arrays["nd.std"], arrays["nd.lambdas"]),
            m["threshold"],
            arrays["nd.ref"],
            np.array(m["ref_labels"], dtype=object),
            m["k"],
        )
    return ad, nd


def save_bundle(ad: AnomalyDetector | None, nd: NoveltyDetector | None, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_bundle(ad, nd))


def load_bundle(path: str) -> tuple[AnomalyDetector | None, NoveltyDetector | None]:
    with open(path, "rb") as fh:
        return loads_bundle(fh.read())
