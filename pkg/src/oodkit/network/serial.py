"""Model file format "OODM": magic, version, JSON header with layer specs and
a tensor directory, little-endian row-major payload, trailing CRC32."""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from ..tensor import F16, F32, QINT8, QuantParams, Tensor
from .model import (
    BatchNormSpec,
    ConvSpec,
    DenseSpec,
    DetectorModel,
    FlattenSpec,
    MaxPoolSpec,
    ModelSpec,
    ReluSpec,
    build_decoder,
    build_encoder,
)
from .quantize import rebuild_quantized

MAGIC = b"OODM"
VERSION = 1


class OodmError(ValueError):
    pass


class OodmMagicError(OodmError):
    pass


class OodmVersionError(OodmError):
    pass


class OodmChecksumError(OodmError):
    pass


_SPEC_KINDS = {
    "conv2d": lambda d: ConvSpec(d["out_channels"], d["kernel"], d["stride"], d["padding"]),
    "maxpool2d": lambda d: MaxPoolSpec(d["kernel"]),
    "dense": lambda d: DenseSpec(d["out_dim"]),
    "relu": lambda d: ReluSpec(),
    "batchnorm2d": lambda d: BatchNormSpec(),
    "flatten": lambda d: FlattenSpec(),
}


def _layer_to_json(ls):
    d = {"kind": ls.kind}
    for f in ("out_channels", "kernel", "stride", "padding", "out_dim"):
        if hasattr(ls, f):
            d[f] = getattr(ls, f)
    return d


def _spec_to_json(spec: ModelSpec):
    return {
        "input_hw": list(spec.input_hw),
        "in_channels": spec.in_channels,
        "n_latent": spec.n_latent,
        "beta": spec.beta,
        "variance_parametrization": spec.variance_parametrization,
        "layers": [_layer_to_json(ls) for ls in spec.layers],
    }


def _spec_from_json(d) -> ModelSpec:
    layers = []
    for ld in d["layers"]:
        kind = ld["kind"]
        if kind not in _SPEC_KINDS:
            raise OodmError(f"unknown layer kind {kind!r} in model header")
        layers.append(_SPEC_KINDS[kind](ld))
    return ModelSpec(tuple(d["input_hw"]), d["in_channels"], tuple(layers),
                     d["n_latent"], d["beta"], d["variance_parametrization"])


def _tensor_directory(model: DetectorModel):
    """(name, Tensor) pairs covering every stored array of the model."""
    if model.precision == QINT8:
        return sorted(model.quant_weights.items())
    tag = F16 if model.precision == F16 else F32
    out = []
    for name, arr in model.named_params():
        if arr.dtype == np.float16:
            out.append((name, Tensor.f16(arr)))
        else:
            out.append((name, Tensor(np.asarray(arr, np.float32), F32)
                        if tag == F32 else Tensor.f16(arr.astype(np.float16))))
    return out


def save_model(model: DetectorModel) -> bytes:
    directory = []
    payload = bytearray()
    for name, t in _tensor_directory(model):
        entry = {"name": name, "dtype": t.dtype, "shape": list(t.shape),
                 "offset": len(payload)}
        if t.quant is not None:
            entry["scale"] = t.quant.scale
            entry["zero_point"] = t.quant.zero_point
        directory.append(entry)
        payload.extend(t.to_bytes())
    header = {
        "spec": _spec_to_json(model.spec),
        "precision": model.precision,
        "has_decoder": model.decoder is not None,
        "tensors": directory,
        "activation_quant": getattr(model, "quant_sites", None),
        "metadata": model.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(hbytes))
    out += hbytes
    out += payload
    out += struct.pack("<I", zlib.crc32(bytes(payload)) & 0xFFFFFFFF)
    return bytes(out)


def model_checksum(model: DetectorModel) -> str:
    payload = bytearray()
    for _, t in _tensor_directory(model):
        payload.extend(t.to_bytes())
    return f"{zlib.crc32(bytes(payload)) & 0xFFFFFFFF:08x}"


def load_model(data: bytes) -> DetectorModel:
    if data[:4] != MAGIC:
        raise OodmMagicError(f"bad magic {data[:4]!r}")
    if len(data) < 12:
        raise OodmError("truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise OodmVersionError(f"unsupported version {version}")
    if len(data) < 12 + hlen + 4:
        raise OodmError("truncated file")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    payload = data[12 + hlen:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise OodmChecksumError("payload checksum mismatch")

    spec = _spec_from_json(header["spec"])
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        size = n * {F32: 4, F16: 2, QINT8: 1}[entry["dtype"]]
        raw = payload[entry["offset"]:entry["offset"] + size]
        if len(raw) < size:
            raise OodmError(f"tensor {entry['name']!r} payload truncated")
        quant = None
        if "scale" in entry:
            quant = QuantParams(entry["scale"], entry["zero_point"])
        tensors[entry["name"]] = Tensor.from_bytes(raw, entry["dtype"], entry["shape"], quant)

    precision = header["precision"]
    metadata = header.get("metadata", {})
    if precision == QINT8:
        sites = {k: tuple(v) for k, v in header["activation_quant"].items()}
        return rebuild_quantized(spec, tensors, sites, metadata)

    encoder = build_encoder(spec)
    decoder = build_decoder(spec) if header.get("has_decoder") else None
    model = DetectorModel(spec, precision, encoder, decoder, metadata=metadata)
    for name, arr in model.named_params():
        if name not in tensors:
            raise OodmError(f"model file missing tensor {name!r}")
        stored = tensors[name].data
        if tuple(stored.shape) != tuple(arr.shape):
            raise OodmError(f"tensor {name!r} has shape {stored.shape}, expected {arr.shape}")
        prefix, idx, pname = name.split(".")
        group = model.encoder if prefix == "enc" else model.decoder
        layer = group[int(idx)]
        if pname in ("running_mean", "running_var"):
            setattr(layer, pname, stored.copy())
        else:
            layer.params[pname] = stored.copy()
    return model
