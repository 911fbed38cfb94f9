"""Checkpoint container.

Layout::

    PTLSNN-CKPT <version>\\n
    <key> = <value>\\n ...            metadata (text)
    array <name> <dtype> <d0,d1,..>\\n  one line per array
    END\\n
    <raw little-endian array bytes, in declaration order>
    <32-byte SHA-256 of everything above>

Floats in the metadata are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..nn.net import AnalogNet
from ..quantization import WeightQuantSpec
from ..spiking.network import SpikingLayer, SpikingNet

MAGIC = b"PTLSNN-CKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt: Checkpoint):
    lines = [MAGIC + f" {ckpt.version}\n".encode()]
    for k, v in ckpt.meta.items():
        if "\n" in str(v) or "=" in str(k):
            raise CheckpointError(f"metadata entry {k!r} cannot be stored on one line")
        lines.append(f"{k} = {v}\n".encode())
    blobs = []
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"array {name} {le.dtype.str} {shape}\n".encode())
        blobs.append(np.ascontiguousarray(le).tobytes())
    lines.append(b"END\n")
    body = b"".join(lines) + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise CheckpointError(f"{path}: file too short")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, refusing to load")
    end = body.find(b"END\n")
    if not body.startswith(MAGIC) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = body[:end].decode().splitlines()
    version = int(header[0].split()[1])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    ckpt = Checkpoint(version=version)
    offset = end + 4
    for line in header[1:]:
        if line.startswith("array "):
            _, name, dtype, shape = (line.split(" ") + [""])[:4]
            shape = tuple(int(d) for d in shape.split(",") if d)
            dt = np.dtype(dtype)
            n = int(np.prod(shape)) * dt.itemsize
            arr = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape)
            ckpt.arrays[name] = arr.astype(dt.newbyteorder("="))
            offset += n
        else:
            k, v = line.split(" = ", 1)
            ckpt.meta[k] = v
    return ckpt


# --------------------------------------------------------------------- network <-> checkpoint


def analog_to_checkpoint(net: AnalogNet, **meta) -> Checkpoint:
    ck = Checkpoint(meta={"kind": "analog", "architecture": net.architecture, "output_activation": net.output_activation, **meta})
    ck.meta["layers"] = ",".join(layer.kind for layer in net.layers)
    ck.arrays = {k: v for k, v in net.state_arrays().items()}
    return ck


def analog_from_checkpoint(ck: Checkpoint) -> AnalogNet:
    _expect(ck, "analog")
    batchnorm = "batchnorm" in ck.meta["layers"].split(",")
    dtype = next(iter(ck.arrays.values())).dtype
    net = AnalogNet.from_architecture(ck.meta["architecture"], batchnorm=batchnorm, dtype=dtype, output_activation=_none(ck.meta["output_activation"]))
    net.load_state_arrays(ck.arrays)
    return net


def spiking_to_checkpoint(snn: SpikingNet, architecture, quant: WeightQuantSpec | None = None, **meta) -> Checkpoint:
    quant = quant or WeightQuantSpec(None)
    ck = Checkpoint(
        meta={
            "kind": "spiking",
            "architecture": architecture,
            "output_activation": snn.output_activation,
            "n_steps": snn.n_steps,
            "bits": quant.bits if quant.enabled else "off",
            "n_layers": len(snn.layers),
            **meta,
        }
    )
    for i, sl in enumerate(snn.layers):
        ck.meta[f"layer.{i}.role"] = sl.role
        ck.meta[f"layer.{i}.threshold"] = repr(sl.threshold)
        ck.meta[f"layer.{i}.input_scale"] = repr(sl.input_scale)
        ck.arrays[f"layer.{i}.W"] = sl.layer.W
        ck.arrays[f"layer.{i}.b"] = sl.layer.b
        if sl.shared_W is not None:
            ck.arrays[f"layer.{i}.shared_W"] = sl.shared_W
            ck.arrays[f"layer.{i}.shared_b"] = sl.shared_b
    return ck


def spiking_from_checkpoint(ck: Checkpoint) -> SpikingNet:
    _expect(ck, "spiking")
    dtype = ck.arrays["layer.0.W"].dtype
    shell = AnalogNet.from_architecture(ck.meta["architecture"], batchnorm=False, dtype=dtype)
    layers = []
    for i, layer in enumerate(shell.weight_layers):
        layer.params["W"] = ck.arrays[f"layer.{i}.W"].copy()
        layer.params["b"] = ck.arrays[f"layer.{i}.b"].copy()
        thr = ck.meta[f"layer.{i}.threshold"]
        sl = SpikingLayer(
            layer,
            ck.meta[f"layer.{i}.role"],
            int(ck.meta["n_steps"]),
            None if thr == "None" else float(thr),
            input_scale=float(ck.meta[f"layer.{i}.input_scale"]),
        )
        if f"layer.{i}.shared_W" in ck.arrays:
            sl.shared_W = ck.arrays[f"layer.{i}.shared_W"].copy()
            sl.shared_b = ck.arrays[f"layer.{i}.shared_b"].copy()
        layers.append(sl)
    return SpikingNet(layers, shell.input_shape, output_activation=_none(ck.meta["output_activation"]))


def _none(v):
    return None if v in (None, "None") else v


def _expect(ck, kind):
    if ck.meta.get("kind") != kind:
        raise CheckpointError(f"checkpoint holds a {ck.meta.get('kind')!r} network, expected {kind!r}")
