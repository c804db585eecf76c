"""Binary checkpoints: a JSON header followed by flat little-endian float64 parameters.

Layout::

    b"JEBMCKPT"                      8 bytes magic
    header length                    uint64, little-endian
    header                           UTF-8 JSON
    parameters                       float64, little-endian, in header order

The header lists the networks (``g`` and, when present, ``tau`` and
``generator``) with their specs and parameter counts, the coupling, the
output space and free-form metadata (feature scaling, config).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .energy import Coupling, EnergyModel
from .errors import ParseError
from .spaces import OutputSpace

MAGIC = b"JEBMCKPT"


@dataclass
class Checkpoint:
    model: EnergyModel
    tau: nets.Network | None = None
    generator: nets.Network | None = None
    meta: dict = field(default_factory=dict)


def save(path, ckpt: Checkpoint):
    nets_out = [("g", ckpt.model.h_spec, ckpt.model.h_params)]
    for name in ("tau", "generator"):
        net = getattr(ckpt, name)
        if net is not None:
            nets_out.append((name, net.spec, net.params))
    header = {
        "space": {"kind": ckpt.model.space.kind, "k": ckpt.model.space.k},
        "coupling": ckpt.model.coupling.to_dict(),
        "networks": [{"name": n, "spec": s.to_dict(), "size": int(p.size)} for n, s, p in nets_out],
        "meta": ckpt.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, _, p in nets_out:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise ParseError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header ({exc})") from None
    try:
        return _from_header(path, header, np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: malformed header ({exc!r})") from None


def _from_header(path, header, values) -> Checkpoint:
    total = sum(n["size"] for n in header["networks"])
    if values.size != total:
        raise ParseError(f"{path}: expected {total} parameters, found {values.size}")
    out, offset = {}, 0
    for entry in header["networks"]:
        spec = nets.NetSpec.from_dict(entry["spec"])
        if nets.n_params(spec) != entry["size"]:
            raise ParseError(f"{path}: network {entry['name']!r} size disagrees with its spec")
        out[entry["name"]] = (spec, values[offset:offset + entry["size"]].copy())
        offset += entry["size"]
    space = OutputSpace(header["space"]["kind"], header["space"]["k"])
    model = EnergyModel(*out["g"], Coupling.from_dict(header["coupling"]), space)
    tau = nets.Network(*out["tau"]) if "tau" in out else None
    gen = nets.Network(*out["generator"]) if "generator" in out else None
    return Checkpoint(model, tau, gen, header.get("meta", {}))
