"""Binary checkpoint format.

Layout (all integers u32 little-endian, all reals f64 little-endian)::

    b"SDLS" | version | section count
    section := tag (4 ASCII bytes) | payload

    GEN  / SNET : head (0 linear, 1 sigmoid) | t | breakpoints[t-1] | slopes[t]
                  | layer count L | dims[L+1] | per layer: W (row-major) then b
    SLIN        : m | n | A (row-major)
    LATS        : count | k | latents (row-major)
    CONF        : byte length | UTF-8 key=value text

A file holds at most one of each tag.  Sensor sections are optional.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import PiecewiseLinear
from .errors import FormatError
from .models import GeneratorModel, MeasurementOperator

MAGIC = b"SDLS"
VERSION = 1
_HEADS = ("linear", "sigmoid")


@dataclass
class Checkpoint:
    generator: GeneratorModel | None = None
    sensor: MeasurementOperator | None = None
    config: dict = field(default_factory=dict)
    latents: np.ndarray | None = None


def _u32(x):
    return struct.pack("<I", int(x))


def _reals(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _pack_net(weights, biases, act, head="linear"):
    parts = [bytes([_HEADS.index(head)]), _u32(act.pieces)]
    parts.append(_reals(act.breakpoints))
    parts.append(_reals(act.slopes))
    dims = [weights[0].shape[1]] + [W.shape[0] for W in weights]
    parts.append(_u32(len(weights)))
    parts += [_u32(d) for d in dims]
    for W, b in zip(weights, biases):
        parts += [_reals(W), _reals(b)]
    return b"".join(parts)


def encode_config(config: dict) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def decode_config(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"config line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, generator=None, sensor=None, config=None, latents=None):
    sections = []
    if generator is not None:
        sections.append(b"GEN " + _pack_net(generator.weights, generator.biases,
                                            generator.activation, generator.output))
    if sensor is not None:
        if sensor.kind == "linear":
            A = sensor.matrix
            sections.append(b"SLIN" + _u32(A.shape[0]) + _u32(A.shape[1]) + _reals(A))
        else:
            sections.append(b"SNET" + _pack_net(sensor.weights, sensor.biases, sensor.activation))
    if latents is not None:
        L = np.atleast_2d(latents)
        sections.append(b"LATS" + _u32(L.shape[0]) + _u32(L.shape[1]) + _reals(L))
    if config:
        text = encode_config(config).encode("utf-8")
        sections.append(b"CONF" + _u32(len(text)) + text)
    blob = MAGIC + _u32(VERSION) + _u32(len(sections)) + b"".join(sections)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint reading {what} at byte offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def reals(self, count, what):
        return np.frombuffer(self.take(8 * count, what), dtype="<f8").astype(np.float64)


def _read_net(r):
    head = r.take(1, "output head")[0]
    if head >= len(_HEADS):
        raise FormatError(f"unknown output head code {head} at byte offset {r.pos - 1}")
    t = r.u32("piece count")
    if t < 1:
        raise FormatError("activation needs at least one piece")
    bps = r.reals(t - 1, "breakpoints")
    slopes = r.reals(t, "slopes")
    nlayers = r.u32("layer count")
    if nlayers < 1:
        raise FormatError("network has no layers")
    dims = [r.u32("layer dims") for _ in range(nlayers + 1)]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(r.reals(fan_in * fan_out, "weights").reshape(fan_out, fan_in))
        biases.append(r.reals(fan_out, "biases"))
    act = PiecewiseLinear(tuple(bps), tuple(slopes))
    return weights, biases, act, _HEADS[head]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic: expected {MAGIC!r}, found {magic!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    ck = Checkpoint()
    for _ in range(r.u32("section count")):
        tag = r.take(4, "section tag")
        if tag == b"GEN ":
            W, b, act, head = _read_net(r)
            ck.generator = GeneratorModel(W, b, act, head)
        elif tag == b"SNET":
            W, b, act, _ = _read_net(r)
            ck.sensor = MeasurementOperator("network", weights=W, biases=b, activation=act)
        elif tag == b"SLIN":
            m, n = r.u32("m"), r.u32("n")
            ck.sensor = MeasurementOperator("linear", matrix=r.reals(m * n, "matrix").reshape(m, n))
        elif tag == b"LATS":
            count, k = r.u32("latent count"), r.u32("latent dim")
            ck.latents = r.reals(count * k, "latents").reshape(count, k)
        elif tag == b"CONF":
            size = r.u32("config length")
            ck.config = decode_config(r.take(size, "config").decode("utf-8"))
        else:
            raise FormatError(f"unknown section tag {tag!r} at byte offset {r.pos - 4}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last section")
    return ck
