"""Binary checkpoint holding student and teacher weights in one file.

Layout (little-endian)::

    b"MUCA"  u16 version
    stage spec: u8 n_stages, u16 input_channels, u16 num_classes,
                u16 channels[n_stages], u16 decoder_channels, f64 dropout_rate
    u32 n_bytes, UTF-8 metadata as "key = value" lines
    u8 n_sections, then per section:
        u8 n_bytes, role tag ("student", "teacher", optional "ctsa")
        u32 n_arrays, then per array:
            u16 n_bytes, name; u8 ndim; u32 dims[ndim]; float32 data

The attention parameters belong to the student side of training and get
their own ``ctsa`` section; the teacher section never carries them.
"""
import io
import struct

import numpy as np

from .ctsa import CtsaParams
from .data import atomic_write_bytes
from .errors import DataError
from .model import SegModel, StageSpec
from . import tensor as T

MAGIC = b"MUCA"
VERSION = 1


class CheckpointError(DataError):
    pass


def _pack_str(buf, s, width):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<" + width, len(raw)))
    buf.write(raw)


def _write_arrays(buf, named):
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        _pack_str(buf, name, "H")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def dumps(student, teacher, ctsa=None, meta=None):
    spec = student.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<BHH", len(spec.channels), spec.input_channels, spec.num_classes))
    buf.write(struct.pack(f"<{len(spec.channels)}H", *spec.channels))
    buf.write(struct.pack("<Hd", spec.decoder_channels, spec.dropout_rate))
    meta = dict(meta or {})
    if ctsa is not None:
        meta["ctsa_heads"] = ctsa.heads
    text = "".join(f"{k} = {v}\n" for k, v in meta.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    sections = [("student", student), ("teacher", teacher)]
    if ctsa is not None:
        sections.append(("ctsa", ctsa))
    buf.write(struct.pack("<B", len(sections)))
    for tag, owner in sections:
        _pack_str(buf, tag, "B")
        _write_arrays(buf, [(k, v.data) for k, v in owner.named_parameters()])
    return buf.getvalue()


def save(path, student, teacher, ctsa=None, meta=None):
    atomic_write_bytes(path, dumps(student, teacher, ctsa, meta))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def string(self, width):
        (n,) = self.take("<" + width)
        return self.bytes(n).decode("utf-8")


def loads(raw, path="<bytes>"):
    """Parse checkpoint bytes into a dict with spec, student, teacher, ctsa, meta."""
    r = _Reader(raw, path)
    if r.bytes(4) != MAGIC:
        raise CheckpointError(f"{path}: not a MUCA checkpoint (bad magic)")
    (version,) = r.take("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"this build reads version {VERSION}")
    n_stages, in_ch, k = r.take("<BHH")
    channels = r.take(f"<{n_stages}H")
    dec, rate = r.take("<Hd")
    spec = StageSpec(tuple(channels), in_ch, k, dec, rate)
    meta = {}
    for line in r.bytes(r.take("<I")[0]).decode("utf-8").splitlines():
        key, _, value = line.partition(" = ")
        meta[key] = value
    sections = {}
    for _ in range(r.take("<B")[0]):
        tag = r.string("B")
        arrays = {}
        for _ in range(r.take("<I")[0]):
            name = r.string("H")
            (ndim,) = r.take("<B")
            shape = r.take(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(r.bytes(4 * count), dtype="<f4").reshape(shape).copy()
        sections[tag] = arrays
    if {"student", "teacher"} - sections.keys():
        raise CheckpointError(f"{path}: missing student or teacher section")
    student = SegModel(spec, params=sections["student"])
    teacher = SegModel(spec, params=sections["teacher"], requires_grad=False)
    ctsa = None
    ctsa_arrays = sections.get("ctsa")
    if ctsa_arrays:
        ctsa = CtsaParams(*(T.Tensor(ctsa_arrays[f"ctsa.{n}"], requires_grad=True)
                            for n in ("w_q", "w_k", "w_v", "w_out")),
                          heads=int(meta.get("ctsa_heads", 2)))
    return {"spec": spec, "student": student, "teacher": teacher, "ctsa": ctsa, "meta": meta}


def load(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(raw, path)
