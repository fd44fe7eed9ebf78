"""CSV interchange and the PBN1 binary model format.

PBN1 layout (all integers uint32 little-endian, all reals float64
little-endian)::

    b"PBN1"
    layer_count
    layer_count x (N, M, kind_code)
    layer_count x (W as N*M row-major reals, theta0 as N reals, bias as M reals)

kind codes: 0 TED, 1 TG, 2 EXP, 3 LINEAR.
"""
import io
import struct

import numpy as np

from .errors import InvalidInput
from .expfamily import ActivationKind
from .pbn import PbnLayer, PbnNetwork
from .saddle import LayerMap

__all__ = ["read_matrix", "write_csv", "format_float", "save_model", "load_model", "MAGIC"]

MAGIC = b"PBN1"
_U32 = struct.Struct("<I")


def format_float(v):
    return format(float(v), ".17g")


def read_matrix(path, header=False):
    """Rows of comma-separated reals; ``#`` lines are comments.

    With `header` the first non-comment row is treated as column names.
    """
    rows = []
    with open(path) as fh:
        skipped = not header
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not skipped:
                skipped = True
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise InvalidInput(f"{path}:{lineno}: not a row of numbers") from None
    if not rows:
        raise InvalidInput(f"{path}: no data rows")
    if len({len(r) for r in rows}) != 1:
        raise InvalidInput(f"{path}: rows have different lengths")
    a = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{path}: non-finite entries")
    return a


def write_csv(fh, rows, columns=None, meta=None, footer=None):
    """Write `rows` to an open text file.

    `meta` (a mapping) becomes ``# key: value`` lines above the data, `footer`
    (a list of strings) becomes ``#`` lines below it.
    """
    for key, value in (meta or {}).items():
        fh.write(f"# {key}: {value}\n")
    if columns is not None:
        fh.write(",".join(columns) + "\n")
    for row in rows:
        fh.write(",".join(v if isinstance(v, str) else format_float(v) for v in row) + "\n")
    for line in footer or ():
        fh.write(f"# {line}\n")


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dump_model(net):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(len(net.layers)))
    for layer in net.layers:
        N, M = layer.map.shape
        buf.write(struct.pack("<III", N, M, layer.kind.code))
    for layer in net.layers:
        buf.write(_f64(layer.W))
        buf.write(_f64(layer.map.theta0))
        buf.write(_f64(layer.bias))
    return buf.getvalue()


def parse_model(data):
    if data[:4] != MAGIC:
        raise InvalidInput("not a PBN1 model file (bad magic)")
    try:
        (count,) = _U32.unpack_from(data, 4)
        offset = 8
        dims = []
        for _ in range(count):
            dims.append(struct.unpack_from("<III", data, offset))
            offset += 12

        def take(n):
            nonlocal offset
            end = offset + 8 * n
            if end > len(data):
                raise InvalidInput("truncated PBN1 model file")
            out = np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64)
            offset = end
            return out

        layers = []
        for N, M, code in dims:
            W = take(N * M).reshape(N, M)
            theta0 = take(N)
            bias = take(M)
            layers.append(PbnLayer(LayerMap(W, ActivationKind.from_code(code), theta0), bias))
    except struct.error:
        raise InvalidInput("truncated PBN1 model file") from None
    if offset != len(data):
        raise InvalidInput("trailing bytes after PBN1 model")
    return PbnNetwork(layers)


def save_model(net, path):
    with open(path, "wb") as fh:
        fh.write(dump_model(net))


def load_model(path):
    with open(path, "rb") as fh:
        return parse_model(fh.read())
