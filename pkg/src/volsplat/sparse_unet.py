"""Forward-only sparse 3D U-Net for residual voxel-feature refinement.

All convolutions are submanifold (output occupancy == input occupancy)
except the explicit stride-2 down / transposed up pair, so the residual
field lives on exactly the input voxel set.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidInputError, WeightLoadError

WEIGHT_MAGIC = b"VSWT"

# 27 kernel offsets in a fixed order; index k maps to (dz, dy, dx) via
# weight[di+1, dj+1, dk+1].
_OFFSETS = [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1) for dk in (-1, 0, 1)]


@dataclass
class SparseTensor:
    coords: np.ndarray  # V x 3 int64, unique, in units of the current stride
    feats: np.ndarray  # V x C
    stride: int = 1

    def __post_init__(self):
        if self.coords.shape[0] != self.feats.shape[0]:
            raise InvalidInputError("coords/feats row mismatch")
        if self.stride < 1 or (self.stride & (self.stride - 1)):
            raise InvalidInputError("stride must be a power of two")


_BITS = 21
_BIAS = 1 << (_BITS - 1)


def _encode(coords: np.ndarray) -> np.ndarray:
    c = coords.astype(np.int64) + _BIAS
    if np.any(c < 0) or np.any(c >= (1 << _BITS)):
        raise InvalidInputError("voxel coordinates out of supported range")
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


class _CoordIndex:
    """Sorted-key lookup table from voxel coordinate to row index."""

    def __init__(self, coords: np.ndarray):
        self.codes = _encode(coords)
        self.order = np.argsort(self.codes, kind="stable")
        self.sorted_codes = self.codes[self.order]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coord, -1 where absent."""
        q = _encode(coords)
        if self.sorted_codes.size == 0:
            return np.full(q.shape, -1, np.int64)
        pos = np.clip(np.searchsorted(self.sorted_codes, q), 0, self.sorted_codes.size - 1)
        hit = self.sorted_codes[pos] == q
        return np.where(hit, self.order[pos], -1)


def _check_kernel(w: np.ndarray, cin: int) -> None:
    if w.ndim != 5 or w.shape[:3] != (3, 3, 3) or w.shape[3] != cin:
        raise WeightLoadError(f"kernel shape {w.shape} does not match 3x3x3x{cin}xCout")


def submanifold_conv(
    x: SparseTensor, w: np.ndarray, b: Optional[np.ndarray] = None
) -> SparseTensor:
    """3x3x3 sparse conv whose output occupancy equals the input occupancy."""
    _check_kernel(w, x.feats.shape[1])
    cout = w.shape[4]
    out = np.zeros((x.coords.shape[0], cout))
    if b is not None:
        out += b
    index = _CoordIndex(x.coords)
    for di, dj, dk in _OFFSETS:
        nbr = x.coords + np.array([di, dj, dk], np.int64)
        rows = index.lookup(nbr)
        hit = rows >= 0
        if np.any(hit):
            out[hit] += x.feats[rows[hit]] @ w[di + 1, dj + 1, dk + 1]
    return SparseTensor(coords=x.coords.copy(), feats=out, stride=x.stride)


def downsample_coords(coords: np.ndarray) -> np.ndarray:
    """Unique floor-divided-by-2 coords, lexicographically sorted."""
    return np.unique(coords >> 1, axis=0) if coords.size else coords.copy()


def strided_down(x: SparseTensor, w: np.ndarray, b: Optional[np.ndarray] = None) -> SparseTensor:
    """Stride-2 sparse conv; output site o gathers inputs at 2*o + offset."""
    _check_kernel(w, x.feats.shape[1])
    cout = w.shape[4]
    out_coords = downsample_coords(x.coords)
    out = np.zeros((out_coords.shape[0], cout))
    if b is not None:
        out += b
    index = _CoordIndex(x.coords)
    for di, dj, dk in _OFFSETS:
        src = out_coords * 2 + np.array([di, dj, dk], np.int64)
        rows = index.lookup(src)
        hit = rows >= 0
        if np.any(hit):
            out[hit] += x.feats[rows[hit]] @ w[di + 1, dj + 1, dk + 1]
    return SparseTensor(coords=out_coords, feats=out, stride=x.stride * 2)


def transposed_up(
    x: SparseTensor,
    target_coords: np.ndarray,
    w: np.ndarray,
    b: Optional[np.ndarray] = None,
) -> SparseTensor:
    """Adjoint of strided_down onto the saved finer-level coordinate set.

    Fine site u receives w[offset] . x[o] from every coarse site o with
    u = 2*o + offset; sites with no contribution get bias only.
    """
    _check_kernel(w, x.feats.shape[1])
    cout = w.shape[4]
    out = np.zeros((target_coords.shape[0], cout))
    if b is not None:
        out += b
    if target_coords.size:
        index = _CoordIndex(x.coords)
        for di, dj, dk in _OFFSETS:
            # u = 2 o + d  =>  o = (u - d) / 2 when the division is exact
            num = target_coords - np.array([di, dj, dk], np.int64)
            exact = ~np.any(num & 1, axis=1)
            if not np.any(exact):
                continue
            rows = np.full(target_coords.shape[0], -1, np.int64)
            rows[exact] = index.lookup(num[exact] >> 1)
            hit = rows >= 0
            if np.any(hit):
                out[hit] += x.feats[rows[hit]] @ w[di + 1, dj + 1, dk + 1]
    return SparseTensor(coords=target_coords.copy(), feats=out, stride=max(1, x.stride // 2))


def pointwise_conv(x: SparseTensor, w: np.ndarray, b: Optional[np.ndarray] = None) -> SparseTensor:
    """1x1x1 linear layer over the feature dimension."""
    if w.ndim != 2 or w.shape[0] != x.feats.shape[1]:
        raise WeightLoadError(f"pointwise weight shape {w.shape} does not match C={x.feats.shape[1]}")
    out = x.feats @ w
    if b is not None:
        out = out + b
    return SparseTensor(coords=x.coords.copy(), feats=out, stride=x.stride)


@dataclass(frozen=True)
class UNetSpec:
    levels: Tuple[int, ...] = ()  # channel width per level; () -> [C, 2C, 4C]
    blocks_per_level: int = 2
    activation: str = "relu"  # relu | none

    def __post_init__(self):
        if self.levels and (len(self.levels) < 2 or any(c < 1 for c in self.levels)):
            raise InvalidInputError("need >= 2 levels with positive widths")
        if self.activation not in ("relu", "none"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")

    def widths(self, in_channels: int) -> Tuple[int, ...]:
        return self.levels if self.levels else (in_channels, 2 * in_channels, 4 * in_channels)


@dataclass
class WeightBlob:
    tensors: "Dict[str, np.ndarray]" = field(default_factory=dict)

    def checksum(self) -> int:
        crc = 0
        for name in self.tensors:
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(self.tensors[name], "<f4").tobytes(), crc)
        return crc

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise WeightLoadError(f"missing weight tensor {name!r}") from None


def layer_plan(spec: UNetSpec, in_channels: int) -> List[dict]:
    """Ordered layer descriptors: name, op, in/out channels, activation."""
    widths = spec.widths(in_channels)
    act = spec.activation
    plan: List[dict] = []

    def add(name, op, cin, cout, activation=None):
        plan.append({"name": name, "op": op, "cin": cin, "cout": cout,
                     "act": act if activation is None else activation})

    cin = in_channels
    for lvl, width in enumerate(widths):
        if lvl > 0:
            add(f"down{lvl}", "strided", cin, width)
            cin = width
        for blk in range(spec.blocks_per_level):
            add(f"enc{lvl}.block{blk}", "sub", cin, width)
            cin = width
    for lvl in range(len(widths) - 2, -1, -1):
        width = widths[lvl]
        add(f"up{lvl}", "up", cin, width)
        add(f"dec{lvl}.fuse", "point", 2 * width, width)
        for blk in range(spec.blocks_per_level):
            add(f"dec{lvl}.block{blk}", "sub", width, width)
        cin = width
    add("head", "point", cin, in_channels, activation="none")
    return plan


def _tensor_shapes(plan: Sequence[dict]) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {}
    for layer in plan:
        if layer["op"] in ("sub", "strided", "up"):
            shapes[layer["name"] + ".weight"] = (3, 3, 3, layer["cin"], layer["cout"])
        else:
            shapes[layer["name"] + ".weight"] = (layer["cin"], layer["cout"])
        shapes[layer["name"] + ".bias"] = (layer["cout"],)
    return shapes


def random_weights(spec: UNetSpec, in_channels: int, seed: int = 0) -> WeightBlob:
    """Kaiming-uniform initialized blob matching the spec's layer shapes."""
    rng = np.random.default_rng(seed)
    blob = WeightBlob()
    for name, shape in _tensor_shapes(layer_plan(spec, in_channels)).items():
        if name.endswith(".bias"):
            blob.tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(6.0 / fan_in)
            blob.tensors[name] = rng.uniform(-bound, bound, size=shape)
    return blob


def zero_weights(spec: UNetSpec, in_channels: int) -> WeightBlob:
    blob = WeightBlob()
    for name, shape in _tensor_shapes(layer_plan(spec, in_channels)).items():
        blob.tensors[name] = np.zeros(shape)
    return blob


def _validate(blob: WeightBlob, plan: Sequence[dict]) -> None:
    for name, shape in _tensor_shapes(plan).items():
        t = blob[name]
        if t.shape != shape:
            raise WeightLoadError(f"tensor {name!r} has shape {t.shape}, expected {shape}")


def _act(feats: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(feats, 0.0) if kind == "relu" else feats


def unet_forward(x: SparseTensor, spec: UNetSpec, weights: WeightBlob) -> SparseTensor:
    """Residual field on exactly the input voxel set."""
    if x.stride != 1:
        raise InvalidInputError("unet_forward expects a stride-1 tensor")
    plan = layer_plan(spec, x.feats.shape[1])
    _validate(weights, plan)
    n_levels = len(spec.widths(x.feats.shape[1]))

    skips: List[SparseTensor] = []
    cur = x
    i = 0
    by_name = {l["name"]: l for l in plan}

    def run(layer, tensor, **kw):
        w = weights[layer["name"] + ".weight"]
        b = weights[layer["name"] + ".bias"]
        if layer["op"] == "sub":
            out = submanifold_conv(tensor, w, b)
        elif layer["op"] == "strided":
            out = strided_down(tensor, w, b)
        elif layer["op"] == "up":
            out = transposed_up(tensor, kw["target_coords"], w, b)
        else:
            out = pointwise_conv(tensor, w, b)
        out.feats = _act(out.feats, layer["act"])
        return out

    for lvl in range(n_levels):
        if lvl > 0:
            cur = run(by_name[f"down{lvl}"], cur)
        for blk in range(spec.blocks_per_level):
            cur = run(by_name[f"enc{lvl}.block{blk}"], cur)
        skips.append(cur)
    for lvl in range(n_levels - 2, -1, -1):
        skip = skips[lvl]
        cur = run(by_name[f"up{lvl}"], cur, target_coords=skip.coords)
        cur = SparseTensor(cur.coords, np.concatenate([cur.feats, skip.feats], axis=1), cur.stride)
        cur = run(by_name[f"dec{lvl}.fuse"], cur)
        for blk in range(spec.blocks_per_level):
            cur = run(by_name[f"dec{lvl}.block{blk}"], cur)
    return run(by_name["head"], cur)


def residual_refine(v: SparseTensor, r: SparseTensor) -> SparseTensor:
    """Refined features V' = V + R on an identical coordinate set."""
    if v.coords.shape != r.coords.shape or np.any(v.coords != r.coords):
        raise InvalidInputError("residual coords must match input coords")
    return SparseTensor(coords=v.coords.copy(), feats=v.feats + r.feats, stride=v.stride)


def save_weights(path, blob: WeightBlob) -> None:
    body = bytearray()
    body += WEIGHT_MAGIC + struct.pack("<I", len(blob.tensors))
    for name, tensor in blob.tensors.items():
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", tensor.ndim)
        body += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        body += np.ascontiguousarray(tensor, "<f4").tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as f:
        f.write(bytes(body) + struct.pack("<I", crc))


def load_weights(path) -> WeightBlob:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad weight-blob header")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != crc_stored:
        raise WeightLoadError(f"{path}: checksum mismatch")
    n = struct.unpack("<I", body[4:8])[0]
    blob = WeightBlob()
    off = 8
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        count = int(np.prod(dims))
        data = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        off += 4 * count
        blob.tensors[name] = data.reshape(dims).astype(float)
    if off != len(body):
        raise FormatError(f"{path}: trailing bytes in weight blob")
    return blob
