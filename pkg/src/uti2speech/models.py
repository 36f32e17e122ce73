"""The 3-D convolutional generator (video block to mel vectors) and the
patch discriminator (mel patch to 10 realness scores)."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import FormatError
from .rng import stream
from .tensor import (
    BatchNormState,
    Tensor,
    _active_tape,
    add,
    batch_norm,
    conv2d,
    conv3d,
    dense,
    max_pool2d,
    relu,
    reshape,
    swish,
    tanh,
    zero_pad2d,
)

_CKP_HEADER = struct.Struct("<4sI32sI")


class CheckpointError(RuntimeError):
    """Checkpoint does not match the expected architecture."""


def _same_out(extent: int, stride: int) -> int:
    return -(-extent // stride)


def _same_pad_before(extent: int, k: int, stride: int) -> int:
    total = max((_same_out(extent, stride) - 1) * stride + k - extent, 0)
    return total // 2


def copy_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    # Tensors are immutable; a fresh dict is a deep copy.
    return dict(params)


def params_equal(a: dict[str, Tensor], b: dict[str, Tensor]) -> bool:
    if a.keys() != b.keys():
        return False
    return all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape))


# ---------------------------------------------------------------------------
# Generator


@dataclass(frozen=True)
class GeneratorArch:
    """Canonical instance: three strided 3-D conv stages (temporal stride 5
    turns 25 input frames into 5 output steps), spatial max pooling, then a
    dense head shared across the 5 time steps."""

    input_frames: int = 25
    input_height: int = 64
    input_width: int = 128
    conv_filters: tuple[int, ...] = (16, 32, 64)
    conv_kernels: tuple[tuple[int, int, int], ...] = ((5, 5, 5), (3, 3, 3), (3, 3, 3))
    conv_strides: tuple[tuple[int, int, int], ...] = ((5, 2, 2), (1, 2, 2), (1, 2, 2))
    pool: int = 2
    hidden: int = 500
    out_frames: int = 5
    n_mels: int = 80

    def feature_shape(self) -> tuple[int, int, int, int]:
        t, h, w = self.input_frames, self.input_height, self.input_width
        c = 1
        for filters, strides in zip(self.conv_filters, self.conv_strides):
            t, h, w = (_same_out(t, strides[0]), _same_out(h, strides[1]), _same_out(w, strides[2]))
            c = filters
        return t, h, w, c

    def validate(self) -> None:
        if len(self.conv_filters) != len(self.conv_kernels) or len(self.conv_filters) != len(
            self.conv_strides
        ):
            raise ValueError("conv_filters, conv_kernels, conv_strides must align")
        t, h, w, _ = self.feature_shape()
        if t != self.out_frames:
            raise ValueError(
                f"temporal extent after convs is {t}, expected {self.out_frames}"
            )
        if h % self.pool or w % self.pool:
            raise ValueError(f"pool {self.pool} must divide feature extents {(h, w)}")
        if sum(int(np.prod(s)) for s in self.param_shapes().values()) >= 10**7:
            raise ValueError("generator parameter budget is 10^7")

    def flat_features(self) -> int:
        t, h, w, c = self.feature_shape()
        return (h // self.pool) * (w // self.pool) * c

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        for i, (filters, kernel) in enumerate(zip(self.conv_filters, self.conv_kernels)):
            shapes[f"conv{i}.w"] = (*kernel, cin, filters)
            shapes[f"conv{i}.b"] = (filters,)
            cin = filters
        shapes["dense0.w"] = (self.flat_features(), self.hidden)
        shapes["dense0.b"] = (self.hidden,)
        shapes["dense1.w"] = (self.hidden, self.n_mels)
        shapes["dense1.b"] = (self.n_mels,)
        return shapes

    def descriptor(self) -> dict:
        return {
            "kind": "generator",
            "input": [self.input_frames, self.input_height, self.input_width],
            "conv_filters": list(self.conv_filters),
            "conv_kernels": [list(k) for k in self.conv_kernels],
            "conv_strides": [list(s) for s in self.conv_strides],
            "pool": self.pool,
            "hidden": self.hidden,
            "out_frames": self.out_frames,
            "n_mels": self.n_mels,
        }


MINI_GENERATOR = GeneratorArch(
    input_height=8,
    input_width=16,
    conv_filters=(3, 4),
    conv_kernels=((5, 3, 3), (3, 3, 3)),
    conv_strides=((5, 2, 2), (1, 2, 2)),
    hidden=6,
)


class Generator:
    def __init__(self, arch: GeneratorArch, params: dict[str, Tensor]):
        arch.validate()
        expected = arch.param_shapes()
        if {k: v.shape for k, v in params.items()} != expected:
            raise ValueError("parameter table does not match the architecture")
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: GeneratorArch, seed: int) -> "Generator":
        arch.validate()
        params: dict[str, Tensor] = {}
        cin = 1
        for i, (filters, kernel) in enumerate(zip(arch.conv_filters, arch.conv_kernels)):
            rng = stream(seed, "generator", f"conv{i}")
            fan_in = int(np.prod(kernel)) * cin
            params[f"conv{i}.w"] = _he_uniform(rng, (*kernel, cin, filters), fan_in)
            params[f"conv{i}.b"] = Tensor(np.zeros(filters))
            cin = filters
        flat = arch.flat_features()
        rng = stream(seed, "generator", "dense0")
        params["dense0.w"] = _he_uniform(rng, (flat, arch.hidden), flat)
        params["dense0.b"] = Tensor(np.zeros(arch.hidden))
        rng = stream(seed, "generator", "dense1")
        params["dense1.w"] = _he_uniform(rng, (arch.hidden, arch.n_mels), arch.hidden)
        params["dense1.b"] = Tensor(np.zeros(arch.n_mels))
        return cls(arch, params)

    def forward(self, blocks, mode: str = "infer", frozen: bool = False) -> Tensor:
        """Map ultrasound blocks to mel vectors.

        Accepts one block [T,H,W] / [T,H,W,1] or a batch [B,T,H,W,1];
        returns [out_frames, n_mels] or [B, out_frames, n_mels].
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        a = self.arch
        x = blocks if isinstance(blocks, Tensor) else Tensor(blocks)
        single = False
        if x.shape == (a.input_frames, a.input_height, a.input_width):
            x = reshape(x, (1, *x.shape, 1))
            single = True
        elif x.shape == (a.input_frames, a.input_height, a.input_width, 1):
            x = reshape(x, (1, *x.shape))
            single = True
        elif not (
            x.ndim == 5
            and x.shape[1:] == (a.input_frames, a.input_height, a.input_width, 1)
        ):
            raise ValueError(
                f"expected blocks shaped [B,{a.input_frames},{a.input_height},"
                f"{a.input_width},1], got {x.shape}"
            )
        tape = _active_tape()
        if tape is not None and not frozen:
            tape.watch(self.params.values())
        h = x
        for i, strides in enumerate(self.arch.conv_strides):
            h = conv3d(h, self.params[f"conv{i}.w"], strides, "same")
            h = swish(add(h, self.params[f"conv{i}.b"]))
        h = max_pool2d(h, a.pool)
        h = reshape(h, (h.shape[0], a.out_frames, a.flat_features()))
        h = swish(dense(h, self.params["dense0.w"], self.params["dense0.b"]))
        out = dense(h, self.params["dense1.w"], self.params["dense1.b"])
        return reshape(out, (a.out_frames, a.n_mels)) if single else out


# ---------------------------------------------------------------------------
# Discriminator


@dataclass(frozen=True)
class DiscriminatorArch:
    """Five-conv patch scorer over an 80x5 mel patch (mel bins as height).

    The stride chain maps 80x5 through 40x3, 20x2, 10x1, a zero pad, 11x2,
    another zero pad, and a final valid conv to 10x1: ten tanh scores.
    """

    input_height: int = 80
    input_width: int = 5
    conv_filters: tuple[int, ...] = (64, 128, 256, 512, 1)
    conv_kernels: tuple[tuple[int, int], ...] = ((4, 4), (4, 4), (4, 4), (2, 2), (4, 4))
    conv_strides: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (2, 2), (1, 1), (1, 1))
    conv_padding: tuple[str, ...] = ("same", "same", "same", "valid", "valid")
    conv_activation: tuple[str, ...] = ("relu", "relu", "relu", "relu", "tanh")
    # Zero-padding layers (pad 1) sit before these conv indices.
    pad_before: tuple[int, ...] = (3, 4)
    # Batch norm follows every conv but the last.
    bn_position: str = "post"

    def layer_geometry(self) -> list[tuple[int, int]]:
        """Spatial extent after each stage, starting from the input."""
        h, w = self.input_height, self.input_width
        sizes = [(h, w)]
        for i, (k, s, pad) in enumerate(
            zip(self.conv_kernels, self.conv_strides, self.conv_padding)
        ):
            if i in self.pad_before:
                h, w = h + 2, w + 2
            if pad == "same":
                h, w = _same_out(h, s[0]), _same_out(w, s[1])
            else:
                h, w = (h - k[0]) // s[0] + 1, (w - k[1]) // s[1] + 1
            sizes.append((h, w))
        return sizes

    def n_outputs(self) -> int:
        h, w = self.layer_geometry()[-1]
        return h * w

    def validate(self) -> None:
        if self.bn_position not in ("post", "pre"):
            raise ValueError("bn_position must be 'post' or 'pre'")
        for h, w in self.layer_geometry():
            if h < 1 or w < 1:
                raise ValueError("discriminator stack collapses below 1x1")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        cin = 1
        n = len(self.conv_filters)
        for i, (filters, kernel) in enumerate(zip(self.conv_filters, self.conv_kernels)):
            shapes[f"conv{i}.w"] = (*kernel, cin, filters)
            shapes[f"conv{i}.b"] = (filters,)
            if i < n - 1:
                shapes[f"bn{i}.gamma"] = (filters,)
                shapes[f"bn{i}.beta"] = (filters,)
            cin = filters
        return shapes

    def descriptor(self) -> dict:
        return {
            "kind": "discriminator",
            "input": [self.input_height, self.input_width],
            "conv_filters": list(self.conv_filters),
            "conv_kernels": [list(k) for k in self.conv_kernels],
            "conv_strides": [list(s) for s in self.conv_strides],
            "conv_padding": list(self.conv_padding),
            "conv_activation": list(self.conv_activation),
            "pad_before": list(self.pad_before),
            "bn_position": self.bn_position,
        }


MINI_DISCRIMINATOR = DiscriminatorArch(conv_filters=(4, 8, 12, 16, 1))


class Discriminator:
    def __init__(
        self,
        arch: DiscriminatorArch,
        params: dict[str, Tensor],
        bn_states: list[BatchNormState] | None = None,
    ):
        arch.validate()
        expected = arch.param_shapes()
        if {k: v.shape for k, v in params.items()} != expected:
            raise ValueError("parameter table does not match the architecture")
        self.arch = arch
        self.params = params
        if bn_states is None:
            bn_states = [
                BatchNormState.create(f) for f in arch.conv_filters[:-1]
            ]
        self.bn_states = bn_states

    @classmethod
    def init(cls, arch: DiscriminatorArch, seed: int) -> "Discriminator":
        arch.validate()
        params: dict[str, Tensor] = {}
        cin = 1
        n = len(arch.conv_filters)
        for i, (filters, kernel) in enumerate(zip(arch.conv_filters, arch.conv_kernels)):
            rng = stream(seed, "discriminator", f"conv{i}")
            fan_in = int(np.prod(kernel)) * cin
            params[f"conv{i}.w"] = _he_uniform(rng, (*kernel, cin, filters), fan_in)
            params[f"conv{i}.b"] = Tensor(np.zeros(filters))
            if i < n - 1:
                params[f"bn{i}.gamma"] = Tensor(np.ones(filters))
                params[f"bn{i}.beta"] = Tensor(np.zeros(filters))
            cin = filters
        return cls(arch, params)

    def forward(self, patches, mode: str = "infer", frozen: bool = False) -> Tensor:
        """Score mel patches; returns [n_outputs] or [B, n_outputs] in (-1, 1)."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        a = self.arch
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        single = False
        if x.shape == (a.input_height, a.input_width):
            x = reshape(x, (1, *x.shape, 1))
            single = True
        elif x.shape == (a.input_height, a.input_width, 1):
            x = reshape(x, (1, *x.shape))
            single = True
        elif not (x.ndim == 4 and x.shape[1:] == (a.input_height, a.input_width, 1)):
            raise ValueError(
                f"expected patches shaped [B,{a.input_height},{a.input_width},1], got {x.shape}"
            )
        tape = _active_tape()
        if tape is not None and not frozen:
            tape.watch(self.params.values())
        h = x
        n = len(a.conv_filters)
        for i in range(n):
            if i in a.pad_before:
                h = zero_pad2d(h, 1)
            h = conv2d(h, self.params[f"conv{i}.w"], a.conv_strides[i], a.conv_padding[i])
            h = add(h, self.params[f"conv{i}.b"])
            act = relu if a.conv_activation[i] == "relu" else tanh
            if i < n - 1 and a.bn_position == "pre":
                h = batch_norm(
                    h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                    self.bn_states[i], mode,
                )
            h = act(h)
            if i < n - 1 and a.bn_position == "post":
                h = batch_norm(
                    h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                    self.bn_states[i], mode,
                )
        out = reshape(h, (h.shape[0], a.n_outputs()))
        return reshape(out, (a.n_outputs(),)) if single else out

    def export_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, st in enumerate(self.bn_states):
            out[f"bn{i}.mean"] = st.mean.copy()
            out[f"bn{i}.var"] = st.var.copy()
        return out

    def load_buffers(self, buffers: dict[str, np.ndarray]) -> None:
        for i, st in enumerate(self.bn_states):
            st.mean = buffers[f"bn{i}.mean"].copy()
            st.var = buffers[f"bn{i}.var"].copy()


def receptive_field_heights(arch: DiscriminatorArch) -> list[tuple[int, int]]:
    """Input-height interval [lo, hi) feeding each of the patch outputs,
    derived from the kernel/stride/padding chain."""
    # Fold layers last-to-first: output j covers rows [a + j*b, a + j*b + sz).
    a_off, b_step, size = 0, 1, 1
    n = len(arch.conv_filters)
    sizes = arch.layer_geometry()
    for i in reversed(range(n)):
        k, s = arch.conv_kernels[i][0], arch.conv_strides[i][0]
        h_in = sizes[i][0] + (2 if i in arch.pad_before else 0)
        pad = _same_pad_before(h_in, k, s) if arch.conv_padding[i] == "same" else 0
        a_off = a_off * s - pad
        b_step = b_step * s
        size = (size - 1) * s + k
        if i in arch.pad_before:
            a_off -= 1
    fields = []
    h_rows = arch.input_height
    for j in range(arch.n_outputs()):
        lo = a_off + j * b_step
        hi = lo + size
        fields.append((max(lo, 0), min(hi, h_rows)))
    return fields


def predict_mel(gen: Generator, frames: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Standardized mel prediction for every frame of a preprocessed clip.

    The clip is edge-replicated by half the input context so each frame is
    the center of one window; overlapping 5-frame outputs are averaged per
    frame position.
    """
    a = gen.arch
    half_in = a.input_frames // 2
    half_out = a.out_frames // 2
    n_frames = frames.shape[0]
    padded = np.concatenate(
        [np.repeat(frames[:1], half_in, axis=0), frames, np.repeat(frames[-1:], half_in, axis=0)]
    )
    acc = np.zeros((n_frames, a.n_mels))
    count = np.zeros(n_frames)
    for lo in range(0, n_frames, batch_size):
        centers = range(lo, min(lo + batch_size, n_frames))
        blocks = np.stack([padded[c : c + a.input_frames] for c in centers])[..., None]
        preds = gen.forward(Tensor(blocks), mode="infer").data
        for bi, center in enumerate(centers):
            lo_row = max(center - half_out, 0)
            hi_row = min(center + half_out + 1, n_frames)
            rows = np.arange(lo_row, hi_row)
            acc[rows] += preds[bi, rows - (center - half_out)]
            count[rows] += 1
    return acc / count[:, None]


# ---------------------------------------------------------------------------
# Checkpoints


def descriptor_hash(descriptor: dict) -> bytes:
    return hashlib.sha256(json.dumps(descriptor, sort_keys=True).encode()).digest()


def save_params(
    params: dict[str, Tensor],
    descriptor: dict,
    path,
    buffers: dict[str, np.ndarray] | None = None,
) -> None:
    buffers = buffers or {}
    entries: list[tuple[str, int, np.ndarray]] = []
    for name, p in params.items():
        entries.append((name, 0, p.data))
    for name, b in buffers.items():
        entries.append((name, 1, np.asarray(b, dtype=np.float64)))
    with open(path, "wb") as f:
        f.write(_CKP_HEADER.pack(b"CKP1", 1, descriptor_hash(descriptor), len(entries)))
        for name, kind, arr in entries:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", kind, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(
    path, descriptor: dict, expected_shapes: dict[str, tuple[int, ...]]
) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Read a checkpoint, validating the architecture hash and shape table."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKP_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, stored_hash, n_entries = _CKP_HEADER.unpack_from(raw)
    if magic != b"CKP1":
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if stored_hash != descriptor_hash(descriptor):
        raise CheckpointError(f"{path}: checkpoint was written for a different architecture")
    offset = _CKP_HEADER.size
    table: list[tuple[str, int, tuple[int, ...]]] = []
    try:
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            kind, ndim = struct.unpack_from("<BB", raw, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            table.append((name, kind, tuple(shape)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated shape table at offset {offset}") from exc
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, kind, shape in table:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise FormatError(f"{path}: truncated payload at offset {offset}")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape)
        offset = end
        if kind == 0:
            params[name] = Tensor(arr.copy())
        else:
            buffers[name] = arr.copy()
    if {k: v.shape for k, v in params.items()} != expected_shapes:
        raise CheckpointError(f"{path}: parameter shape table does not match the architecture")
    return params, buffers
