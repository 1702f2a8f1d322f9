"""Twin convolutional sub-networks producing 64-d embeddings.

Two branches of identical topology but independent weights, one for
sketches and one for screenshots. Five convolutional blocks (one conv
layer in the first two blocks, two in the rest, each block closed by a
2x2 max-pool) are followed by three fully-connected layers; every layer
is ReLU-activated except the last, whose raw 64-dimensional output is
the embedding used for querying. Embeddings are deliberately not
L2-normalized; distances in training and querying are plain Euclidean.

The "full" profile matches the published topology (224 px input,
64/128/256/512/512 filters, 4096-unit hidden layers); the "desk" profile
is a scaled-down configuration that trains on a workstation while
exercising the identical code path.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, conv2d, dense, flatten, maxpool2, relu

EMBEDDING_DIM = 64
WEIGHTS_MAGIC = b"SWENC1"
N_BLOCKS = 5


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int
    input_channels: int
    block_filters: tuple
    fc_sizes: tuple
    profile: str

    def __post_init__(self):
        if len(self.block_filters) != N_BLOCKS:
            raise ValueError(f"expected {N_BLOCKS} block filter counts, got {self.block_filters}")
        if len(self.fc_sizes) != 3:
            raise ValueError(f"expected 3 fully-connected sizes, got {self.fc_sizes}")
        if self.fc_sizes[-1] != EMBEDDING_DIM:
            raise ValueError(f"final layer must output {EMBEDDING_DIM} units")
        if self.input_size % (2**N_BLOCKS) != 0 or self.input_size <= 0:
            raise ValueError(f"input size must be a positive multiple of {2 ** N_BLOCKS}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    @property
    def spatial_after_blocks(self) -> int:
        return self.input_size // (2**N_BLOCKS)

    @property
    def flatten_dim(self) -> int:
        return self.block_filters[-1] * self.spatial_after_blocks**2

    def convs_in_block(self, block: int) -> int:
        return 1 if block < 2 else 2


DESK = EncoderConfig(64, 1, (8, 16, 32, 64, 64), (256, 256, 64), "desk")
FULL = EncoderConfig(224, 1, (64, 128, 256, 512, 512), (4096, 4096, 64), "full")


def profile_config(name: str, input_channels: int = 1) -> EncoderConfig:
    base = {"desk": DESK, "full": FULL}.get(name)
    if base is None:
        raise ValueError(f"unknown profile {name!r} (expected 'desk' or 'full')")
    if input_channels != base.input_channels:
        return EncoderConfig(base.input_size, input_channels, base.block_filters, base.fc_sizes, name)
    return base


def layer_shapes(config: EncoderConfig) -> list[tuple[str, tuple]]:
    """Parameter names and shapes of one branch, in forward order."""
    shapes = []
    cin = config.input_channels
    for b, filters in enumerate(config.block_filters):
        for c in range(config.convs_in_block(b)):
            shapes.append((f"b{b}.c{c}.w", (filters, cin, 3, 3)))
            shapes.append((f"b{b}.c{c}.b", (filters,)))
            cin = filters
    fan_in = config.flatten_dim
    for i, units in enumerate(config.fc_sizes):
        shapes.append((f"fc{i}.w", (units, fan_in)))
        shapes.append((f"fc{i}.b", (units,)))
        fan_in = units
    return shapes


def parameter_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_shapes(config))


class EncoderWeights:
    """Named parameter tensors for one branch (sketch or screenshot)."""

    def __init__(self, branch: str, config: EncoderConfig, params: dict):
        if branch not in ("sketch", "screenshot"):
            raise ValueError(f"branch must be 'sketch' or 'screenshot', got {branch!r}")
        expected = dict(layer_shapes(config))
        if set(params) != set(expected):
            mismatch = set(expected) ^ set(params)
            raise ValueError(f"parameter name mismatch: {sorted(mismatch)}")
        for name, tensor in params.items():
            if tensor.data.shape != expected[name]:
                raise ValueError(
                    f"{branch}/{name}: shape {tensor.data.shape} does not match config {expected[name]}"
                )
        self.branch = branch
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return [self.params[name] for name, _ in layer_shapes(self.config)]


@dataclass
class EncoderPair:
    """The two sub-networks; same topology, never shared storage."""

    config: EncoderConfig
    sketch: EncoderWeights
    screenshot: EncoderWeights


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_branch(branch: str, config: EncoderConfig, rng: np.random.Generator) -> EncoderWeights:
    params = {}
    for name, shape in layer_shapes(config):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 4:
            cout, cin, kh, kw = shape
            data = _glorot(rng, shape, cin * kh * kw, cout * kh * kw)
        else:
            m, n = shape
            data = _glorot(rng, shape, n, m)
        params[name] = Tensor(data, requires_grad=True)
    return EncoderWeights(branch, config, params)


def build(config: EncoderConfig, seed: int) -> EncoderPair:
    """Deterministically initialize both branches from one seed."""
    rng = np.random.default_rng(seed)
    sketch = _init_branch("sketch", config, rng)
    screenshot = _init_branch("screenshot", config, rng)
    return EncoderPair(config=config, sketch=sketch, screenshot=screenshot)


def forward(weights: EncoderWeights, x: Tensor) -> Tensor:
    """Differentiable forward pass from (C, H, W) input to 64-d embedding.

    Records onto the active gradient tape when one is open; with no tape
    this is a pure function. The flatten order is channel-major then
    row-major, which fixes the weight-file layout.
    """
    config = weights.config
    expected = (config.input_channels, config.input_size, config.input_size)
    if x.data.shape != expected:
        raise ValueError(f"input shape {x.data.shape} does not match encoder input {expected}")
    p = weights.params
    for b in range(N_BLOCKS):
        for c in range(config.convs_in_block(b)):
            x = relu(conv2d(x, p[f"b{b}.c{c}.w"], p[f"b{b}.c{c}.b"]))
        x = maxpool2(x)
    x = flatten(x)
    x = relu(dense(x, p["fc0.w"], p["fc0.b"]))
    x = relu(dense(x, p["fc1.w"], p["fc1.b"]))
    return dense(x, p["fc2.w"], p["fc2.b"])  # raw output, no final activation


def encode(weights: EncoderWeights, img) -> np.ndarray:
    """Inference-only embedding of a single image; returns float32 (64,)."""
    if isinstance(img, Tensor):
        x = img
    else:
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        x = Tensor(arr)
    out = forward(weights, x)
    return out.data.astype(np.float32).copy()


def preprocess(img: np.ndarray, config: EncoderConfig) -> Tensor:
    """Resize a [0, 1] raster to the encoder input and map it to [-1, 1]."""
    from . import imaging

    arr = np.asarray(img)
    if arr.ndim == 3 and config.input_channels == 1:
        arr = imaging.to_gray(arr)
    if arr.ndim == 2 and config.input_channels == 3:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim == 2:
        resized = imaging.resize(arr, config.input_size, config.input_size)
    else:
        resized = np.stack(
            [imaging.resize(arr[:, :, c], config.input_size, config.input_size) for c in range(3)],
            axis=2,
        )
    return imaging.normalize_signed(resized)


def embed_image(weights: EncoderWeights, img: np.ndarray) -> np.ndarray:
    """Whole-image embedding: preprocess then encode. Returns float32 (64,)."""
    return encode(weights, preprocess(img, weights.config))


def embed_cells(weights: EncoderWeights, img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Per-cell embeddings for segment queries.

    Each grid cell is cropped from the raster, resized up to the full
    encoder input and embedded independently, so a cell's embedding
    never sees the rest of the screen. Returns (rows, cols, 64).
    """
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError("cell embeddings expect a grayscale image")
    if rows < 1 or cols < 1:
        raise ValueError("grid must be at least 1x1")
    h, w = arr.shape
    ys = np.linspace(0, h, rows + 1).round().astype(int)
    xs = np.linspace(0, w, cols + 1).round().astype(int)
    out = np.zeros((rows, cols, EMBEDDING_DIM), dtype=np.float32)
    for r in range(rows):
        for c in range(cols):
            crop = arr[ys[r] : ys[r + 1], xs[c] : xs[c + 1]]
            out[r, c] = embed_image(weights, crop)
    return out


# ---------------------------------------------------------------------------
# Weights file: magic "SWENC1", config block, per-tensor records, CRC32
# ---------------------------------------------------------------------------


def _encode_config(config: EncoderConfig) -> bytes:
    fields = [config.input_size, config.input_channels, *config.block_filters, *config.fc_sizes]
    name = config.profile.encode()
    return struct.pack("<10I", *fields) + struct.pack("<B", len(name)) + name


def _pack_branch(weights: EncoderWeights) -> bytes:
    tag = weights.branch.encode()
    out = [struct.pack("<B", len(tag)), tag, struct.pack("<I", len(weights.params))]
    for name, _ in layer_shapes(weights.config):
        data = weights.params[name].data.astype("<f4")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        out.append(data.tobytes())
    return b"".join(out)


def save(pair: EncoderPair, path):
    """Write both branches; the round-trip is bit-exact."""
    body = _encode_config(pair.config)
    body += struct.pack("<B", 2)
    body += _pack_branch(pair.sketch)
    body += _pack_branch(pair.screenshot)
    blob = WEIGHTS_MAGIC + body
    with open(path, "wb") as fh:
        fh.write(blob + struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("weights file truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path) -> EncoderPair:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:6] != WEIGHTS_MAGIC:
        raise ValueError(f"not an encoder weights file: {path}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ValueError(f"weights file checksum mismatch: {path}")

    rd = _Reader(body)
    rd.take(6)
    fields = rd.unpack("<10I")
    (name_len,) = rd.unpack("<B")
    profile = rd.take(name_len).decode()
    config = EncoderConfig(fields[0], fields[1], tuple(fields[2:7]), tuple(fields[7:10]), profile)

    (n_branches,) = rd.unpack("<B")
    branches = {}
    for _ in range(n_branches):
        (tag_len,) = rd.unpack("<B")
        tag = rd.take(tag_len).decode()
        (n_tensors,) = rd.unpack("<I")
        params = {}
        for _ in range(n_tensors):
            (nl,) = rd.unpack("<H")
            name = rd.take(nl).decode()
            (ndim,) = rd.unpack("<B")
            shape = rd.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(shape).copy()
            params[name] = Tensor(data, requires_grad=True)
        branches[tag] = EncoderWeights(tag, config, params)
    if set(branches) != {"sketch", "screenshot"}:
        raise ValueError(f"weights file must hold both branches, found {sorted(branches)}")
    return EncoderPair(config=config, sketch=branches["sketch"], screenshot=branches["screenshot"])
