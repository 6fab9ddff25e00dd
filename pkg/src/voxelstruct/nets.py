"""Shape encoder, shape generator and structure detector.

Parameters are plain ``dict[str, np.ndarray]`` keyed ``enc/...``, ``gen/...``
and ``det/...``. The key set is a pure function of :class:`NetConfig`.

Encoder: stride-2 convolutions (kernel 4, pad 1) halve the grid until the
last layer, whose kernel spans the remaining extent and collapses it to 1^3.
The generator mirrors this with transposed convolutions. The detector is
four same-padded convolutions (max-pool after the first three) followed by
fully connected layers with dropout.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

LANDMARK_NAMES = (
    "back-topleft",
    "back-topright",
    "leg-frontright",
    "leg-frontleft",
    "leg-backleft",
    "leg-backright",
    "seat-backleft",
    "seat-backright",
    "seat-frontleft",
    "seat-frontright",
)

DOWN_KERNEL = 4
DOWN_STRIDE = 2
DOWN_PAD = 1


@dataclass
class NetConfig:
    grid_dim: int = 32
    latent_dim: int = 32
    encoder_channels: tuple = (16, 32, 64, 128)
    detector_channels: tuple = (8, 16, 32, 64)
    detector_kernels: tuple = (5, 3, 3, 3)
    detector_fc: tuple = (512, 128)
    n_landmarks: int = 10
    dropout_rate: float = 0.5
    batch_norm: bool = False

    def __post_init__(self):
        for name in ("encoder_channels", "detector_channels", "detector_kernels", "detector_fc"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @classmethod
    def full_scale(cls) -> "NetConfig":
        return cls(grid_dim=64, latent_dim=200, encoder_channels=(64, 128, 256, 512, 400),
                   detector_channels=(16, 32, 64, 128), detector_fc=(4096, 1024))

    def validate(self):
        D = self.grid_dim
        if D < 8 or D & (D - 1):
            raise ValueError(f"grid_dim must be a power of two >= 8, got {D}")
        if not self.encoder_channels or not self.detector_channels or not self.detector_fc:
            raise ValueError("channel lists must be non-empty")
        if self.n_landmarks != 10:
            raise ValueError("the chair structure has exactly 10 landmarks")
        if len(self.detector_kernels) != len(self.detector_channels):
            raise ValueError("detector_kernels and detector_channels differ in length")
        if any(k % 2 == 0 for k in self.detector_kernels):
            raise ValueError("detector kernels must be odd")
        if D >> (len(self.encoder_channels) - 1) < 1:
            raise ValueError(f"too many encoder layers for grid_dim {D}")
        if D % 8:
            raise ValueError("detector pools three times; grid_dim must be divisible by 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @property
    def split_head(self) -> bool:
        """True when the last encoder conv directly produces (mu, logvar)."""
        return self.encoder_channels[-1] == 2 * self.latent_dim

    @property
    def collapse_kernel(self) -> int:
        return self.grid_dim >> (len(self.encoder_channels) - 1)


# ---------------------------------------------------------------- layout

def encoder_layers(cfg: NetConfig):
    """(key, c_in, c_out, kernel, stride, pad) for every encoder conv."""
    layers, c_in = [], 1
    n = len(cfg.encoder_channels)
    for i, c in enumerate(cfg.encoder_channels):
        if i < n - 1:
            layers.append((f"enc/conv{i}", c_in, c, DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD))
        else:
            layers.append((f"enc/conv{i}", c_in, c, cfg.collapse_kernel, 1, 0))
        c_in = c
    return layers


def generator_layers(cfg: NetConfig):
    """(key, c_in, c_out, kernel, stride, pad) for every transposed conv."""
    chans = list(cfg.encoder_channels[:-1][::-1]) + [1]
    layers, c_in = [], cfg.latent_dim
    for i, c in enumerate(chans):
        if i == 0:
            layers.append((f"gen/deconv{i}", c_in, c, cfg.collapse_kernel, 1, 0))
        else:
            layers.append((f"gen/deconv{i}", c_in, c, DOWN_KERNEL, DOWN_STRIDE, DOWN_PAD))
        c_in = c
    return layers


def param_shapes(cfg: NetConfig) -> dict[str, tuple]:
    """Ordered key -> shape map for all three networks."""
    shapes: dict[str, tuple] = {}
    enc = encoder_layers(cfg)
    for j, (key, ci, co, k, _, _) in enumerate(enc):
        shapes[f"{key}/w"] = (co, ci, k, k, k)
        shapes[f"{key}/b"] = (co,)
        if cfg.batch_norm and j < len(enc) - 1:
            shapes[f"{key}/bn/gamma"] = (co,)
            shapes[f"{key}/bn/beta"] = (co,)
    if not cfg.split_head:
        shapes["enc/head/w"] = (cfg.encoder_channels[-1], 2 * cfg.latent_dim)
        shapes["enc/head/b"] = (2 * cfg.latent_dim,)
    gen = generator_layers(cfg)
    for j, (key, ci, co, k, _, _) in enumerate(gen):
        shapes[f"{key}/w"] = (ci, co, k, k, k)
        shapes[f"{key}/b"] = (co,)
        if cfg.batch_norm and j < len(gen) - 1:
            shapes[f"{key}/bn/gamma"] = (co,)
            shapes[f"{key}/bn/beta"] = (co,)
    c_in = 1
    for i, (c, k) in enumerate(zip(cfg.detector_channels, cfg.detector_kernels)):
        shapes[f"det/conv{i}/w"] = (c, c_in, k, k, k)
        shapes[f"det/conv{i}/b"] = (c,)
        if cfg.batch_norm and i < 3:
            shapes[f"det/conv{i}/bn/gamma"] = (c,)
            shapes[f"det/conv{i}/bn/beta"] = (c,)
        c_in = c
    n_in = cfg.detector_channels[-1] * (cfg.grid_dim // 8) ** 3
    for i, o in enumerate(list(cfg.detector_fc) + [3 * cfg.n_landmarks]):
        shapes[f"det/fc{i}/w"] = (n_in, o)
        shapes[f"det/fc{i}/b"] = (o,)
        n_in = o
    return shapes


def parameter_count(cfg: NetConfig, prefix: str = "") -> int:
    return int(sum(np.prod(s) for k, s in param_shapes(cfg).items() if k.startswith(prefix)))


def layer_output_sizes(cfg: NetConfig) -> dict[str, list]:
    """Channel counts of encoder convs, generator deconvs, detector convs and fcs."""
    return {
        "encoder": [co for _, _, co, *_ in encoder_layers(cfg)],
        "generator": [co for _, _, co, *_ in generator_layers(cfg)],
        "detector_conv": list(cfg.detector_channels),
        "detector_fc": list(cfg.detector_fc) + [3 * cfg.n_landmarks],
    }


def _fan_in(key: str, shape: tuple, cfg: NetConfig) -> int:
    if key.startswith("gen/deconv"):
        ci, k = shape[0], shape[2]
        if key.startswith("gen/deconv0"):
            return ci  # 1^3 input: each output voxel sees one tap per channel
        return ci * (k // DOWN_STRIDE) ** 3
    if len(shape) == 5:
        return int(np.prod(shape[1:]))
    return shape[0]


def _final_layer_keys(cfg: NetConfig) -> set:
    last_gen = generator_layers(cfg)[-1][0]
    last_fc = f"det/fc{len(cfg.detector_fc)}"
    last_enc = "enc/head" if not cfg.split_head else encoder_layers(cfg)[-1][0]
    return {last_gen, last_fc, last_enc}


def init_params(cfg: NetConfig, seed: int, dtype=np.float64):
    """Uniform fan-in initialization (He bound for ReLU layers).

    Biases start at zero except in the detector output layer, which has
    small weights and bias 0.5 so initial landmark guesses sit at the box
    center.

    Returns (encoder, generator, detector) parameter dicts.
    """
    rng = np.random.default_rng(seed)
    finals = _final_layer_keys(cfg)
    det_out = f"det/fc{len(cfg.detector_fc)}"
    groups = {"enc": {}, "gen": {}, "det": {}}
    for key, shape in param_shapes(cfg).items():
        layer, leaf = key.rsplit("/", 1)
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("b", "beta"):
            # landmark outputs start at the box center
            arr = np.full(shape, 0.5 if layer == det_out else 0.0)
        else:
            gain = 3.0 if layer in finals else 6.0
            bound = np.sqrt(gain / _fan_in(key, shape, cfg))
            if layer == det_out:
                bound *= 0.1
            arr = rng.uniform(-bound, bound, size=shape)
        groups[key.split("/", 1)[0]][key] = arr.astype(dtype)
    return groups["enc"], groups["gen"], groups["det"]


# ---------------------------------------------------------------- forward

def _get(params: Mapping, key: str) -> Tensor:
    v = params[key]
    return v if isinstance(v, Tensor) else Tensor(v)


def _as_batch(s, D: int, dtype=None) -> Tensor:
    t = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=dtype or np.float64))
    if t.data.ndim == 4:
        t = t.reshape(t.shape[0], 1, *t.shape[1:])
    if t.data.ndim != 5 or t.shape[1] != 1 or t.shape[2:] != (D, D, D):
        raise T.DimensionError(f"expected a batch of {D}^3 grids, got shape {t.shape}")
    return t


def _param_dtype(params: Mapping):
    v = next(iter(params.values()))
    return (v.data if isinstance(v, Tensor) else v).dtype


def _maybe_bn(params, key, h, cfg):
    if cfg.batch_norm and f"{key}/bn/gamma" in params:
        h = T.batch_norm(h, _get(params, f"{key}/bn/gamma"), _get(params, f"{key}/bn/beta"))
    return h


def encode(params: Mapping, s, cfg: NetConfig, trace: list | None = None):
    """Voxel batch [B,D,D,D] -> (mu [B,Z], logvar [B,Z]).

    ``trace``, when given, collects (layer key, activation) pairs.
    """
    x = _as_batch(s, cfg.grid_dim, _param_dtype(params))
    h = x * 2.0 - 1.0
    layers = encoder_layers(cfg)
    B = x.shape[0]
    for j, (key, _, _, _, stride, pad) in enumerate(layers):
        h = T.conv3d(h, _get(params, f"{key}/w"), stride, pad, bias=_get(params, f"{key}/b"))
        if j < len(layers) - 1 or not cfg.split_head:
            h = _maybe_bn(params, key, h, cfg)
            h = T.relu(h)
        if trace is not None:
            trace.append((key, h.data))
    h = h.reshape(B, -1)
    if not cfg.split_head:
        h = T.dense(h, _get(params, "enc/head/w"), _get(params, "enc/head/b"))
        if trace is not None:
            trace.append(("enc/head", h.data))
    Z = cfg.latent_dim
    return h[:, :Z], h[:, Z:]


def generate(params: Mapping, z, cfg: NetConfig, trace: list | None = None) -> Tensor:
    """Latent batch [B,Z] -> occupancy probabilities [B,D,D,D] in (0,1)."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=_param_dtype(params)))
    if z.data.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise T.DimensionError(f"expected latent batch [B,{cfg.latent_dim}], got {z.shape}")
    B = z.shape[0]
    h = z.reshape(B, cfg.latent_dim, 1, 1, 1)
    layers = generator_layers(cfg)
    for j, (key, _, _, _, stride, pad) in enumerate(layers):
        h = T.conv_transpose3d(h, _get(params, f"{key}/w"), stride, pad, bias=_get(params, f"{key}/b"))
        if j < len(layers) - 1:
            h = _maybe_bn(params, key, h, cfg)
            h = T.relu(h)
        if trace is not None:
            trace.append((key, h.data))
    D = cfg.grid_dim
    return T.sigmoid(h).reshape(B, D, D, D)


def detect(params: Mapping, s, cfg: NetConfig, training: bool = False,
           rng: np.random.Generator | None = None, trace: list | None = None) -> Tensor:
    """Voxel batch -> landmark coordinates [B, 3N] (x,y,z triples, normalized)."""
    if training and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode detect needs an rng for dropout")
    x = _as_batch(s, cfg.grid_dim, _param_dtype(params))
    B = x.shape[0]
    h = x * 2.0 - 1.0
    for i, k in enumerate(cfg.detector_kernels):
        key = f"det/conv{i}"
        h = T.conv3d(h, _get(params, f"{key}/w"), 1, k // 2, bias=_get(params, f"{key}/b"))
        if i < 3:
            h = _maybe_bn(params, key, h, cfg)
        h = T.relu(h)
        if trace is not None:
            trace.append((key, h.data))
        if i < 3:
            h = T.maxpool3d(h, 2)
    h = h.reshape(B, -1)
    n_fc = len(cfg.detector_fc) + 1
    for i in range(n_fc):
        h = T.dense(h, _get(params, f"det/fc{i}/w"), _get(params, f"det/fc{i}/b"))
        if i < n_fc - 1:
            h = T.relu(h)
            h = T.dropout(h, cfg.dropout_rate, rng, training)
        if trace is not None:
            trace.append((f"det/fc{i}", h.data))
    return h


def encode_mean(params, s, cfg: NetConfig) -> np.ndarray:
    mu, _ = encode(params, s, cfg)
    return mu.data


def reconstruct(enc, gen, s, cfg: NetConfig) -> np.ndarray:
    """Deterministic round trip through the encoder mean."""
    return generate(gen, encode_mean(enc, s, cfg), cfg).data


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VSCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write params in the VSCKPT1 format (keys sorted, float32 payloads)."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<Q", len(params))
    for key in sorted(params):
        arr = np.asarray(params[key].data if isinstance(params[key], Tensor) else params[key])
        kb = key.encode("utf-8")
        out += struct.pack("<Q", len(kb)) + kb
        out += struct.pack("<Q", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, cfg: NetConfig | None = None, groups=None,
                    dtype=np.float64) -> dict[str, np.ndarray]:
    """Read a VSCKPT1 file. With ``cfg``, the key set for ``groups``
    (subset of {"enc","gen","det"}) must match exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<Q")
    params = {}
    for _ in range(count):
        (klen,) = take("<Q")
        key = buf[pos:pos + klen].decode("utf-8")
        pos += klen
        (rank,) = take("<Q")
        dims = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        params[key] = arr.astype(dtype)
    if cfg is not None:
        groups = groups or sorted({k.split("/", 1)[0] for k in params})
        expected = {k for k in param_shapes(cfg) if k.split("/", 1)[0] in groups}
        present = {k for k in params if k.split("/", 1)[0] in groups}
        if expected != present:
            missing = sorted(expected - present)[:3]
            extra = sorted(present - expected)[:3]
            raise CheckpointError(f"{path}: key set mismatch (missing {missing}, unexpected {extra})")
        shapes = param_shapes(cfg)
        for k in present:
            if params[k].shape != shapes[k]:
                raise CheckpointError(f"{path}: {k} has shape {params[k].shape}, expected {shapes[k]}")
    return params


def split_groups(params: Mapping[str, np.ndarray]):
    enc = {k: v for k, v in params.items() if k.startswith("enc/")}
    gen = {k: v for k, v in params.items() if k.startswith("gen/")}
    det = {k: v for k, v in params.items() if k.startswith("det/")}
    return enc, gen, det
