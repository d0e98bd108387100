"""Residual convolutional encoder and deconvolutional decoder for (3, m, t) skeleton tensors.

The coordinate axis is the channel axis, joints are rows and time is columns,
so 1x3 kernels convolve along time.  Each encoder block is three conv+ReLU
layers with a residual skip (1x1 projection when channels change) followed by
a max pool; each decoder block starts with the matching max unpool, then three
deconv+ReLU+BatchNorm layers with the mirrored skip.  A dense layer maps the
last encoder map to the latent code and a mirrored dense layer maps it back.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Node,
    RunningStats,
    batchnorm2d,
    channel_bias,
    conv2d,
    deconv2d,
    dense,
    flatten,
    maxpool2d,
    maxunpool2d,
    relu,
    reshape,
)
from .autodiff.init import fan_in_uniform
from .autodiff.node import ShapeError, _make, as_node

N_BLOCKS = 3
LAYERS_PER_BLOCK = 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    joints: int = 25
    frames: int = 64
    channels: Tuple[int, int, int] = (16, 32, 64)
    kernel: Tuple[int, int] = (1, 3)
    # one (rows, cols) window per encoder block; None means no pooling after the
    # first block and (1, 2) after later blocks wherever time divides
    pools: Optional[Tuple[Tuple[int, int], ...]] = None
    latent_dim: int = 128
    dtype: str = "float64"
    seed: int = 0
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if self.pools is not None:
            object.__setattr__(self, "pools", tuple(tuple(int(v) for v in p) for p in self.pools))
        if len(self.channels) != N_BLOCKS:
            raise ConfigError(f"need {N_BLOCKS} encoder channel widths, got {len(self.channels)}")
        if self.pools is not None and len(self.pools) != N_BLOCKS:
            raise ConfigError(f"need {N_BLOCKS} pool windows, got {len(self.pools)}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (3, self.joints, self.frames)

    def resolved_pools(self) -> Tuple[Tuple[int, int], ...]:
        if self.pools is not None:
            return self.pools
        # pooling straight after the first block made single-sequence overfitting
        # stall (argmax switches on barely-mixed features), so it starts at block 1
        pools, w = [(1, 1)], self.frames
        for _ in range(N_BLOCKS - 1):
            pw = 2 if w % 2 == 0 and w >= 2 else 1
            pools.append((1, pw))
            w //= pw
        return tuple(pools)

    def block_shapes(self) -> List[Tuple[int, int, int]]:
        """(C, H, W) after each encoder block; raises naming the first block that does not fit."""
        kh, kw = self.kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("kernel extents must be odd so padding preserves shape")
        c, h, w = self.input_shape
        shapes = []
        for b, ((ph, pw), cout) in enumerate(zip(self.resolved_pools(), self.channels)):
            if ph < 1 or pw < 1 or h % ph or w % pw:
                raise ConfigError(f"encoder block {b}: pool {(ph, pw)} does not divide feature map {(h, w)}")
            h, w, c = h // ph, w // pw, cout
            shapes.append((c, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["kernel"] = list(self.kernel)
        d["pools"] = None if self.pools is None else [list(p) for p in self.pools]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def mse_loss(x, xhat: Node) -> Node:
    """Half the batch mean of the squared Frobenius norm of ``x - xhat``."""
    x = as_node(x, xhat.dtype)
    if x.shape != xhat.shape:
        raise ShapeError(f"target {x.shape} and reconstruction {xhat.shape} differ", dim="shape")
    diff = xhat.value - x.value
    n = diff.shape[0]
    value = np.asarray(0.5 * np.sum(diff * diff) / n)
    return _make(value, (x, xhat), lambda g: (-g * diff / n, g * diff / n), "mse")


class Autoencoder:
    """Encoder/decoder pair with named parameters and batch-norm buffers."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self._shapes = config.block_shapes()
        self.pools = config.resolved_pools()
        self.params: Dict[str, Node] = {}
        self.bn: Dict[str, RunningStats] = {}
        rng = np.random.default_rng(config.seed)
        kh, kw = config.kernel
        self.padding = (kh // 2, kw // 2)

        ins = (3,) + tuple(config.channels[:-1])
        for b, (cin, cout) in enumerate(zip(ins, config.channels)):
            c = cin
            for k in range(LAYERS_PER_BLOCK):
                self._param(f"enc.{b}.conv{k}.weight", (cout, c, kh, kw), c * kh * kw, rng)
                self._param(f"enc.{b}.conv{k}.bias", (cout,), c * kh * kw, rng)
                c = cout
            if cin != cout:
                self._param(f"enc.{b}.skip.weight", (cout, cin, 1, 1), cin, rng)

        c3, h3, w3 = self._shapes[-1]
        flat = c3 * h3 * w3
        self._param("enc.fc.weight", (flat, config.latent_dim), flat, rng)
        self._param("enc.fc.bias", (config.latent_dim,), flat, rng)
        self._param("dec.fc.weight", (config.latent_dim, flat), config.latent_dim, rng)
        self._param("dec.fc.bias", (flat,), config.latent_dim, rng)

        # decoder block b undoes encoder block (2 - b)
        for b in range(N_BLOCKS):
            j = N_BLOCKS - 1 - b
            cin, cout = config.channels[j], ins[j]
            c = cin
            for k in range(LAYERS_PER_BLOCK):
                self._param(f"dec.{b}.deconv{k}.weight", (c, cout, kh, kw), c * kh * kw, rng)
                self._param(f"dec.{b}.deconv{k}.bias", (cout,), c * kh * kw, rng)
                self.params[f"dec.{b}.bn{k}.gamma"] = Node(np.ones(cout, self.dtype), requires_grad=True)
                self.params[f"dec.{b}.bn{k}.beta"] = Node(np.zeros(cout, self.dtype), requires_grad=True)
                self.bn[f"dec.{b}.bn{k}"] = RunningStats.fresh(cout, self.dtype)
                c = cout
            if cin != cout:
                self._param(f"dec.{b}.skip.weight", (cin, cout, 1, 1), cin, rng)

    def _param(self, name, shape, fan_in, rng):
        self.params[name] = Node(fan_in_uniform(rng, shape, fan_in, self.dtype), requires_grad=True, name=name)

    # -- parameter groups -------------------------------------------------
    def encoder_params(self) -> Dict[str, Node]:
        return {k: v for k, v in self.params.items() if k.startswith("enc.")}

    def decoder_params(self) -> Dict[str, Node]:
        return {k: v for k, v in self.params.items() if k.startswith("dec.")}

    def parameter_count(self) -> int:
        return int(sum(p.value.size for p in self.params.values()))

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def state(self) -> dict:
        return {"params": {k: p.value for k, p in self.params.items()}, "buffers": self.buffers()}

    def load_state(self, groups: dict) -> None:
        params, buffers = groups["params"], groups.get("buffers", {})
        missing = set(self.params) - set(params)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if params[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {params[k].shape} != {p.shape}", dim=k)
            p.value = np.array(params[k], dtype=self.dtype)
        for name, st in self.bn.items():
            if f"{name}.running_mean" in buffers:
                st.mean = np.array(buffers[f"{name}.running_mean"], dtype=self.dtype)
                st.var = np.array(buffers[f"{name}.running_var"], dtype=self.dtype)

    # -- forward ------------------------------------------------------------
    def _input(self, x) -> Node:
        if isinstance(x, Node):
            node = x
        else:
            node = Node(np.asarray(x, dtype=self.dtype))
        if node.value.ndim != 4 or node.shape[1:] != self.config.input_shape:
            raise ShapeError(f"expected input (N, {', '.join(map(str, self.config.input_shape))}), got {node.shape}",
                             dim="input")
        return node

    def frozen_params(self) -> Dict[str, Node]:
        """Constant copies of the parameters; graphs built on them track no gradients."""
        return {k: Node(v.value) for k, v in self.params.items()}

    def encode(self, x, params: Optional[Dict[str, Node]] = None) -> Tuple[Node, list]:
        """Latent codes (N, latent_dim) and the pool index maps needed to decode."""
        p = self.params if params is None else params
        h = self._input(x)
        indices = []
        for b in range(N_BLOCKS):
            y = h
            for k in range(LAYERS_PER_BLOCK):
                y = conv2d(y, p[f"enc.{b}.conv{k}.weight"], 1, self.padding)
                y = relu(channel_bias(y, p[f"enc.{b}.conv{k}.bias"]))
            skip = conv2d(h, p[f"enc.{b}.skip.weight"]) if f"enc.{b}.skip.weight" in p else h
            h, idx = maxpool2d(y + skip, self.pools[b])
            indices.append(idx)
        z = dense(flatten(h), p["enc.fc.weight"], p["enc.fc.bias"])
        return z, indices

    def decode(self, z: Node, indices: Sequence, mode: str = "train") -> Node:
        p = self.params
        if z.value.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"latent shape {z.shape} does not match latent_dim {self.config.latent_dim}",
                             dim="latent")
        c3, h3, w3 = self._shapes[-1]
        h = reshape(dense(z, p["dec.fc.weight"], p["dec.fc.bias"]), (z.shape[0], c3, h3, w3))
        for b in range(N_BLOCKS):
            h = maxunpool2d(h, indices[N_BLOCKS - 1 - b])
            y = h
            for k in range(LAYERS_PER_BLOCK):
                y = deconv2d(y, p[f"dec.{b}.deconv{k}.weight"], 1, self.padding)
                y = relu(channel_bias(y, p[f"dec.{b}.deconv{k}.bias"]))
                y = batchnorm2d(y, p[f"dec.{b}.bn{k}.gamma"], p[f"dec.{b}.bn{k}.beta"], self.bn[f"dec.{b}.bn{k}"],
                                mode=mode, eps=self.config.bn_eps)
            skip = deconv2d(h, p[f"dec.{b}.skip.weight"]) if f"dec.{b}.skip.weight" in p else h
            h = y + skip
        return h

    def reconstruct(self, x, mode: str = "train") -> Node:
        z, idx = self.encode(x)
        return self.decode(z, idx, mode)

    def latent(self, x, batch_size: int = 256) -> np.ndarray:
        """Encoder outputs as a plain array, computed without tracking gradients."""
        x = np.asarray(x, dtype=self.dtype)
        frozen = self.frozen_params()
        out = [self.encode(x[i : i + batch_size], frozen)[0].value for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.latent_dim), self.dtype)


def build_model(config: ModelConfig = ModelConfig()) -> Autoencoder:
    return Autoencoder(config)
