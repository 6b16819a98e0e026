"""Network assembly: Dense-Unet and the three comparison baselines.

A network is a flat list of layer descriptors (conv / bn / relu / pool /
upsample / save / concat) interpreted by :func:`forward`.  Skip
connections are expressed as ``save`` / ``concat`` tag pairs, and a dense
block is the standard running concatenation: each BN-ReLU-conv layer
emits ``growth`` channels that are appended to its own input.

Architecture parameters (``NetworkSpec``) and learnable state
(``NetworkParams``: named tensors plus batchnorm running buffers) are
kept separate so checkpoints are plain named-array files.
"""

from dataclasses import dataclass, field

import numpy as np

from .ctvol import NORM_ZERO_HU
from .tensor import (Tensor, batchnorm3d, concat_channels, conv3d,
                     load_checkpoint, maxpool3d, relu, save_checkpoint,
                     upsample3d)

KINDS = ("dense_unet", "autoencoder", "unet", "densenet")


@dataclass(frozen=True)
class NetConfig:
    """Width/depth knobs shared by all four architectures."""

    stem: int = 4
    growth: int = 4
    block_len: int = 4

    def key_values(self) -> dict:
        return {"stem": self.stem, "growth": self.growth,
                "block_len": self.block_len}


# paper-scale blocks: three 12-layer dense blocks, growth 4
PAPER_CONFIG = NetConfig(stem=16, growth=4, block_len=12)
# desk-scale preset: trains on a laptop CPU in minutes
DESK_CONFIG = NetConfig(stem=4, growth=4, block_len=4)


@dataclass(frozen=True)
class Conv:
    name: str
    cin: int
    cout: int
    k: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BN:
    name: str
    ch: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Pool:
    pass


@dataclass(frozen=True)
class Up:
    pass


@dataclass(frozen=True)
class Save:
    tag: str


@dataclass(frozen=True)
class Concat:
    tag: str


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    config: NetConfig
    layers: tuple
    down_stages: int = 2

    @property
    def divisor(self) -> int:
        return 2 ** self.down_stages


@dataclass
class NetworkParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.tensors.items()}
        out.update(self.buffers)
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        want = set(self.tensors) | set(self.buffers)
        if set(arrays) != want:
            missing = want - set(arrays)
            extra = set(arrays) - want
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for k, t in self.tensors.items():
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.data.shape}")
            t.data = arrays[k].astype(t.data.dtype)
        for k in self.buffers:
            self.buffers[k] = arrays[k].astype(self.buffers[k].dtype)


class _Builder:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.layers = []
        self.params = NetworkParams()

    def conv(self, name, cin, cout, k=3, stride=1, bias_init=0.0):
        fan_in = cin * k ** 3
        w = self.rng.standard_normal((cout, cin, k, k, k)) * np.sqrt(2.0 / fan_in)
        self.params.tensors[name + ".w"] = Tensor(w.astype(self.dtype),
                                                  requires_grad=True)
        self.params.tensors[name + ".b"] = Tensor(
            np.full(cout, bias_init, self.dtype), requires_grad=True)
        self.layers.append(Conv(name, cin, cout, k, stride))
        return cout

    def bn(self, name, ch):
        self.params.tensors[name + ".gamma"] = Tensor(np.ones(ch, self.dtype),
                                                      requires_grad=True)
        self.params.tensors[name + ".beta"] = Tensor(np.zeros(ch, self.dtype),
                                                     requires_grad=True)
        self.params.buffers[name + ".running_mean"] = np.zeros(ch, self.dtype)
        self.params.buffers[name + ".running_var"] = np.ones(ch, self.dtype)
        self.layers.append(BN(name, ch))

    def relu(self):
        self.layers.append(Relu())

    def pool(self):
        self.layers.append(Pool())

    def up(self):
        self.layers.append(Up())

    def save(self, tag):
        self.layers.append(Save(tag))

    def concat(self, tag):
        self.layers.append(Concat(tag))

    def bn_relu_conv(self, name, cin, cout):
        """Transition unit: BN -> ReLU -> 3x3x3 conv."""
        self.bn(name + ".bn", cin)
        self.relu()
        return self.conv(name + ".conv", cin, cout)

    def conv_bn_relu(self, name, cin, cout):
        self.conv(name + ".conv", cin, cout)
        self.bn(name + ".bn", cout)
        self.relu()
        return cout

    def dense_block(self, name, cin, num_layers, growth):
        c = cin
        for i in range(num_layers):
            tag = f"{name}.cat{i}"
            self.save(tag)
            self.bn_relu_conv(f"{name}.l{i}", c, growth)
            self.concat(tag)
            c += growth
        return c


def dense_block_out_channels(cin: int, num_layers: int, growth: int) -> int:
    return cin + num_layers * growth


def build_dense_unet(config: NetConfig = DESK_CONFIG, seed: int = 0,
                     dtype=np.float32) -> tuple[NetworkSpec, NetworkParams]:
    """U-shaped net, 2 pooling stages, one dense block on the encoder path,
    one at the bottleneck, one on the decoder path; skips by concatenation
    followed by a width-controlling transition conv; linear 1x1x1 head."""
    b = _Builder(np.random.default_rng(seed), dtype)
    c, n, g = config.stem, config.block_len, config.growth
    b.conv("stem", 1, c)
    b.bn_relu_conv("td1", c, c)
    b.save("skip0")  # skips tap the level features right before pooling
    b.pool()
    ce = b.dense_block("enc", c, n, g)
    b.bn_relu_conv("td2", ce, c)
    b.save("skip1")
    b.pool()
    cb = b.dense_block("bot", c, n, g)
    b.up()
    b.bn_relu_conv("tu1", cb, c)
    b.concat("skip1")
    b.bn_relu_conv("fuse1", 2 * c, c)
    cd = b.dense_block("dec", c, n, g)
    b.up()
    b.bn_relu_conv("tu2", cd, c)
    b.concat("skip0")
    b.bn_relu_conv("fuse0", 2 * c, c)
    b.conv("head", c, 1, k=1, bias_init=NORM_ZERO_HU)
    spec = NetworkSpec("dense_unet", config, tuple(b.layers), down_stages=2)
    return spec, b.params


def _build_unet(b: _Builder, config: NetConfig, skips: bool) -> int:
    """Plain conv-stack U-net with channel doubling; ``skips=False`` gives
    the autoencoder baseline (same encoder/decoder, no shortcuts)."""
    c = config.stem
    b.conv_bn_relu("enc0.a", 1, c)
    b.conv_bn_relu("enc0.b", c, c)
    if skips:
        b.save("skip0")
    b.pool()
    b.conv_bn_relu("enc1.a", c, 2 * c)
    b.conv_bn_relu("enc1.b", 2 * c, 2 * c)
    if skips:
        b.save("skip1")
    b.pool()
    b.conv_bn_relu("bot.a", 2 * c, 4 * c)
    b.conv_bn_relu("bot.b", 4 * c, 4 * c)
    b.up()
    b.conv_bn_relu("dec1.a", 4 * c, 2 * c)
    if skips:
        b.concat("skip1")
        b.conv_bn_relu("dec1.b", 4 * c, 2 * c)
    else:
        b.conv_bn_relu("dec1.b", 2 * c, 2 * c)
    b.up()
    b.conv_bn_relu("dec0.a", 2 * c, c)
    if skips:
        b.concat("skip0")
        b.conv_bn_relu("dec0.b", 2 * c, c)
    else:
        b.conv_bn_relu("dec0.b", c, c)
    b.conv("head", c, 1, k=1, bias_init=NORM_ZERO_HU)
    return c


def _build_densenet(b: _Builder, config: NetConfig) -> None:
    """Dense blocks chained by transitions at full resolution, no U-skips."""
    c, n, g = config.stem, config.block_len, config.growth
    b.conv("stem", 1, c)
    c1 = b.dense_block("db0", c, n, g)
    ct = b.bn_relu_conv("t0", c1, c)
    c2 = b.dense_block("db1", ct, n, g)
    ct = b.bn_relu_conv("t1", c2, c)
    c3 = b.dense_block("db2", ct, n, g)
    b.bn_relu_conv("t2", c3, c)
    b.conv("head", c, 1, k=1, bias_init=NORM_ZERO_HU)


def build_baseline(kind: str, config: NetConfig = DESK_CONFIG, seed: int = 0,
                   dtype=np.float32) -> tuple[NetworkSpec, NetworkParams]:
    if kind == "dense_unet":
        return build_dense_unet(config, seed, dtype)
    b = _Builder(np.random.default_rng(seed), dtype)
    if kind == "unet":
        _build_unet(b, config, skips=True)
        down = 2
    elif kind == "autoencoder":
        _build_unet(b, config, skips=False)
        down = 2
    elif kind == "densenet":
        _build_densenet(b, config)
        down = 0
    else:
        raise ValueError(f"unknown architecture {kind!r}; pick from {KINDS}")
    return NetworkSpec(kind, config, tuple(b.layers), down_stages=down), b.params


def build_network(kind: str, config: NetConfig = DESK_CONFIG, seed: int = 0,
                  dtype=np.float32) -> tuple[NetworkSpec, NetworkParams]:
    return build_baseline(kind, config, seed, dtype)


def forward(spec: NetworkSpec, params: NetworkParams, x, mode: str = "eval",
            bn_momentum: float = 0.1) -> Tensor:
    """Run the layer list.  Output has 1 channel and the input's spatial
    dims for every architecture (same-padding everywhere)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim != 5 or t.shape[1] != 1:
        raise ValueError(f"input must be (N, 1, D, H, W), got {t.shape}")
    div = spec.divisor
    if any(s % div for s in t.shape[2:]):
        raise ValueError(f"spatial dims {t.shape[2:]} not divisible by {div}")
    ten = params.tensors
    buf = params.buffers
    saved = {}
    for layer in spec.layers:
        if isinstance(layer, Conv):
            t = conv3d(t, ten[layer.name + ".w"], ten[layer.name + ".b"],
                       stride=layer.stride)
        elif isinstance(layer, BN):
            t = batchnorm3d(t, ten[layer.name + ".gamma"],
                            ten[layer.name + ".beta"],
                            buf[layer.name + ".running_mean"],
                            buf[layer.name + ".running_var"],
                            mode=mode, momentum=bn_momentum)
        elif isinstance(layer, Relu):
            t = relu(t)
        elif isinstance(layer, Pool):
            t = maxpool3d(t)
        elif isinstance(layer, Up):
            t = upsample3d(t)
        elif isinstance(layer, Save):
            saved[layer.tag] = t
        elif isinstance(layer, Concat):
            t = concat_channels(t, saved.pop(layer.tag))
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return t


@dataclass
class Model:
    """Spec + params bundle with checkpoint helpers."""

    spec: NetworkSpec
    params: NetworkParams

    def forward(self, x, mode: str = "eval") -> Tensor:
        return forward(self.spec, self.params, x, mode=mode)

    def save(self, ckpt_path, config_path=None) -> None:
        save_checkpoint(self.params.state_arrays(), ckpt_path)
        if config_path is not None:
            write_net_config(self.spec.kind, self.spec.config, config_path)


def load_model(ckpt_path, config_path) -> Model:
    kind, config = read_net_config(config_path)
    spec, params = build_network(kind, config, seed=0)
    params.load_state(load_checkpoint(ckpt_path))
    return Model(spec, params)


# ------------------------------------------------- architecture config file

def write_net_config(kind: str, config: NetConfig, path) -> None:
    """Plain key = value sidecar describing an architecture."""
    with open(path, "w") as f:
        f.write(f"kind = {kind}\n")
        for k, v in config.key_values().items():
            f.write(f"{k} = {v}\n")


def read_net_config(path) -> tuple[str, NetConfig]:
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    try:
        kind = kv.pop("kind")
        config = NetConfig(**{k: int(v) for k, v in kv.items()})
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: bad architecture config") from e
    if kind not in KINDS:
        raise ValueError(f"{path}: unknown architecture {kind!r}")
    return kind, config
