"""Encoder, U-net decoder and U-net field extractor, bundled with their configs."""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .advection import FieldSequence
from .tensor import (
    ContractViolation,
    Tensor,
    channel_slice,
    concat_channels,
    conv2d,
    leaky_relu,
    max_pool2,
    resize_bilinear,
)

BUNDLE_MAGIC = b"LATFLOWB"
BUNDLE_VERSION = 1


@dataclass
class EncoderConfig:
    in_channels: int = 1
    hidden_channels: list = field(default_factory=lambda: [32, 64, 128, 64, 32, 16, 8])
    kernel: int = 3
    slope: float = 0.2
    out_channels: int = 1

    def validate(self):
        if self.out_channels != 1:
            raise ContractViolation("the encoder must emit exactly one latent channel")
        if any(c < 1 for c in [self.in_channels] + list(self.hidden_channels)):
            raise ContractViolation("encoder channel counts must be >= 1")
        if self.kernel % 2 == 0:
            raise ContractViolation("encoder kernel must be odd")

    def receptive_field(self):
        """Side length of the input window that can influence one latent pixel."""
        return (len(self.hidden_channels) + 1) * (self.kernel - 1) + 1


@dataclass
class UNetConfig:
    in_channels: int = 1
    input_channels: int = 16
    down: list = field(default_factory=lambda: [16, 32, 64])
    bottleneck: int = 128
    up: list = field(default_factory=lambda: [64, 32, 16])
    output_channels: int = 16
    out_channels: int = 1
    kernel: int = 3
    layers_per_stage: int = 2
    slope: float = 0.2

    def validate(self):
        if len(self.down) != 3 or len(self.up) != 3:
            raise ContractViolation("U-net needs exactly three down and three up stages")
        if self.kernel % 2 == 0:
            raise ContractViolation("U-net kernel must be odd")
        if self.layers_per_stage < 1:
            raise ContractViolation("layers_per_stage must be >= 1")

    @property
    def divisor(self):
        return 2 ** len(self.down)


class Conv:
    def __init__(self, cin, cout, k, rng, dtype, slope=0.2, name=""):
        fan_in = k * k * cin
        gain = np.sqrt(2.0 / (1.0 + slope * slope))
        bound = gain * np.sqrt(3.0 / fan_in)
        self.kernel = Tensor(rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype),
                             requires_grad=True, name=name + ".kernel")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=name + ".bias")

    def __call__(self, x):
        return conv2d(x, self.kernel, self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


class Encoder:
    """Stack of same-padded convolutions, no pooling: each latent pixel sees a local window."""

    def __init__(self, config, rng, dtype=np.float32):
        config.validate()
        self.config = config
        widths = [config.in_channels] + list(config.hidden_channels)
        self.hidden = [Conv(a, b, config.kernel, rng, dtype, config.slope, f"enc.{i}")
                       for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.out = Conv(widths[-1], 1, config.kernel, rng, dtype, config.slope, "enc.out")

    def __call__(self, x):
        if x.shape[-1] != self.config.in_channels:
            raise ContractViolation(f"encoder expects {self.config.in_channels} channels, got {x.shape[-1]}")
        h = x
        for conv in self.hidden:
            h = leaky_relu(conv(h), self.config.slope)
        return self.out(h)

    def parameters(self):
        return [p for c in self.hidden + [self.out] for p in c.parameters()]


class UNet:
    """U-net with resize-convolution upsampling and resized skip concatenation."""

    def __init__(self, config, rng, dtype=np.float32, prefix="unet"):
        config.validate()
        self.config = config
        k, s, L = config.kernel, config.slope, config.layers_per_stage
        self.inp = Conv(config.in_channels, config.input_channels, k, rng, dtype, s, f"{prefix}.in")
        self.down = []
        c = config.input_channels
        for i, width in enumerate(config.down):
            stage = []
            for j in range(L):
                stage.append(Conv(c, width, k, rng, dtype, s, f"{prefix}.down{i}.{j}"))
                c = width
            self.down.append(stage)
        self.bottleneck = []
        for j in range(L):
            self.bottleneck.append(Conv(c, config.bottleneck, k, rng, dtype, s, f"{prefix}.mid.{j}"))
            c = config.bottleneck
        self.up = []
        for i, (width, skip) in enumerate(zip(config.up, reversed(config.down))):
            stage = [Conv(c, width, k, rng, dtype, s, f"{prefix}.up{i}.0")]
            c = width + skip
            for j in range(1, L):
                stage.append(Conv(c, width, k, rng, dtype, s, f"{prefix}.up{i}.{j}"))
                c = width
            self.up.append(stage)
        self.outlayer = Conv(c, config.output_channels, k, rng, dtype, s, f"{prefix}.outlayer")
        self.final = Conv(config.output_channels, config.out_channels, k, rng, dtype, s, f"{prefix}.final")

    def upsample(self, h, shape):
        return resize_bilinear(h, shape[1], shape[2])

    def __call__(self, x):
        cfg = self.config
        B, H, W, C = x.shape
        if H % cfg.divisor or W % cfg.divisor:
            raise ContractViolation(f"U-net input extents {H}x{W} must be divisible by {cfg.divisor}")
        if C != cfg.in_channels:
            raise ContractViolation(f"U-net expects {cfg.in_channels} channels, got {C}")
        act = lambda t: leaky_relu(t, cfg.slope)  # noqa: E731
        h = act(self.inp(x))
        skips = []
        for stage in self.down:
            for conv in stage:
                h = act(conv(h))
            skips.append(h)
            h = max_pool2(h)
        for conv in self.bottleneck:
            h = act(conv(h))
        for stage, skip in zip(self.up, reversed(skips)):
            h = act(stage[0](self.upsample(h, skip.shape)))
            h = concat_channels([h, resize_bilinear(skip, h.shape[1], h.shape[2])])
            for conv in stage[1:]:
                h = act(conv(h))
        h = act(self.outlayer(h))
        return self.final(h)

    def parameters(self):
        convs = [self.inp] + [c for st in self.down for c in st] + self.bottleneck
        convs += [c for st in self.up for c in st] + [self.outlayer, self.final]
        return [p for c in convs for p in c.parameters()]


def decoder_config(channels, down=(16, 32, 64), bottleneck=128, input_channels=16, output_channels=16, kernel=3):
    return UNetConfig(in_channels=1, input_channels=input_channels, down=list(down), bottleneck=bottleneck,
                      up=list(reversed(down)), output_channels=output_channels, out_channels=channels,
                      kernel=kernel)


def field_config(channels, n_steps, down=(16, 32, 64), bottleneck=128, input_channels=16, output_channels=16,
                 kernel=5):
    return UNetConfig(in_channels=channels, input_channels=input_channels, down=list(down),
                      bottleneck=bottleneck, up=list(reversed(down)), output_channels=output_channels,
                      out_channels=2 * n_steps, kernel=kernel)


class ModelBundle:
    """Encoder, decoder and field extractor plus what is needed to rebuild them.

    ``identity_codecs`` replaces encoder and decoder by the identity (single
    channel only), and ``zero_fields`` pins the field extractor to zero output.
    """

    def __init__(self, encoder_cfg, decoder_cfg, field_cfg, n_evolution=10, dt=0.1, seed=0,
                 dtype=np.float32, identity_codecs=False, zero_fields=False, patch=None):
        if n_evolution < 1:
            raise ContractViolation("n_evolution must be >= 1")
        if field_cfg.out_channels != 2 * n_evolution:
            raise ContractViolation("field extractor must emit 2*n_evolution channels")
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.field_cfg = field_cfg
        self.n_evolution = n_evolution
        self.dt = dt
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.identity_codecs = identity_codecs
        self.zero_fields = zero_fields
        self.patch = tuple(patch) if patch else None
        rng = np.random.default_rng(seed)
        self.encoder = None if identity_codecs else Encoder(encoder_cfg, rng, self.dtype)
        self.decoder = None if identity_codecs else UNet(decoder_cfg, rng, self.dtype, "dec")
        self.field_net = None if zero_fields else UNet(field_cfg, rng, self.dtype, "eta")

    @property
    def channels(self):
        return self.decoder_cfg.out_channels

    def encode(self, x):
        if self.identity_codecs:
            if x.shape[-1] != 1:
                raise ContractViolation("identity codecs need single-channel images")
            return x
        return self.encoder(x)

    def decode(self, z):
        return z if self.identity_codecs else self.decoder(z)

    def extract_fields(self, x):
        B, H, W, _ = x.shape
        if self.zero_fields:
            return FieldSequence.zeros(self.n_evolution, (B, H, W), self.dt, self.dtype)
        out = self.field_net(x)
        return FieldSequence([channel_slice(out, 2 * s, 2 * s + 2) for s in range(self.n_evolution)], self.dt)

    def parameters(self):
        params = []
        for net in (self.encoder, self.decoder, self.field_net):
            if net is not None:
                params.extend(net.parameters())
        return params

    def groups(self):
        """Parameters per learnable map, keyed by 'encoder', 'decoder', 'fields'."""
        return {name: (net.parameters() if net is not None else [])
                for name, net in (("encoder", self.encoder), ("decoder", self.decoder), ("fields", self.field_net))}

    def config_dict(self):
        return {
            "encoder": asdict(self.encoder_cfg),
            "decoder": asdict(self.decoder_cfg),
            "fields": asdict(self.field_cfg),
            "n_evolution": self.n_evolution,
            "dt": self.dt,
            "seed": self.seed,
            "identity_codecs": self.identity_codecs,
            "zero_fields": self.zero_fields,
            "patch": list(self.patch) if self.patch else None,
        }

    def save(self, path):
        """Write magic, version, JSON config block, then little-endian float32 parameters."""
        cfg = json.dumps(self.config_dict(), sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(BUNDLE_MAGIC)
            fh.write(struct.pack("<II", BUNDLE_VERSION, len(cfg)))
            fh.write(cfg)
            for p in self.parameters():
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != BUNDLE_MAGIC:
            raise ValueError(f"{path}: not a model bundle")
        version, n = struct.unpack_from("<II", blob, 8)
        if version != BUNDLE_VERSION:
            raise ValueError(f"{path}: bundle version {version}, expected {BUNDLE_VERSION}")
        cfg = json.loads(blob[16:16 + n].decode("utf-8"))
        bundle = cls(EncoderConfig(**cfg["encoder"]), UNetConfig(**cfg["decoder"]), UNetConfig(**cfg["fields"]),
                     n_evolution=cfg["n_evolution"], dt=cfg["dt"], seed=cfg["seed"], dtype=np.float32,
                     identity_codecs=cfg["identity_codecs"], zero_fields=cfg["zero_fields"],
                     patch=cfg.get("patch"))
        payload = np.frombuffer(blob, dtype="<f4", offset=16 + n)
        pos = 0
        for p in bundle.parameters():
            size = p.data.size
            if pos + size > payload.size:
                raise ValueError(f"{path}: truncated parameter payload")
            p.data = payload[pos:pos + size].reshape(p.shape).astype(np.float32)
            pos += size
        if pos != payload.size:
            raise ValueError(f"{path}: {payload.size - pos} trailing parameter values")
        return bundle
