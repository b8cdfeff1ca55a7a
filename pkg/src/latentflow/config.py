"""Flat ``key = value`` training configuration covering every model and training hyperparameter.

Required keys are exactly the hyperparameters plus the run controls (batch,
iterations, seed); a handful of settings the worked examples leave open have defaults.
Unknown keys are rejected so typos cannot silently fall back to a default.
"""

from dataclasses import dataclass, fields

import numpy as np

from .networks import EncoderConfig, ModelBundle, decoder_config, field_config
from .training import LossWeights, OptimizerState


class ConfigError(ValueError):
    pass


def _ints(text):
    try:
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _pair(text):
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected HxW, got {text!r}")
    try:
        a, b = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"expected HxW, got {text!r}") from exc
    if a < 1 or b < 1:
        raise ConfigError(f"extents must be positive, got {text!r}")
    return (a, b)


# key -> (parser, default shown in --help (first worked example), required, description)
KEYS = {
    "encoder_hidden": (_ints, "32,64,128,64,32,16,8", True, "encoder hidden-layer widths"),
    "decoder_input": (int, "16", True, "decoder input-layer width"),
    "decoder_down": (_ints, "16,32,64", True, "decoder downsampling widths (2 convs each)"),
    "decoder_bottleneck": (int, "128", True, "decoder bottleneck width"),
    "decoder_output": (int, "16", True, "decoder output-layer width"),
    "field_input": (int, "16", True, "field-extractor input-layer width"),
    "field_down": (_ints, "16,32,64", True, "field-extractor downsampling widths"),
    "field_bottleneck": (int, "128", True, "field-extractor bottleneck width"),
    "field_output": (int, "16", True, "field-extractor output-layer width"),
    "n_evolution": (int, "10", True, "number of evolution steps N"),
    "stride": (_pair, "1x1", True, "patch scanning stride SHxSW"),
    "lambda_ae": (float, "1.0", True, "autoencoder loss weight"),
    "lambda_mag": (float, "0.01", True, "field magnitude weight"),
    "lambda_smooth": (float, "0.01", True, "field temporal smoothness weight"),
    "alpha": (float, "1e-4", True, "initial learning rate"),
    "gamma": (float, "0.8", True, "learning-rate decay factor per interval"),
    "batch": (int, "16", True, "minibatch size"),
    "iterations": (int, "30000", True, "training iterations"),
    "seed": (int, "0", True, "random seed (initialization and batching)"),
    "patch": (_pair, "256x256", False, "patch extents HpxWp"),
    "dt": (float, "0.1", False, "time step"),
    "decay_interval": (int, "10000", False, "iterations between learning-rate decays"),
    "log_every": (int, "100", False, "metrics row interval"),
}


@dataclass
class TrainConfig:
    encoder_hidden: list
    decoder_input: int
    decoder_down: list
    decoder_bottleneck: int
    decoder_output: int
    field_input: int
    field_down: list
    field_bottleneck: int
    field_output: int
    n_evolution: int
    stride: tuple
    lambda_ae: float
    lambda_mag: float
    lambda_smooth: float
    alpha: float
    gamma: float
    batch: int
    iterations: int
    seed: int
    patch: tuple = (256, 256)
    dt: float = 0.1
    decay_interval: int = 10000
    log_every: int = 100

    def __post_init__(self):
        if self.n_evolution < 1:
            raise ConfigError("n_evolution must be >= 1")
        if len(self.decoder_down) != 3 or len(self.field_down) != 3:
            raise ConfigError("decoder_down and field_down need exactly three widths")
        if self.batch < 1 or self.iterations < 0 or self.decay_interval < 1 or self.log_every < 1:
            raise ConfigError("batch, decay_interval and log_every must be positive, iterations >= 0")
        if min(self.lambda_ae, self.lambda_mag, self.lambda_smooth) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.alpha <= 0 or not 0 < self.gamma <= 1 or self.dt <= 0:
            raise ConfigError("need alpha > 0, 0 < gamma <= 1 and dt > 0")

    @classmethod
    def parse(cls, text, source="<config>"):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            if key not in KEYS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = KEYS[key][0](value)
            except (ConfigError, ValueError) as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
        for key, (_, _, required, _) in KEYS.items():
            if required and key not in values:
                raise ConfigError(f"{source}: missing required key {key!r}")
        return cls(**values)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.parse(text, str(path))

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list,)):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, tuple):
                v = f"{v[0]}x{v[1]}"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    def weights(self):
        return LossWeights(self.lambda_ae, self.lambda_mag, self.lambda_smooth)

    def optimizer(self):
        return OptimizerState(alpha=self.alpha, gamma=self.gamma, decay_interval=self.decay_interval)

    def field_cfg(self, channels):
        return field_config(channels, self.n_evolution, self.field_down, self.field_bottleneck,
                            self.field_input, self.field_output)

    def bundle(self, channels=1, dtype=np.float32, **kwargs):
        enc = EncoderConfig(in_channels=channels, hidden_channels=list(self.encoder_hidden))
        dec = decoder_config(channels, self.decoder_down, self.decoder_bottleneck, self.decoder_input,
                             self.decoder_output)
        return ModelBundle(enc, dec, self.field_cfg(channels), self.n_evolution, self.dt, self.seed, dtype,
                           patch=self.patch, **kwargs)


def help_text():
    """One line per key with its default from the first worked example."""
    lines = ["config keys (key = value; '#' starts a comment):"]
    for key, (_, default, required, desc) in KEYS.items():
        tag = "" if required else " [optional]"
        lines.append(f"  {key:<18} default {default:<22} {desc}{tag}")
    return "\n".join(lines)

