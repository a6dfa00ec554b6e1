"""MLP construction, initialization and forward evaluation on the tape."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import UsageError


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    layer_count: int
    width: int
    input_dim: int
    output_dim: int
    skip_layers: frozenset = field(default_factory=frozenset)
    activation: str = "relu"            # 'relu' | 'softplus'
    output_activation: str = "none"     # 'none' | 'sigmoid' | 'softplus'
    softplus_beta: float = 100.0
    feature_dim: int | None = None      # extra linear head off the last hidden layer

    def __post_init__(self):
        if self.layer_count < 1 or self.width < 1:
            raise ConfigurationError("layer_count and width must be >= 1")
        if any(not (1 <= s < self.layer_count) for s in self.skip_layers):
            raise ConfigurationError("skip_layers must lie in [1, layer_count)")
        if self.activation not in ("relu", "softplus"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("none", "sigmoid", "softplus"):
            raise ConfigurationError(f"unknown output activation {self.output_activation!r}")

    def layer_dims(self):
        """(fan_in, fan_out) per linear layer; index 0..layer_count-1."""
        dims = []
        for i in range(self.layer_count):
            fan_in = self.input_dim if i == 0 else self.width
            if i in self.skip_layers:
                fan_in += self.input_dim
            fan_out = self.output_dim if i == self.layer_count - 1 else self.width
            dims.append((fan_in, fan_out))
        return dims


def mlp_init(store, prefix, spec, mode="standard", seed=0, raw_input_dim=None,
             sphere_radius=0.5, lr_scale=1.0, zero_output=False):
    """Create the MLP's parameters in `store` under `prefix`.

    mode 'standard': uniform fan-in scaled init. mode 'geometric_sphere':
    biases the last layer so the fresh net approximates |x| - sphere_radius;
    weight columns beyond the first `raw_input_dim` input channels (the
    positional-encoding part) are zeroed in layers that see the input.
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims()
    for i, (fan_in, fan_out) in enumerate(dims):
        if mode == "standard":
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            b = rng.uniform(-bound, bound, size=(fan_out,))
        elif mode == "geometric_sphere":
            if i == spec.layer_count - 1:
                w = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-5, size=(fan_in, fan_out))
                b = np.full((fan_out,), -float(sphere_radius))
            else:
                w = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), size=(fan_in, fan_out))
                b = np.zeros((fan_out,))
            if raw_input_dim is not None and (i == 0 or i in spec.skip_layers):
                # keep only the raw-coordinate channels of the encoded input
                if i == 0:
                    w[raw_input_dim:, :] = 0.0
                else:
                    w[spec.width + raw_input_dim:, :] = 0.0
        else:
            raise ConfigurationError(f"unknown init mode {mode!r}")
        if zero_output and i == spec.layer_count - 1:
            w[...] = 0.0
            b[...] = 0.0
        store.create(f"{prefix}.w{i}", w, lr_scale=lr_scale)
        store.create(f"{prefix}.b{i}", b, lr_scale=lr_scale)
    if spec.feature_dim is not None:
        bound = 1.0 / np.sqrt(spec.width)
        store.create(f"{prefix}.wfeat",
                     rng.uniform(-bound, bound, size=(spec.width, spec.feature_dim)),
                     lr_scale=lr_scale)
        store.create(f"{prefix}.bfeat", rng.uniform(-bound, bound, size=(spec.feature_dim,)),
                     lr_scale=lr_scale)
    if mode == "geometric_sphere" and not zero_output:
        # positive activations leak a width-dependent offset through the
        # positive-mean last layer; trim the bias so S(center) = -radius.
        # Encoded center is equivalent to the zero vector since the PE
        # columns are zeroed in every layer that sees the input.
        with tape.no_grad():
            out, _ = mlp_forward(store, prefix, spec, np.zeros((1, spec.input_dim)))
        store[f"{prefix}.b{spec.layer_count - 1}"].data -= out.data[0] + sphere_radius


def _activate(h, spec):
    if spec.activation == "relu":
        return tape.relu(h)
    return tape.softplus(h, beta=spec.softplus_beta)


def mlp_forward(store, prefix, spec, x):
    """Forward pass. Returns (output, feature).

    `feature` is the projection head output when feature_dim is set,
    otherwise the activation of the last hidden layer (or the input when
    the net is a single linear layer).
    """
    x = tape.as_tensor(x)
    if x.shape[-1] != spec.input_dim:
        raise ConfigurationError(
            f"{prefix}: input dim {x.shape[-1]} != spec.input_dim {spec.input_dim}")
    h = x
    hidden = x
    for i in range(spec.layer_count):
        if i in spec.skip_layers:
            h = tape.concatenate([h, x], axis=-1)
        w = store[f"{prefix}.w{i}"]
        b = store[f"{prefix}.b{i}"]
        h = tape.matmul(h, w) + b
        if i < spec.layer_count - 1:
            h = _activate(h, spec)
            hidden = h
    if spec.output_activation == "sigmoid":
        h = tape.sigmoid(h)
    elif spec.output_activation == "softplus":
        h = tape.softplus(h)
    if spec.feature_dim is not None:
        feat = tape.matmul(hidden, store[f"{prefix}.wfeat"]) + store[f"{prefix}.bfeat"]
    else:
        feat = hidden
    return h, feat


class Mlp:
    """Convenience wrapper binding a spec + parameter prefix to a store."""

    def __init__(self, store, prefix, spec):
        self.store = store
        self.prefix = prefix
        self.spec = spec

    @classmethod
    def create(cls, store, prefix, spec, mode="standard", seed=0, **kw):
        mlp_init(store, prefix, spec, mode=mode, seed=seed, **kw)
        return cls(store, prefix, spec)

    def __call__(self, x):
        return mlp_forward(self.store, self.prefix, self.spec, x)

    def zero_output_layer(self):
        i = self.spec.layer_count - 1
        self.store[f"{self.prefix}.w{i}"].data[...] = 0.0
        self.store[f"{self.prefix}.b{i}"].data[...] = 0.0
