"""Minimal dense-network engine with analytic gradients.

Supports exactly what the rest of the toolkit needs: feed-forward layers
(linear / ReLU / PReLU / tanh / softmax) with optional batch normalization
and dropout, backpropagation with respect to parameters *and* inputs, an
Adam optimizer, and bit-exact checkpoint serialization.  Everything is
float64 numpy; no autodiff framework.
"""

from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("linear", "relu", "prelu", "tanh", "softmax")

TRAIN = "train"
EVAL = "eval"

# Running-stat momentum for the online batch-norm update.
BN_MOMENTUM = 0.01
BN_EPS = 1e-5


class DimensionError(ValueError):
    """Layer dimensions do not chain or an input has the wrong length."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "linear"
    has_batchnorm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise DimensionError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


def _validate_specs(specs):
    if not specs:
        raise DimensionError("network needs at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise DimensionError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
    for spec in specs[:-1]:
        if spec.activation == "softmax":
            raise ValueError("softmax only allowed as the final layer")


class Network:
    """A feed-forward network: per-layer weights, biases and extras.

    Parameters live in plain numpy arrays; `params()` exposes them in a
    fixed order so the optimizer and the serializer agree on layout.
    """

    def __init__(self, specs):
        specs = list(specs)
        _validate_specs(specs)
        self.specs = specs
        self.weights = [np.zeros((s.out_dim, s.in_dim)) for s in specs]
        self.biases = [np.zeros(s.out_dim) for s in specs]
        self.prelu_slopes = [
            np.full(s.out_dim, 0.25) if s.activation == "prelu" else None for s in specs
        ]
        self.bn = [
            {
                "gamma": np.ones(s.out_dim),
                "beta": np.zeros(s.out_dim),
                "mean": np.zeros(s.out_dim),
                "var": np.ones(s.out_dim),
            }
            if s.has_batchnorm
            else None
            for s in specs
        ]
        self.mode = EVAL

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    def params(self):
        """Trainable arrays in a fixed, serializable order."""
        out = []
        for i, spec in enumerate(self.specs):
            out.append(self.weights[i])
            out.append(self.biases[i])
            if spec.activation == "prelu":
                out.append(self.prelu_slopes[i])
            if spec.has_batchnorm:
                out.append(self.bn[i]["gamma"])
                out.append(self.bn[i]["beta"])
        return out

    def set_params(self, arrays):
        arrays = list(arrays)
        own = self.params()
        if len(arrays) != len(own):
            raise DimensionError("parameter count mismatch")
        for dst, src in zip(own, arrays):
            if dst.shape != np.shape(src):
                raise DimensionError("parameter shape mismatch")
            dst[...] = src

    def copy(self):
        return copy.deepcopy(self)


def xavier_init(specs, seed):
    """Build a network with Xavier-uniform weights and zero biases.

    Each weight is uniform in +-sqrt(6 / (in_dim + out_dim)).  Deterministic
    under a fixed seed.
    """
    net = Network(specs)
    rng = np.random.default_rng(seed)
    for i, spec in enumerate(net.specs):
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        net.weights[i] = rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim))
    return net


@dataclass
class ForwardTrace:
    """Everything backprop needs: inputs and intermediates per layer."""

    x: np.ndarray                      # (B, in_dim) input to the network
    layer_inputs: list = field(default_factory=list)   # input to each layer
    pre_bn: list = field(default_factory=list)         # z = Wx + b
    pre_act: list = field(default_factory=list)        # after batchnorm
    post_act: list = field(default_factory=list)       # after activation
    dropout_masks: list = field(default_factory=list)  # None in eval mode
    output: np.ndarray = None          # final post-dropout output
    squeeze: bool = False              # True if the caller passed a 1-D vector

    def out(self):
        return self.output[0] if self.squeeze else self.output


def _softmax(h):
    shifted = h - h.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(net, x, rng=None):
    """Run the network on a vector or a (B, in_dim) batch.

    Returns a ForwardTrace; `trace.out()` is the output in the caller's
    shape.  In train mode, dropout draws masks from `rng` (required when any
    layer has dropout) and batch-norm running stats are updated in place.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != net.in_dim:
        raise DimensionError(f"input length {x.shape[1]} != {net.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")

    trace = ForwardTrace(x=x, squeeze=squeeze)
    h = x
    for i, spec in enumerate(net.specs):
        trace.layer_inputs.append(h)
        z = h @ net.weights[i].T + net.biases[i]
        trace.pre_bn.append(z)
        if spec.has_batchnorm:
            bn = net.bn[i]
            if net.mode == TRAIN:
                # Online update of running stats; normalization itself uses
                # the running values so the traced function stays affine.
                batch_mean = z.mean(axis=0)
                batch_var = z.var(axis=0) + (z.mean(axis=0) - bn["mean"]) ** 2
                bn["mean"] = (1 - BN_MOMENTUM) * bn["mean"] + BN_MOMENTUM * batch_mean
                bn["var"] = np.maximum(
                    (1 - BN_MOMENTUM) * bn["var"] + BN_MOMENTUM * batch_var, 1e-12
                )
            z = bn["gamma"] * (z - bn["mean"]) / np.sqrt(bn["var"] + BN_EPS) + bn["beta"]
        trace.pre_act.append(z)

        act = spec.activation
        if act == "linear":
            y = z
        elif act == "relu":
            y = np.maximum(z, 0.0)
        elif act == "prelu":
            y = np.where(z > 0, z, net.prelu_slopes[i] * z)
        elif act == "tanh":
            y = np.tanh(z)
        else:  # softmax
            y = _softmax(z)
        trace.post_act.append(y)

        if spec.dropout_rate > 0 and net.mode == TRAIN:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(y.shape) < keep) / keep
            y = y * mask
            trace.dropout_masks.append(mask)
        else:
            trace.dropout_masks.append(None)
        h = y

    trace.output = h
    return trace


def _loss_output_grad(net, trace, loss, target):
    """Loss value and dL/d(pre-activation of last layer or output).

    Returns (loss_value, d_out, d_last_pre_act) where exactly one of d_out /
    d_last_pre_act is not None.  Cross-entropy pairs with a softmax head and
    seeds the gradient at the logits (p - onehot); MSE seeds at the output.
    """
    out = trace.output
    B = out.shape[0]
    if loss == "mse":
        t = np.asarray(target, dtype=float)
        if t.ndim == 1 and not trace.squeeze:
            t = t[None, :] if t.shape[0] == out.shape[1] else t
        t = np.broadcast_to(t, out.shape)
        diff = out - t
        value = float(np.mean(diff**2))
        d_out = 2.0 * diff / diff.size
        return value, d_out, None
    if loss == "cross_entropy":
        if net.specs[-1].activation != "softmax":
            raise ValueError("cross_entropy expects a softmax output layer")
        idx = np.atleast_1d(np.asarray(target, dtype=int))
        if idx.shape[0] != B:
            raise ValueError("target length does not match batch")
        p = out
        value = float(-np.mean(np.log(np.clip(p[np.arange(B), idx], 1e-300, None))))
        onehot = np.zeros_like(p)
        onehot[np.arange(B), idx] = 1.0
        d_pre = (p - onehot) / B
        return value, None, d_pre
    raise ValueError(f"unknown loss {loss!r}")


def backward(net, trace, d_output=None, d_last_pre_act=None):
    """Backpropagate from an output gradient.

    Returns (param_grads, d_input) with param_grads in `params()` order.
    `d_last_pre_act` skips the final activation (used for softmax + CE).
    """
    n = len(net.specs)
    w_grads = [None] * n
    b_grads = [None] * n
    s_grads = [None] * n
    g_grads = [None] * n
    beta_grads = [None] * n

    if d_last_pre_act is not None:
        d_pre = d_last_pre_act
        start = n - 1
        d_y = None
    else:
        d_y = np.asarray(d_output, dtype=float)
        if d_y.ndim == 1:
            d_y = d_y[None, :]
        start = n - 1
        d_pre = None

    for i in range(start, -1, -1):
        spec = net.specs[i]
        if d_pre is None:
            mask = trace.dropout_masks[i]
            if mask is not None:
                d_y = d_y * mask
            z = trace.pre_act[i]
            act = spec.activation
            if act == "linear":
                d_pre = d_y
            elif act == "relu":
                d_pre = d_y * (z > 0)
            elif act == "prelu":
                slope = net.prelu_slopes[i]
                d_pre = d_y * np.where(z > 0, 1.0, slope)
                s_grads[i] = np.sum(d_y * np.where(z > 0, 0.0, z), axis=0)
            elif act == "tanh":
                y = trace.post_act[i]
                d_pre = d_y * (1.0 - y**2)
            else:  # softmax
                y = trace.post_act[i]
                dot = np.sum(d_y * y, axis=1, keepdims=True)
                d_pre = y * (d_y - dot)
        if spec.has_batchnorm:
            bn = net.bn[i]
            inv_std = 1.0 / np.sqrt(bn["var"] + BN_EPS)
            zhat = (trace.pre_bn[i] - bn["mean"]) * inv_std
            g_grads[i] = np.sum(d_pre * zhat, axis=0)
            beta_grads[i] = np.sum(d_pre, axis=0)
            d_pre = d_pre * bn["gamma"] * inv_std

        h = trace.layer_inputs[i]
        w_grads[i] = d_pre.T @ h
        b_grads[i] = d_pre.sum(axis=0)
        d_y = d_pre @ net.weights[i]
        d_pre = None

    grads = []
    for i, spec in enumerate(net.specs):
        grads.append(w_grads[i])
        grads.append(b_grads[i])
        if spec.activation == "prelu":
            grads.append(s_grads[i] if s_grads[i] is not None else np.zeros_like(net.prelu_slopes[i]))
        if spec.has_batchnorm:
            grads.append(g_grads[i])
            grads.append(beta_grads[i])
    return grads, d_y


def grad_params(net, trace, loss, target):
    """Analytic gradient of the scalar loss w.r.t. every parameter."""
    _, d_out, d_pre = _loss_output_grad(net, trace, loss, target)
    grads, _ = backward(net, trace, d_output=d_out, d_last_pre_act=d_pre)
    return grads


def grad_input(net, trace, loss, target):
    """Analytic gradient of the scalar loss w.r.t. the network input."""
    _, d_out, d_pre = _loss_output_grad(net, trace, loss, target)
    _, d_x = backward(net, trace, d_output=d_out, d_last_pre_act=d_pre)
    return d_x[0] if trace.squeeze else d_x


def loss_value(net, trace, loss, target):
    value, _, _ = _loss_output_grad(net, trace, loss, target)
    return value


@dataclass
class AdamState:
    step: int = 0
    first_moment: list = None
    second_moment: list = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def for_network(cls, net, beta1=0.9, beta2=0.999, eps_adam=1e-8):
        return cls(
            step=0,
            first_moment=[np.zeros_like(p) for p in net.params()],
            second_moment=[np.zeros_like(p) for p in net.params()],
            beta1=beta1,
            beta2=beta2,
            eps_adam=eps_adam,
        )


def adam_step(net, grads, state, lr):
    """One Adam update (with bias correction) applied in place."""
    params = net.params()
    if len(grads) != len(params):
        raise DimensionError("gradient structure does not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)
    return net, state


# ---------------------------------------------------------------------------
# Serialization.  A checkpoint is a single .npz: a JSON header (architecture
# + user config) under key "__meta__" and every parameter / batch-norm array
# under positional keys.  float64 arrays round-trip bit-exact.
# ---------------------------------------------------------------------------

def _spec_to_dict(spec):
    return {
        "in_dim": spec.in_dim,
        "out_dim": spec.out_dim,
        "activation": spec.activation,
        "has_batchnorm": spec.has_batchnorm,
        "dropout_rate": spec.dropout_rate,
    }


def _all_arrays(net):
    """Parameters plus batch-norm running stats, in a fixed order."""
    out = list(net.params())
    for i, spec in enumerate(net.specs):
        if spec.has_batchnorm:
            out.append(net.bn[i]["mean"])
            out.append(net.bn[i]["var"])
    return out


def save_network(net, path, config=None):
    meta = {
        "format": "aqrobust-net-v1",
        "specs": [_spec_to_dict(s) for s in net.specs],
        "mode": net.mode,
        "config": config or {},
    }
    arrays = {f"a{i}": a for i, a in enumerate(_all_arrays(net))}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_network(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != "aqrobust-net-v1":
            raise ValueError(f"{path}: not an aqrobust network checkpoint")
        specs = [LayerSpec(**d) for d in meta["specs"]]
        net = Network(specs)
        net.mode = meta["mode"]
        arrays = [data[f"a{i}"] for i in range(len(_all_arrays(net)))]
    n_params = len(net.params())
    net.set_params(arrays[:n_params])
    extra = iter(arrays[n_params:])
    for i, spec in enumerate(net.specs):
        if spec.has_batchnorm:
            net.bn[i]["mean"] = next(extra).copy()
            net.bn[i]["var"] = next(extra).copy()
    return net, meta["config"]
