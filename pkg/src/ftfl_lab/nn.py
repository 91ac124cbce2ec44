"""Feed-forward networks with hand-written reverse mode and Adam.

Parameters are plain lists of float64 arrays.  A network may be *stacked*:
every weight carries a leading member axis ``K`` so that an ensemble of
identically shaped networks runs as one batched matmul.  The same code path
serves both layouts because all contractions go through ``np.matmul``
broadcasting.

Layout of a parameter list, per hidden layer: ``W, b`` and, when the spec
asks for layer norm, ``gamma, beta``; then ``W, b`` for the output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "swish", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh")
LAYER_NORM_EPS = 1e-5


def sigmoid(x):
    # tanh form is overflow-free and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def activation_apply(kind: str, x):
    """Apply a named activation elementwise; works on scalars and arrays."""
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "swish":
        return x * sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "identity":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x, y):
    """Derivative of the activation at pre-activation ``x`` (``y`` = output)."""
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "swish":
        s = sigmoid(x)
        return s + y * (1.0 - s)
    if kind == "tanh":
        return 1.0 - y * y
    if kind == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    output_activation: str = "identity"
    layer_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be nonempty")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    @property
    def per_hidden(self) -> int:
        return 4 if self.layer_norm else 2


def init_params(spec: MlpSpec, rng: np.random.Generator, n_stack: int | None = None) -> list[np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights and biases; LN scale 1, shift 0."""
    lead = () if n_stack is None else (n_stack,)
    bias_lead = () if n_stack is None else (n_stack, 1)
    params = []
    sizes = spec.layer_sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=lead + (fan_in, fan_out)))
        params.append(rng.uniform(-bound, bound, size=bias_lead + (fan_out,)))
        if spec.layer_norm and i < len(spec.hidden_dims):
            params.append(np.ones(bias_lead + (fan_out,)))
            params.append(np.zeros(bias_lead + (fan_out,)))
    return params


def param_count(params: list[np.ndarray]) -> int:
    return int(sum(p.size for p in params))


def flatten(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def unflatten(flat: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    out, i = [], 0
    for p in like:
        out.append(np.asarray(flat[i:i + p.size], dtype=np.float64).reshape(p.shape))
        i += p.size
    if i != flat.size:
        raise ValueError(f"flat vector has {flat.size} entries, expected {i}")
    return out


def _check_input(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (spec.input_dim,):
        raise ValueError(f"input has trailing dim {x.shape[-1:]}, expected {spec.input_dim}")
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _hidden_forward(kind: str, z: np.ndarray):
    """Activation output plus whatever the backward pass needs from it."""
    if kind == "swish":
        sig = sigmoid(z)
        return z * sig, sig
    if kind == "relu":
        return np.maximum(z, 0.0), None
    a = np.tanh(z)
    return a, None


def _hidden_backward(kind: str, g: np.ndarray, layer: dict) -> np.ndarray:
    if kind == "swish":
        sig = layer["aux"]
        return g * (sig * (1.0 + layer["z"] * (1.0 - sig)))
    if kind == "relu":
        return g * (layer["z"] > 0)
    return g * (1.0 - layer["a"] * layer["a"])


def forward_cached(spec: MlpSpec, params: list[np.ndarray], x):
    """Forward pass keeping the intermediates needed by :func:`backward_cached`."""
    x, squeeze = _check_input(spec, x)
    cache = {"x": x, "squeeze": squeeze, "layers": []}
    h = x
    k = 0
    for width in spec.hidden_dims:
        z = h @ params[k]
        z += params[k + 1]
        a, aux = _hidden_forward(spec.activation, z)
        layer = {"inp": h, "z": z, "a": a, "aux": aux}
        if spec.layer_norm:
            gamma, beta = params[k + 2], params[k + 3]
            inv_w = 1.0 / width
            centered = a - np.add.reduce(a, axis=-1, keepdims=True) * inv_w
            inv_std = 1.0 / np.sqrt(np.add.reduce(centered * centered, axis=-1, keepdims=True) * inv_w
                                    + LAYER_NORM_EPS)
            n = centered * inv_std
            layer["n"], layer["inv_std"] = n, inv_std
            h = gamma * n + beta
        else:
            h = a
        cache["layers"].append(layer)
        k += spec.per_hidden
    z = h @ params[k]
    z += params[k + 1]
    y = np.tanh(z) if spec.output_activation == "tanh" else z
    cache["out"] = {"inp": h, "z": z, "y": y}
    if squeeze:
        y = y[..., 0, :]
    return y, cache


def forward(spec: MlpSpec, params: list[np.ndarray], x) -> np.ndarray:
    return forward_cached(spec, params, x)[0]


def _linear_backward(inp, W, g, stacked_params: bool, need_input: bool = True):
    gW = np.swapaxes(inp, -1, -2) @ g
    if gW.ndim > W.ndim:
        gW = np.add.reduce(gW, axis=tuple(range(gW.ndim - W.ndim)))
    gb = np.add.reduce(g, axis=-2, keepdims=stacked_params)
    if stacked_params and gb.ndim > 3:
        gb = np.add.reduce(gb, axis=tuple(range(gb.ndim - 3)))
    g_inp = g @ np.swapaxes(W, -1, -2) if need_input else None
    return gW, gb, g_inp


def backward_cached(spec: MlpSpec, params: list[np.ndarray], cache, upstream, need_input: bool = True):
    """Gradients of ``sum(output * upstream)`` w.r.t. params and input."""
    g = np.asarray(upstream, dtype=np.float64)
    out = cache["out"]
    expected = out["y"].shape[:-2] + out["y"].shape[-1:] if cache["squeeze"] else out["y"].shape
    if g.shape != expected:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {expected}")
    if cache["squeeze"]:
        g = g[..., None, :]
    stacked = params[0].ndim == 3
    grads: list[np.ndarray | None] = [None] * len(params)

    k = len(params) - 2
    if spec.output_activation == "tanh":
        g = g * (1.0 - out["y"] * out["y"])
    grads[k], grads[k + 1], g = _linear_backward(out["inp"], params[k], g, stacked)

    layers = cache["layers"]
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        k -= spec.per_hidden
        if spec.layer_norm:
            gamma = params[k + 2]
            n, inv_std = layer["n"], layer["inv_std"]
            inv_w = 1.0 / n.shape[-1]
            grads[k + 2] = np.add.reduce(g * n, axis=-2, keepdims=stacked)
            grads[k + 3] = np.add.reduce(g, axis=-2, keepdims=stacked)
            dn = g * gamma
            g = inv_std * (dn - np.add.reduce(dn, axis=-1, keepdims=True) * inv_w
                           - n * (np.add.reduce(dn * n, axis=-1, keepdims=True) * inv_w))
        g = _hidden_backward(spec.activation, g, layer)
        grads[k], grads[k + 1], g = _linear_backward(layer["inp"], params[k], g, stacked,
                                                     need_input or i > 0)

    if not need_input:
        return grads, None
    x = cache["x"]
    if g.ndim > x.ndim:
        g = np.add.reduce(g, axis=tuple(range(g.ndim - x.ndim)))
    if cache["squeeze"]:
        g = g[0]
    return grads, g


def backward(spec: MlpSpec, params: list[np.ndarray], x, upstream):
    _, cache = forward_cached(spec, params, x)
    return backward_cached(spec, params, cache, upstream)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1.5e-4

    @classmethod
    def create(cls, params: list[np.ndarray], lr=3e-4, beta1=0.9, beta2=0.999, eps=1.5e-4) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    if len(grads) != len(params):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v * (1.0 / bc2))
        denom += state.eps
        p -= (state.lr / bc1) * m / denom
    return params, state


@dataclass
class Network:
    """A spec bundled with its parameters and optimizer state."""

    spec: MlpSpec
    params: list[np.ndarray]
    opt: AdamState = field(repr=False)

    @classmethod
    def create(cls, spec: MlpSpec, rng: np.random.Generator, n_stack: int | None = None,
               lr=3e-4, beta1=0.9, beta2=0.999, eps=1.5e-4) -> "Network":
        params = init_params(spec, rng, n_stack)
        return cls(spec, params, AdamState.create(params, lr, beta1, beta2, eps))

    def __call__(self, x):
        return forward(self.spec, self.params, x)

    def forward_cached(self, x):
        return forward_cached(self.spec, self.params, x)

    def backward_cached(self, cache, upstream, need_input: bool = True):
        return backward_cached(self.spec, self.params, cache, upstream, need_input)

    def step(self, grads):
        adam_step(self.opt, self.params, grads)

    def copy_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params]
