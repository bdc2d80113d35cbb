"""Dense layers, LSTM encoders, training schedule, SGD, and gradient checking.

Everything runs in float64 on top of the tape in :mod:`phraseground.autodiff`.
Layer widths here are desk-scale; all of them are configurable.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

ACTIVATIONS = ("relu", "identity", "sigmoid")

NORM_EPS = 1e-8  # below this, l2_normalize leaves the vector at zero


# ---------------------------------------------------------------------------
# initialization and schedule

@dataclass(frozen=True)
class InitScheme:
    """Weight initialization family: 'msra' (gaussian) or 'xavier' (uniform)."""
    kind: str = "xavier"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("msra", "xavier"):
            raise ValueError(f"unknown init kind {self.kind!r}")


def init_matrix(rng, n_out, n_in, kind="xavier"):
    if kind == "msra":
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    if kind == "xavier":
        a = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-a, a, size=(n_out, n_in))
    raise ValueError(f"unknown init kind {kind!r}")


@dataclass(frozen=True)
class TrainSchedule:
    """Learning-rate schedule and batch settings shared by all heads."""
    base_lr: float = 1e-3
    decay_factor: float = 10.0
    decay_every: int = 10
    epochs: int = 30
    batch_size: int = 40
    dropout_p: float = 0.5

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.decay_factor < 1:
            raise ValueError("decay_factor must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


def lr_at(schedule, epoch):
    """Stepped learning rate: base_lr reduced by decay_factor every decay_every epochs."""
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    return schedule.base_lr / schedule.decay_factor ** (epoch // schedule.decay_every)


# ---------------------------------------------------------------------------
# dense layer

@dataclass
class DenseLayer:
    weights: Tensor  # (out, in)
    bias: Tensor     # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.value.ndim != 2 or self.bias.value.ndim != 1:
            raise ValueError("weights must be 2-D and bias 1-D")
        if self.weights.value.shape[0] != self.bias.value.shape[0]:
            raise ValueError("weights/bias output dims disagree")

    @property
    def n_in(self):
        return self.weights.value.shape[1]

    @property
    def n_out(self):
        return self.weights.value.shape[0]


def dense(rng, n_out, n_in, activation="identity", kind="xavier"):
    """Fresh trainable DenseLayer with zero bias."""
    w = ad.parameter(init_matrix(rng, n_out, n_in, kind))
    b = ad.parameter(np.zeros(n_out))
    return DenseLayer(w, b, activation)


def forward(layer, x):
    """activation(W x + b); accepts a vector or a (batch, in) matrix."""
    x = as_tensor(x)
    if x.value.ndim == 1:
        if x.value.shape[0] != layer.n_in:
            raise ValueError(f"input dim {x.value.shape[0]} != layer dim {layer.n_in}")
        y = ad.matmul(layer.weights, x) + layer.bias
    elif x.value.ndim == 2:
        if x.value.shape[1] != layer.n_in:
            raise ValueError(f"input dim {x.value.shape[1]} != layer dim {layer.n_in}")
        y = ad.matmul(x, ad.transpose(layer.weights)) + layer.bias
    else:
        raise ValueError("forward expects a 1-D or 2-D input")
    if layer.activation == "relu":
        return ad.relu(y)
    if layer.activation == "sigmoid":
        return ad.sigmoid(y)
    return y


def smooth_l1(x):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise; elementwise on arrays."""
    if isinstance(x, Tensor):
        if not np.all(np.isfinite(x.value)):
            raise ValueError("smooth_l1 requires finite input")
        return ad.smooth_l1(x)
    v = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("smooth_l1 requires finite input")
    out = np.where(np.abs(v) < 1.0, 0.5 * v * v, np.abs(v) - 0.5)
    return float(out) if np.isscalar(x) or v.ndim == 0 else out


def l2_normalize(x):
    """x / ||x||; vectors with norm below NORM_EPS map to the zero vector."""
    v = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(v)
    if n <= NORM_EPS:
        return np.zeros_like(v)
    return v / n


def l2_normalize_rows(m):
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    return np.where(norms > NORM_EPS, m / safe, 0.0)


def standardize(x, floor=1e-5):
    """Per-batch feature standardization (batch-norm stand-in, no learned scale).

    Standardizes each column of a (batch, features) tensor; the variance
    floor keeps single-sample and constant batches finite.
    """
    x = as_tensor(x)
    mu = ad.tmean(x, axis=0)
    centered = x - mu
    var = ad.tmean(centered * centered, axis=0)
    return centered / ad.sqrt(var + floor)


def dropout_mask(rng, shape, p):
    """Inverted-dropout mask; multiply activations by it during training only."""
    if p <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


# ---------------------------------------------------------------------------
# LSTM encoder

class LstmEncoder:
    """Single-layer LSTM returning the final hidden state.

    Weights follow the fused layout W: (4H, I+H) with gate rows ordered
    [input, forget, output, candidate]; biases start at zero. The
    bidirectional variant runs a second pass over the reversed sequence and
    concatenates both final states, so its output dim is 2H.
    """

    def __init__(self, input_dim, hidden_dim, rng=None, bidirectional=False, name="lstm"):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.bidirectional = bidirectional
        self.name = name
        if rng is None:
            rng = np.random.default_rng(0)
        self.w_fwd = ad.parameter(init_matrix(rng, 4 * hidden_dim, input_dim + hidden_dim))
        self.b_fwd = ad.parameter(np.zeros(4 * hidden_dim))
        if bidirectional:
            self.w_bwd = ad.parameter(init_matrix(rng, 4 * hidden_dim, input_dim + hidden_dim))
            self.b_bwd = ad.parameter(np.zeros(4 * hidden_dim))

    @property
    def output_dim(self):
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def params(self):
        out = [(f"{self.name}.w_fwd", self.w_fwd), (f"{self.name}.b_fwd", self.b_fwd)]
        if self.bidirectional:
            out += [(f"{self.name}.w_bwd", self.w_bwd), (f"{self.name}.b_bwd", self.b_bwd)]
        return out

    def _run(self, xs, w, b):
        h = Tensor(np.zeros(self.hidden_dim))
        c = Tensor(np.zeros(self.hidden_dim))
        hd = self.hidden_dim
        for x in xs:
            z = ad.matmul(w, ad.concat([as_tensor(x), h])) + b
            i = ad.sigmoid(z[0:hd])
            f = ad.sigmoid(z[hd:2 * hd])
            o = ad.sigmoid(z[2 * hd:3 * hd])
            g = ad.tanh(z[3 * hd:4 * hd])
            c = f * c + i * g
            h = o * ad.tanh(c)
        return h

    def encode(self, xs):
        """Encode a sequence of input vectors; errors on an empty sequence."""
        xs = list(xs)
        if not xs:
            raise ValueError("cannot encode an empty sequence")
        h = self._run(xs, self.w_fwd, self.b_fwd)
        if self.bidirectional:
            h = ad.concat([h, self._run(xs[::-1], self.w_bwd, self.b_bwd)])
        return h


# ---------------------------------------------------------------------------
# parameter bundles

class ParameterBundle:
    """Ordered name -> Tensor map for one trainable head; JSON round-trips."""

    SCHEMA_VERSION = 1

    def __init__(self, params=None):
        self._params = {}
        if params:
            for name, t in params:
                self.add(name, t)

    def add(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def gradients(self):
        """Snapshot of current gradients as plain arrays (zeros when unset)."""
        return {n: (np.zeros_like(t.value) if t.grad is None else t.grad.copy())
                for n, t in self._params.items()}

    def n_scalars(self):
        return sum(t.value.size for t in self._params.values())

    def copy_values(self):
        return {n: t.value.copy() for n, t in self._params.items()}

    def to_json_dict(self):
        return {
            "schema_version": self.SCHEMA_VERSION,
            "params": {
                n: {"shape": list(t.value.shape), "values": t.value.ravel().tolist()}
                for n, t in self._params.items()
            },
        }

    @classmethod
    def from_json_dict(cls, d):
        if d.get("schema_version") != cls.SCHEMA_VERSION:
            raise ValueError(f"unsupported bundle schema_version {d.get('schema_version')!r}")
        bundle = cls()
        for name, spec in d["params"].items():
            arr = np.array(spec["values"], dtype=np.float64).reshape(spec["shape"])
            bundle.add(name, ad.parameter(arr))
        return bundle

    def to_json(self):
        # insertion order is deterministic; sorting would scramble it
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, s):
        return cls.from_json_dict(json.loads(s))

    def load_values(self, other):
        """Copy values from another bundle with identical names/shapes."""
        if set(other.names()) != set(self.names()):
            raise ValueError("bundle names disagree")
        for n, t in self._params.items():
            src = other[n].value
            if src.shape != t.value.shape:
                raise ValueError(f"shape mismatch for {n!r}")
            t.value[...] = src


def sgd_step(params, grads, lr):
    """p <- p - lr * g for every parameter; updates in place and returns params."""
    for name, t in params.items():
        g = grads[name]
        g = g.value if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if g.shape != t.value.shape:
            raise ValueError(f"gradient shape mismatch for {name!r}: "
                             f"{g.shape} vs {t.value.shape}")
        t.value -= lr * g
    return params


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(loss_fn, params, epsilon=1e-5, floor=1e-6):
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor (run with dropout disabled). The relative error for each
    coordinate is |a - n| / max(|a|, |n|, floor), so coordinates whose true
    gradient sits below the floor are compared on an absolute scale.
    """
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise ValueError("loss is not finite")
    params.zero_grad()
    loss.backward()
    analytic = params.gradients()
    params.zero_grad()

    worst = 0.0
    for name, t in params.items():
        flat = t.value.ravel()
        a = analytic[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = float(loss_fn().value)
            flat[i] = orig - epsilon
            lm = float(loss_fn().value)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise ValueError("loss is not finite during perturbation")
            numeric = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(a[i]), abs(numeric), floor)
            worst = max(worst, abs(a[i] - numeric) / denom)
    return worst
