"""Generator network and measurement operators."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .diffcore import LEAKY, PiecewiseLinear, Tensor
from .errors import ConfigError, DimensionError

__all__ = [
    "GeneratorModel",
    "MeasurementOperator",
    "build_generator",
    "build_mlp_layers",
    "gen_forward",
    "build_linear_sensor",
    "build_network_sensor",
    "sensor_from_matrix",
    "sense",
    "as_rng",
]

OUTPUT_HEADS = ("linear", "sigmoid")


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def build_mlp_layers(dims, rng):
    """He-initialised weights N(0, 2/fan_in) and zero biases for ``dims``."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _mlp(x, weights, biases, act, head="linear"):
    """Affine + activation stack; the last layer is affine only."""
    h = x
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = dc.affine_forward(W, b, h)
        if i < last:
            h = dc.pwl_forward(h, act)
    if head == "sigmoid":
        h = dc.sigmoid(h)
    return h


def _split(params):
    return list(params[0::2]), list(params[1::2])


@dataclass
class GeneratorModel:
    """Fully connected generator R^k -> R^n.

    ``d`` is the number of affine layers, ``h`` the widest layer and ``t`` the
    number of activation pieces.
    """

    weights: list
    biases: list
    activation: PiecewiseLinear = LEAKY
    output: str = "linear"

    def __post_init__(self):
        if not self.weights:
            raise ConfigError("generator needs at least one layer")
        if self.output not in OUTPUT_HEADS:
            raise ConfigError(f"unknown output head {self.output!r}")
        for W_prev, W in zip(self.weights, self.weights[1:]):
            if W.shape[1] != W_prev.shape[0]:
                raise DimensionError("consecutive layer shapes do not chain")

    @property
    def layer_dims(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def k(self):
        return self.layer_dims[0]

    @property
    def n(self):
        return self.layer_dims[-1]

    @property
    def d(self):
        return len(self.weights)

    @property
    def h(self):
        return max(self.layer_dims)

    @property
    def t(self):
        return self.activation.pieces

    def params(self):
        """Flat parameter list ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params):
        vals = [p.value if isinstance(p, Tensor) else np.asarray(p) for p in params]
        W, b = _split(vals)
        return replace(self, weights=[w.copy() for w in W], biases=[x.copy() for x in b])

    def copy(self):
        return self.with_params(self.params())


def build_generator(layer_dims, seed=None, activation: PiecewiseLinear = LEAKY,
                    output="linear") -> GeneratorModel:
    """Random generator with the given ``[k, h1, ..., n]`` layer widths."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ConfigError("layer spec needs at least input and output dims")
    if min(dims) < 1:
        raise ConfigError(f"all dims must be >= 1, got {dims}")
    W, b = build_mlp_layers(dims, as_rng(seed))
    return GeneratorModel(W, b, activation, output)


def _check_width(x, expected, what):
    width = x.shape[-1]
    if width != expected:
        raise DimensionError(f"{what}: expected last dim {expected}, got {width}")


def gen_forward(G: GeneratorModel, z, params=None) -> Tensor:
    """G(z) for one latent (k,) or a batch (N, k).

    ``params`` optionally supplies tracked tensors in place of the stored
    weights, so the output can be differentiated w.r.t. them.
    """
    z = dc.constant(z)
    _check_width(z, G.k, "gen_forward")
    if params is None:
        weights, biases = G.weights, G.biases
    else:
        weights, biases = _split(params)
    return _mlp(z, weights, biases, G.activation, G.output)


@dataclass
class MeasurementOperator:
    """Fixed Gaussian matrix (``kind="linear"``) or learned network."""

    kind: str
    matrix: np.ndarray | None = None
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: PiecewiseLinear = LEAKY

    def __post_init__(self):
        if self.kind not in ("linear", "network"):
            raise ConfigError(f"unknown sensing kind {self.kind!r}")
        if self.kind == "linear" and self.matrix is None:
            raise ConfigError("linear sensor needs a matrix")
        if self.kind == "network" and not self.weights:
            raise ConfigError("network sensor needs layers")
        if self.matrix is not None:
            self.matrix.setflags(write=False)

    @property
    def m(self):
        return self.matrix.shape[0] if self.kind == "linear" else self.weights[-1].shape[0]

    @property
    def n(self):
        return self.matrix.shape[1] if self.kind == "linear" else self.weights[0].shape[1]

    @property
    def trainable(self):
        return self.kind == "network"

    @property
    def layer_dims(self):
        if self.kind == "linear":
            return [self.n, self.m]
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_params(self, params):
        if self.kind == "linear":
            return self
        vals = [p.value if isinstance(p, Tensor) else np.asarray(p) for p in params]
        W, b = _split(vals)
        return replace(self, weights=[w.copy() for w in W], biases=[x.copy() for x in b])

    def copy(self):
        if self.kind == "linear":
            return self
        return self.with_params(self.params())


def build_linear_sensor(m, n, seed=None, orthogonal=False, compress=False) -> MeasurementOperator:
    """A with i.i.d. N(0, 1/m) entries.

    ``orthogonal=True`` (requires m == n) returns a Haar-random orthogonal
    matrix instead.  ``compress=True`` enforces m < n.
    """
    m, n = int(m), int(n)
    if m < 1 or n < 1:
        raise ConfigError("sensor dims must be >= 1")
    if compress and m >= n:
        raise ConfigError(f"m={m} must be < n={n} for compressive sensing")
    rng = as_rng(seed)
    if orthogonal:
        if m != n:
            raise ConfigError("orthogonal override needs m == n")
        q, r = np.linalg.qr(rng.normal(size=(n, n)))
        A = q * np.sign(np.diag(r))
    else:
        A = rng.normal(0.0, 1.0 / np.sqrt(m), size=(m, n))
    return MeasurementOperator("linear", matrix=A)


def sensor_from_matrix(A) -> MeasurementOperator:
    return MeasurementOperator("linear", matrix=np.array(A, dtype=np.float64))


def build_network_sensor(n, m, hidden=None, seed=None, activation: PiecewiseLinear = LEAKY):
    """Learned sensor A_phi: one hidden layer of width 2m by default."""
    hidden = (2 * int(m),) if hidden is None else tuple(int(h) for h in hidden)
    dims = [int(n), *hidden, int(m)]
    if min(dims) < 1:
        raise ConfigError(f"all dims must be >= 1, got {dims}")
    W, b = build_mlp_layers(dims, as_rng(seed))
    return MeasurementOperator("network", weights=W, biases=b, activation=activation)


def sense(M: MeasurementOperator, x, params=None) -> Tensor:
    """y = A x (linear) or y = A_phi(x) (network); x is (n,) or (N, n)."""
    x = dc.constant(x)
    _check_width(x, M.n, "sense")
    if M.kind == "linear":
        A = dc.constant(M.matrix)
        if x.ndim == 1:
            return dc.reshape(dc.matmul(dc.reshape(x, (1, -1)), A.T), (M.m,))
        return dc.matmul(x, A.T)
    if params is None:
        weights, biases = M.weights, M.biases
    else:
        weights, biases = _split(params)
    return _mlp(x, weights, biases, M.activation)
