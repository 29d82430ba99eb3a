"""Model containers: configuration, per-layer parameters and the full DGP."""

import copy
from dataclasses import dataclass, field, asdict

import numpy as np

from .gauss import TiedFactor
from .kernel import KernelHyper

LIKELIHOODS = ("gaussian", "probit")

# Parameter groups; every trainable array is named "layer{l}.{group}".
PARAM_GROUPS = ("eta1", "lambda1_root", "log_lengthscales",
                "log_signal_variance", "log_noise_variance", "Z")

NOISE_FLOOR = 1e-6


@dataclass
class ModelConfig:
    layer_dims: list
    inducing_counts: list
    likelihood: str = "gaussian"
    epochs: int = 4000
    batch_size: int = 50
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        self.inducing_counts = [int(m) for m in self.inducing_counts]
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs at least an input and an "
                             "output dimension")
        if len(self.inducing_counts) == 1 and self.n_layers > 1:
            self.inducing_counts = self.inducing_counts * self.n_layers
        if len(self.inducing_counts) != self.n_layers:
            raise ValueError(
                f"{self.n_layers} GP layers need {self.n_layers} inducing "
                f"counts, got {len(self.inducing_counts)}")
        if min(self.layer_dims) < 1 or min(self.inducing_counts) < 1:
            raise ValueError("dimensions and inducing counts must be >= 1")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.layer_dims[-1] != 1:
            raise ValueError("only scalar outputs are supported")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and a positive "
                             "learning rate are required")

    @property
    def n_layers(self):
        return len(self.layer_dims) - 1

    def to_dict(self):
        return asdict(self)


@dataclass
class Standardization:
    """Affine maps between original units and the model's internal units."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def identity(cls, D):
        return cls(np.zeros(D), np.ones(D), 0.0, 1.0)

    @classmethod
    def fit(cls, X, y=None, scale_y=True):
        X = np.asarray(X, dtype=float)
        std = X.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        if y is None or not scale_y:
            return cls(X.mean(axis=0), std, 0.0, 1.0)
        y = np.asarray(y, dtype=float)
        y_std = float(y.std())
        return cls(X.mean(axis=0), std, float(y.mean()),
                   y_std if y_std >= 1e-8 else 1.0)

    def transform_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def inverse_y(self, mean, var):
        return mean * self.y_std + self.y_mean, var * self.y_std ** 2


@dataclass
class LayerParams:
    """One FITC GP layer with ``K`` output GPs sharing a noise variance.

    Arrays are stacked over the layer's output GPs: ``Z`` is (K, M, D),
    ``log_lengthscales`` (K, D) and ``log_signal_variance`` (K,).
    """

    Z: np.ndarray
    log_lengthscales: np.ndarray
    log_signal_variance: np.ndarray
    log_noise_variance: np.ndarray

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        self.log_lengthscales = np.asarray(self.log_lengthscales, dtype=float)
        self.log_signal_variance = np.asarray(self.log_signal_variance,
                                              dtype=float)
        self.log_noise_variance = np.asarray(self.log_noise_variance,
                                             dtype=float).reshape(())
        K, M, D = self.Z.shape
        if self.log_lengthscales.shape != (K, D):
            raise ValueError("lengthscales must be (K, D)")
        if self.log_signal_variance.shape != (K,):
            raise ValueError("signal variances must be (K,)")

    @property
    def n_out(self):
        return self.Z.shape[0]

    @property
    def n_inducing(self):
        return self.Z.shape[1]

    @property
    def input_dim(self):
        return self.Z.shape[2]

    @property
    def noise_variance(self):
        return float(np.exp(self.log_noise_variance))

    def hyper(self, k):
        return KernelHyper(self.log_lengthscales[k],
                           self.log_signal_variance[k])


@dataclass
class DgpModel:
    layers: list
    factors: list
    config: ModelConfig
    normalization: Standardization = None
    n_data: int = 1
    history: list = field(default_factory=list)
    # summary of the training history carried through checkpoints
    history_digest: dict = None

    def __post_init__(self):
        if len(self.layers) != len(self.factors):
            raise ValueError("one stacked TiedFactor per layer is required")
        D = self.layers[0].input_dim
        if self.normalization is None:
            self.normalization = Standardization.identity(D)
        for l, (layer, fac) in enumerate(zip(self.layers, self.factors)):
            if layer.input_dim != D:
                raise ValueError(f"layer {l} expects input dim "
                                 f"{layer.input_dim}, previous gives {D}")
            K, M = layer.n_out, layer.n_inducing
            if fac.eta1.shape != (K, M) or fac.lambda1_root.shape != (K, M, M):
                raise ValueError(f"factor shapes of layer {l} do not match")
            D = K

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def likelihood(self):
        return self.config.likelihood

    def params(self):
        """Named views of every trainable array (mutating them mutates the model)."""
        out = {}
        for l, (layer, fac) in enumerate(zip(self.layers, self.factors)):
            out[f"layer{l}.eta1"] = fac.eta1
            out[f"layer{l}.lambda1_root"] = fac.lambda1_root
            out[f"layer{l}.log_lengthscales"] = layer.log_lengthscales
            out[f"layer{l}.log_signal_variance"] = layer.log_signal_variance
            out[f"layer{l}.log_noise_variance"] = layer.log_noise_variance
            out[f"layer{l}.Z"] = layer.Z
        return out

    def set_params(self, values):
        current = self.params()
        for name, value in values.items():
            target = current[name]
            value = np.asarray(value, dtype=float)
            if value.shape != target.shape:
                raise ValueError(f"{name}: shape {value.shape} != "
                                 f"{target.shape}")
            target[...] = value
        for fac in self.factors:
            fac.lambda1_root[...] = np.tril(fac.lambda1_root)

    def project(self):
        """Apply the hard constraints after an optimiser step."""
        floor = np.log(NOISE_FLOOR)
        for layer in self.layers:
            np.maximum(layer.log_noise_variance, floor,
                       out=layer.log_noise_variance)
        for fac in self.factors:
            fac.lambda1_root[...] = np.tril(fac.lambda1_root)

    def copy(self):
        return copy.deepcopy(self)


def param_group(name):
    return name.split(".", 1)[1]


def zero_factors(layers):
    return [TiedFactor.zeros(layer.n_inducing, (layer.n_out,))
            for layer in layers]
