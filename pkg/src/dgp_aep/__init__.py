"""Deep Gaussian process regression trained by approximate expectation propagation.

Typical use::

    from dgp_aep import ModelConfig, initialize_model, train, evaluate
    model = initialize_model(ModelConfig([D, 2, 1], [50]), X, y)
    model, history = train(model, X, y)
    print(evaluate(model, X_test, y_test).summary())
"""

from .dataio import (Dataset, load_checkpoint, load_csv, save_checkpoint,
                     split, write_csv)
from .energy import aep_objective, datapoint_logz, minibatch_objective, sep_update
from .model import DgpModel, ModelConfig
from .prediction import evaluate, predict, sample_forward
from .training import adam_step, gradcheck, initialize_model, train

__version__ = "0.1.0"

__all__ = ["Dataset", "DgpModel", "ModelConfig", "adam_step",
           "aep_objective", "datapoint_logz", "evaluate", "gradcheck",
           "initialize_model", "load_checkpoint", "load_csv",
           "minibatch_objective", "predict", "sample_forward",
           "save_checkpoint", "sep_update", "split", "train", "write_csv"]
