"""Dictionary-based layer decomposition and few-shot adaptation.

Typical flow::

    from dictshot import architectures, data, engine, fewshot

    train, test = data.load_mnist_dir("data/mnist5k")
    old_train, old_test, pool = data.split_old_new(train, test, held_out=[7])
    model = architectures.build("lenet", 9, class_labels=old_train.label_names)
    engine.train(model, old_train, engine.TrainConfig(epochs=5))
    small = engine.transform_model(model, {"conv": 0.5, "fc": 0.5})
"""

from .engine import FreezeMask, Model, TrainConfig, evaluate, train, transform_model
from .subspace import Decomposition, SelectionPolicy, append_column, decompose, reconstruct

__version__ = "0.1.0"

__all__ = [
    "Decomposition",
    "FreezeMask",
    "Model",
    "SelectionPolicy",
    "TrainConfig",
    "append_column",
    "decompose",
    "evaluate",
    "reconstruct",
    "train",
    "transform_model",
]
