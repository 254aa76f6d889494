from .autoencoder import Autoencoder, ae_encode, ae_loss_grad, ae_train_local
from .classifiers import (
    KINDS,
    Classifier,
    classifier_predict,
    classifier_train,
    default_spec,
    load_model,
    save_model,
)
from .dense import DenseParams, sigmoid
from .gbdt import GBDT, Tree
from .training import SGDState, TrainSpec

__all__ = [
    "Autoencoder",
    "Classifier",
    "DenseParams",
    "GBDT",
    "KINDS",
    "SGDState",
    "TrainSpec",
    "Tree",
    "ae_encode",
    "ae_loss_grad",
    "ae_train_local",
    "classifier_predict",
    "classifier_train",
    "default_spec",
    "load_model",
    "save_model",
    "sigmoid",
]
