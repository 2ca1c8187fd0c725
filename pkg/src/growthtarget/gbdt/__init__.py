"""Histogram gradient-boosted trees for binary classification."""
from .grower import fit, log_loss
from .model import (
    GbdtConfig,
    ModelFormatError,
    Tree,
    TreeEnsemble,
    deserialize,
    serialize,
    sigmoid,
)

__all__ = [
    "GbdtConfig", "ModelFormatError", "Tree", "TreeEnsemble", "deserialize",
    "fit", "log_loss", "serialize", "sigmoid",
]


def predict_proba(model: TreeEnsemble, matrix):
    return model.predict_proba(matrix)
