"""Random-forest probability calibration toolkit."""

from rfcal.dataset import Dataset, InvalidInputError
from rfcal.forest import ForestConfig, RandomForestModel, predict_forest, train_forest

__all__ = ["Dataset", "InvalidInputError", "ForestConfig", "RandomForestModel", "predict_forest",
           "train_forest"]
__version__ = "0.1.0"
