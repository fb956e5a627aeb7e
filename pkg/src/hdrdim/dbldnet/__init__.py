"""Power-conditioned convolutional backlight predictor."""
from .model import (NetConfig, NetParams, ShapeMismatchError, backward, centers_upstream,
                    forward, init_params, load_checkpoint, save_checkpoint)
from .train import TrainConfig, train

__all__ = ["NetConfig", "NetParams", "ShapeMismatchError", "TrainConfig", "backward",
           "centers_upstream", "forward", "init_params", "load_checkpoint", "save_checkpoint",
           "train"]
