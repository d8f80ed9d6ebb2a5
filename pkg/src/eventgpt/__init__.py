"""Event-camera clips to text: simulator, event codec, numpy autodiff, model and training."""

__version__ = "0.1.0"
