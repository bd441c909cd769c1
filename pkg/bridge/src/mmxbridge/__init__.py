"""Bridge between deep-learning models and the heatmap evaluation engine.

Serves models behind the engine's newline-delimited JSON prediction protocol
and exports gradient/activation-based heatmaps as NPY files the engine can
score directly.
"""

from .attrib import METHODS, UnsupportedMethodError, attribute_case, export_heatmaps
from .models import LinearLogitModel, T1cShapeModel, TinyConvNet, TorchModel, load_model
from .protocol import PROTOCOL_VERSION, serve_stdio, serve_tcp

__version__ = "0.1.0"
