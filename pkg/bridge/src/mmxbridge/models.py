"""Model zoo for the bridge: analytic reference model plus torch wrappers.

Every model exposes ``num_classes``, ``input_shape`` (None = any size along
that axis), ``name``, and ``predict_probs(batch) -> (B, C) float64``. Torch
models emit logits internally; softmax is applied here so the wire always
carries probabilities.
"""

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .shapemath import batched_blob_compactness


class T1cShapeModel:
    """Reimplementation of the engine's T1C shape-rule classifier.

    Thresholds the blurred T1C channel at half its max, keeps the largest
    component, and calls the case irregular (class 1) when the outline
    compactness exceeds ``theta``. Emits hard 0.99/0.01 probabilities.
    """

    def __init__(self, theta: float = 1.6, default_class: int = 0, channel: int = 1,
                 blur_sigma: float = 1.5, smooth_sigma: float = 1.0,
                 num_modalities: int = 4):
        self.theta = theta
        self.default_class = default_class
        self.channel = channel
        self.blur_sigma = blur_sigma
        self.smooth_sigma = smooth_sigma
        self.num_classes = 2
        self.input_shape = (num_modalities, None, None)
        self.name = "bridge-t1c-shape"

    def predict_probs(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float32)
        comps = batched_blob_compactness(batch[:, self.channel],
                                         self.blur_sigma, self.smooth_sigma)
        probs = np.full((len(comps), 2), 0.01, dtype=np.float64)
        for i, comp in enumerate(comps):
            if comp is None:
                cls = self.default_class
            else:
                cls = 1 if comp > self.theta else 0
            probs[i, cls] = 0.99
        return probs


class TorchModel:
    """Wraps an eager or scripted torch module that maps inputs to logits."""

    def __init__(self, module: nn.Module, input_shape: Sequence[Optional[int]],
                 num_classes: int, name: str):
        self.module = module.eval()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.name = name

    def logits(self, batch: np.ndarray) -> torch.Tensor:
        tensor = torch.from_numpy(np.asarray(batch, dtype=np.float32))
        return self.module(tensor)

    def predict_probs(self, batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = self.logits(batch)
        return torch.softmax(out.double(), dim=1).numpy()


class LinearLogitModel(nn.Module):
    """Flattens the input and applies one linear layer: logits = x W^T + b."""

    def __init__(self, weights: np.ndarray, bias: Optional[np.ndarray] = None):
        super().__init__()
        w = np.asarray(weights, dtype=np.float32)
        if w.ndim < 2:
            raise ValueError("linear weights need shape (num_classes, ...input)")
        self.input_spatial = w.shape[1:]
        flat = w.reshape(w.shape[0], -1)
        self.linear = nn.Linear(flat.shape[1], flat.shape[0], bias=True)
        with torch.no_grad():
            self.linear.weight.copy_(torch.from_numpy(flat))
            if bias is None:
                self.linear.bias.zero_()
            else:
                self.linear.bias.copy_(torch.from_numpy(np.asarray(bias, dtype=np.float32)))

    def forward(self, x):
        return self.linear(x.reshape(x.shape[0], -1))


class TinyConvNet(nn.Module):
    """Small CNN used for exercising activation-based attributions."""

    def __init__(self, in_channels: int = 4, num_classes: int = 2, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv2d(in_channels, 8, kernel_size=3, padding=1)
        self.relu = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(8)
        self.head = nn.Linear(8 * 8 * 8, num_classes)
        self.gradcam_layer = self.conv

    def forward(self, x):
        x = self.pool(self.relu(self.conv(x)))
        return self.head(x.reshape(x.shape[0], -1))


def load_model(spec: str):
    """Build a model from its CLI spec.

    Forms: ``t1c-shape``, ``linear:<weights.npy>`` (num_classes x input
    weights), ``torchscript:<module.pt>`` (expects 4-channel 2-D input),
    ``tiny-cnn`` (randomly initialized test CNN).
    """
    if spec == "t1c-shape":
        return T1cShapeModel()
    if spec == "tiny-cnn":
        module = TinyConvNet()
        return TorchModel(module, (4, None, None), 2, "tiny-cnn")
    if spec.startswith("linear:"):
        weights = np.load(spec[len("linear:"):])
        module = LinearLogitModel(weights)
        return TorchModel(module, weights.shape[1:], weights.shape[0],
                          "bridge-linear")
    if spec.startswith("torchscript:"):
        module = torch.jit.load(spec[len("torchscript:"):], map_location="cpu")
        return TorchModel(module, (4, None, None), 2, "torchscript")
    raise ValueError(f"unknown model spec {spec!r}")
