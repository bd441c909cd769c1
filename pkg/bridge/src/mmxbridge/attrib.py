"""Gradient- and activation-based heatmap export for torch models.

Writes one raw (signed, unrectified) float32 NPY heatmap per (case, method)
using the scoring engine's naming convention `<case_id>__<method>.npy`, plus
an index.json with timing, so the files drop straight into the engine's eval
stage. All attributions target the logit of the model's predicted class.
"""

import hashlib
import json
import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import TorchModel

METHODS = (
    "gradient",
    "inputxgradient",
    "integrated_gradients",
    "smoothgrad",
    "gradient_shap",
    "deconvolution",
    "guided_backprop",
    "gradcam",
    "guided_gradcam",
)

IG_STEPS = 32
NOISE_SAMPLES = 16
NOISE_SIGMA_FRACTION = 0.1


class UnsupportedMethodError(ValueError):
    pass


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _predicted_class(model: TorchModel, x: torch.Tensor) -> int:
    with torch.no_grad():
        return int(model.module(x).argmax(dim=1).item())


def _input_gradient(model: TorchModel, x: torch.Tensor, target: int) -> torch.Tensor:
    x = x.clone().requires_grad_(True)
    logits = model.module(x)
    logits[0, target].backward()
    return x.grad.detach()


class _ReluOverride:
    """Temporarily replaces the ReLU backward pass via module hooks."""

    def __init__(self, module: nn.Module, mode: str):
        self.module = module
        self.mode = mode
        self.handles = []

    def __enter__(self):
        def hook(_mod, grad_input, grad_output):
            if self.mode == "deconvolution":
                return (grad_output[0].clamp(min=0.0),)
            return (grad_input[0].clamp(min=0.0),)  # guided backprop

        for sub in self.module.modules():
            if isinstance(sub, nn.ReLU):
                self.handles.append(sub.register_full_backward_hook(hook))
        if not self.handles:
            raise UnsupportedMethodError(
                f"{self.mode} requires nn.ReLU modules in the model"
            )
        return self

    def __exit__(self, *exc):
        for handle in self.handles:
            handle.remove()


def _gradcam_map(model: TorchModel, x: torch.Tensor, target: int) -> torch.Tensor:
    layer = getattr(model.module, "gradcam_layer", None)
    if layer is None:
        raise UnsupportedMethodError("gradcam requires a model with a gradcam_layer")
    store = {}

    def fwd_hook(_mod, _inp, out):
        store["act"] = out

    handle = layer.register_forward_hook(fwd_hook)
    try:
        x = x.clone().requires_grad_(True)
        logits = model.module(x)
        act = store["act"]
        act.retain_grad()
        logits[0, target].backward()
        grad = act.grad
    finally:
        handle.remove()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear", align_corners=False)
    return cam.detach()[0, 0]


def attribute_case(model: TorchModel, image: np.ndarray, method: str,
                   seed: int = 0) -> np.ndarray:
    """Raw heatmap of ``image`` (M, H, W) for one method."""
    if method not in METHODS:
        raise UnsupportedMethodError(
            f"unsupported method {method!r} (supported: {', '.join(METHODS)})"
        )
    x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None]
    target = _predicted_class(model, x)

    if method == "gradient":
        heat = _input_gradient(model, x, target)[0]
    elif method == "inputxgradient":
        heat = (_input_gradient(model, x, target) * x)[0]
    elif method == "integrated_gradients":
        total = torch.zeros_like(x)
        for step in range(IG_STEPS):
            alpha = (step + 0.5) / IG_STEPS
            total += _input_gradient(model, x * alpha, target)
        heat = (total / IG_STEPS * x)[0]
    elif method == "smoothgrad":
        gen = torch.Generator().manual_seed(seed)
        sigma = NOISE_SIGMA_FRACTION * float(x.max() - x.min())
        total = torch.zeros_like(x)
        for _ in range(NOISE_SAMPLES):
            noise = torch.randn(x.shape, generator=gen) * sigma
            total += _input_gradient(model, x + noise, target)
        heat = (total / NOISE_SAMPLES)[0]
    elif method == "gradient_shap":
        gen = torch.Generator().manual_seed(seed)
        sigma = NOISE_SIGMA_FRACTION * float(x.max() - x.min())
        total = torch.zeros_like(x)
        for _ in range(NOISE_SAMPLES):
            alpha = torch.rand(1, generator=gen).item()
            noise = torch.randn(x.shape, generator=gen) * sigma
            grad = _input_gradient(model, x * alpha + noise, target)
            total += grad * x
        heat = (total / NOISE_SAMPLES)[0]
    elif method in ("deconvolution", "guided_backprop"):
        with _ReluOverride(model.module, method):
            heat = _input_gradient(model, x, target)[0]
    elif method == "gradcam":
        cam = _gradcam_map(model, x, target)
        heat = cam[None].expand(x.shape[1], -1, -1)  # same map on every modality
    else:  # guided_gradcam
        cam = _gradcam_map(model, x, target)
        with _ReluOverride(model.module, "guided_backprop"):
            guided = _input_gradient(model, x, target)[0]
        heat = guided * cam[None]
    return heat.numpy().astype(np.float32)


def export_heatmaps(model, manifest_path, methods: Sequence[str], out_dir,
                    seed: int = 0) -> Path:
    """Compute heatmaps for every (case, method) and write NPY files + index.

    Per-case backend failures are recorded in the index with status "error"
    and the run continues.
    """
    if not isinstance(model, TorchModel):
        raise UnsupportedMethodError(
            "heatmap export requires a torch-backed model (gradients needed)"
        )
    for method in methods:
        if method not in METHODS:
            raise UnsupportedMethodError(
                f"unsupported method {method!r} (supported: {', '.join(METHODS)})"
            )
    from .dataset import load_cases

    cases = load_cases(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for case_id, image in cases:
        for method in methods:
            fname = f"{case_id}__{method}.npy"
            t0 = time.perf_counter()
            try:
                heat = attribute_case(model, image, method,
                                      seed=_stable_seed(seed, case_id, method))
                np.save(out / fname, heat)
                status = "ok"
            except UnsupportedMethodError:
                raise
            except (RuntimeError, ValueError) as exc:
                status = f"error: {exc}"
            entries.append({
                "case": case_id,
                "method": method,
                "file": fname,
                "seconds": time.perf_counter() - t0,
                "status": status,
            })
    index = {
        "version": 1,
        "model": model.name,
        "config": {"methods": list(methods), "seed": seed,
                   "ig_steps": IG_STEPS, "noise_samples": NOISE_SAMPLES},
        "entries": entries,
    }
    index_path = out / "index.json"
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return index_path
