"""Convolutional activation capture and overlay rendering.

Captures are taken with forward hooks in a single inference pass and are
observationally pure: model outputs with and without hooks are identical.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

from .data import DatasetManifest, PreprocessSpec, bilinear_resize, load_image, preprocess_image
from .errors import ConfigError, IoError, LayerNotFoundError, SplitError
from .model import NetworkState, _as_input_tensor
from .seeding import LABEL_SAMPLING, rng_for

import torch

HEAT_COLORMAP = "magma"  # perceptually uniform ramp, pinned for reproducibility
OVERLAY_ALPHA = 0.5


@dataclass
class ActivationTrace:
    layer_id: str
    feature_map: np.ndarray  # h x w x c
    input_id: str = ""
    reduction: str = "channel_mean"


def capture_activations(state: NetworkState, image: np.ndarray, layer_ids, input_id: str = "") -> list:
    """Capture feature maps for the requested layers in one forward pass."""
    registry = state.net.layer_registry()
    unknown = [lid for lid in layer_ids if lid not in registry]
    if unknown:
        raise LayerNotFoundError(f"unknown layer(s) {unknown}; valid ids: {sorted(registry)}")

    captured = {}
    handles = []

    def make_hook(lid):
        def hook(_module, _inputs, output):
            captured[lid] = output.detach().clone()

        return hook

    for lid in layer_ids:
        handles.append(registry[lid].register_forward_hook(make_hook(lid)))
    try:
        x = _as_input_tensor(state, image)
        with torch.no_grad():
            state.net(x, training=False)
    finally:
        for h in handles:
            h.remove()

    traces = []
    for lid in layer_ids:
        fmap = captured[lid][0].permute(1, 2, 0).numpy().astype(np.float64)
        traces.append(ActivationTrace(layer_id=lid, feature_map=fmap, input_id=input_id))
    return traces


def reduce_channels(feature_map: np.ndarray, reduction: str) -> np.ndarray:
    """Collapse h x w x c to h x w per the reduction rule."""
    if reduction == "channel_mean":
        return feature_map.mean(axis=2)
    if reduction == "channel_max":
        return feature_map.max(axis=2)
    if reduction.startswith("single_channel:"):
        idx = int(reduction.split(":", 1)[1])
        if not 0 <= idx < feature_map.shape[2]:
            raise ConfigError(f"channel {idx} out of range for {feature_map.shape[2]} channels")
        return feature_map[:, :, idx]
    raise ConfigError(f"unknown reduction {reduction!r}")


def normalize_map(reduced: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0,1]; constant maps become all-zero."""
    lo, hi = reduced.min(), reduced.max()
    if hi - lo == 0:
        return np.zeros_like(reduced)
    return (reduced - lo) / (hi - lo)


def heat_for_image(trace: ActivationTrace, reduction: str, out_height: int, out_width: int) -> np.ndarray:
    """Reduced, normalized, upsampled heat map in [0,1]."""
    reduced = reduce_channels(trace.feature_map, reduction)
    return np.clip(bilinear_resize(normalize_map(reduced), out_height, out_width), 0.0, 1.0)


def render_overlay(trace: ActivationTrace, original_image: np.ndarray, reduction: str, output_path):
    """Blend a heat colormap over the grayscale original; also emit the raw map as CSV.

    Returns (overlay_png_path, csv_path).
    """
    gray = np.asarray(original_image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    lo, hi = gray.min(), gray.max()
    gray01 = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)

    reduced = reduce_channels(trace.feature_map, reduction)
    heat = heat_for_image(trace, reduction, gray.shape[0], gray.shape[1])
    cmap = matplotlib.colormaps[HEAT_COLORMAP]
    heat_rgb = cmap(heat)[:, :, :3]
    base_rgb = np.repeat(gray01[:, :, None], 3, axis=2)
    blended = (1 - OVERLAY_ALPHA) * base_rgb + OVERLAY_ALPHA * heat_rgb

    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.clip(np.rint(blended * 255), 0, 255).astype(np.uint8)).save(
            output_path, format="PNG"
        )
        csv_path = output_path.with_suffix(".csv")
        with csv_path.open("w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in reduced:
                writer.writerow([f"{v:.9g}" for v in row])
    except OSError as exc:
        raise IoError(f"failed writing overlay {output_path}: {exc}") from exc
    return str(output_path), str(csv_path)


def class_activation_summary(
    state: NetworkState,
    manifest: DatasetManifest,
    split: str,
    layer_id: str,
    samples_per_class: int,
    preprocess: PreprocessSpec,
    seed: int = 0,
    output_directory=None,
):
    """Mean channel-mean activation map per class over seeded samples.

    Returns (maps_by_class, energy_by_class); optionally writes one summary
    PNG per class plus an activation-energy CSV.
    """
    rng = rng_for(seed, LABEL_SAMPLING, split, layer_id)
    maps_by_class = {}
    energy_by_class = {}
    for class_index, class_name in enumerate(manifest.taxonomy.class_names):
        pool = [s for s in manifest.split_samples(split) if s.label_index == class_index]
        if len(pool) < samples_per_class:
            raise SplitError(
                f"class {class_name!r} has {len(pool)} samples in split {split!r}, "
                f"need {samples_per_class}"
            )
        chosen = [pool[i] for i in sorted(rng.choice(len(pool), samples_per_class, replace=False))]
        total = None
        for sample in chosen:
            x = preprocess_image(load_image(sample.source_path), preprocess)
            trace = capture_activations(state, x, [layer_id], input_id=sample.id)[0]
            reduced = reduce_channels(trace.feature_map, "channel_mean")
            total = reduced if total is None else total + reduced
        mean_map = total / samples_per_class
        maps_by_class[class_name] = mean_map
        energy_by_class[class_name] = float(mean_map.mean())

    if output_directory is not None:
        out = Path(output_directory)
        out.mkdir(parents=True, exist_ok=True)
        cmap = matplotlib.colormaps[HEAT_COLORMAP]
        for class_name, mean_map in maps_by_class.items():
            rgb = cmap(normalize_map(mean_map))[:, :, :3]
            Image.fromarray(np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)).save(
                out / f"summary__{class_name}__{layer_id}.png", format="PNG"
            )
        with (out / "activation_energy.csv").open("w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["class", "layer", "mean_activation_energy"])
            for class_name in manifest.taxonomy.class_names:
                writer.writerow([class_name, layer_id, f"{energy_by_class[class_name]:.9g}"])
    return maps_by_class, energy_by_class
