"""Dataset scoring, zero-shot class-prompt evaluation, and grounding heatmaps."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import SynthDataset
from .encoders import encode_class_queries
from .metrics import MetricReport, compute_report
from .model import STAGE_CONQUER, STAGE_DIVIDE, MultiQueryModel


def model_stage(model: MultiQueryModel) -> str:
    return STAGE_CONQUER if model.num_experts == 1 else STAGE_DIVIDE


def score_images(
    model: MultiQueryModel,
    images: np.ndarray,
    class_queries: torch.Tensor | None = None,
    score_mode: str = "ensemble",
    batch_size: int = 256,
) -> np.ndarray:
    """Sigmoid class scores (N, c) for raw images (N, H, W)."""
    if score_mode not in ("ensemble", "first_expert"):
        raise ValueError(f"unknown score_mode {score_mode!r}")
    stage = model_stage(model)
    dtype = next(model.parameters()).dtype
    chunks = []
    model.eval()
    with torch.no_grad():
        queries = class_queries if class_queries is not None else model.class_queries()
        for start in range(0, len(images), batch_size):
            batch = torch.as_tensor(images[start : start + batch_size], dtype=dtype)
            out = model(batch, stage, class_queries=queries)
            logits = out.per_expert[0] if score_mode == "first_expert" else out.ensemble
            chunks.append(torch.sigmoid(logits).cpu().numpy())
    if not chunks:
        return np.zeros((0, queries.shape[0]), dtype=np.float64)
    return np.concatenate(chunks).astype(np.float64)


def evaluate_model(
    model: MultiQueryModel,
    dataset: SynthDataset,
    split: str = "test",
    class_names: list[list[int]] | None = None,
    score_mode: str = "ensemble",
) -> MetricReport:
    """Score a split and assemble the metric report; custom class names select zero-shot prompts."""
    images, labels, source_ids, _ = dataset.arrays(split)
    queries = None
    if class_names is not None:
        if not class_names:
            raise ValueError("class_names must be non-empty")
        if len(class_names) != labels.shape[1]:
            raise ValueError(
                f"{len(class_names)} class names for {labels.shape[1]} label columns"
            )
        with torch.no_grad():
            queries = encode_class_queries(class_names, model.text_encoder)
    scores = score_images(model, images, class_queries=queries, score_mode=score_mode)
    return compute_report(scores, labels, source_ids)


def zero_shot_evaluate(
    model: MultiQueryModel,
    dataset: SynthDataset,
    class_names: list[list[int]],
    split: str = "test",
    score_mode: str = "ensemble",
) -> MetricReport:
    """Evaluate with class-name prompts that may be unseen during training."""
    return evaluate_model(model, dataset, split=split, class_names=class_names, score_mode=score_mode)


def grounding_heatmap(
    model: MultiQueryModel,
    image: np.ndarray,
    class_index: int,
    class_queries: torch.Tensor | None = None,
) -> np.ndarray:
    """(H, W) map in [0, 1]: upsampled last-layer cross-attention of the dominant expert."""
    height, width = image.shape
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        queries = class_queries if class_queries is not None else model.class_queries()
        if not 0 <= class_index < queries.shape[0]:
            raise ValueError(f"class_index {class_index} out of range for {queries.shape[0]} classes")
        out = model(torch.as_tensor(image[None], dtype=dtype), model_stage(model), class_queries=queries)
        attn = out.dominant_attention()[0, -1, class_index]  # (hw,)
        side_h = height // 8
        side_w = width // 8
        grid = attn.reshape(1, 1, side_h, side_w)
        up = F.interpolate(grid, size=(height, width), mode="bilinear", align_corners=False)[0, 0]
        up = up.cpu().numpy().astype(np.float64)
    lo, hi = up.min(), up.max()
    if hi - lo < 1e-12:
        return np.zeros_like(up)
    return (up - lo) / (hi - lo)


def attention_grid(model: MultiQueryModel, image: np.ndarray, class_index: int) -> tuple[np.ndarray, int]:
    """Raw last-layer attention row (h, w) of the dominant expert plus that expert's index."""
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(image[None], dtype=dtype), model_stage(model))
        expert = int(out.dominant[0])
        attn = out.attention[expert, 0, -1, class_index]
        side = image.shape[0] // 8
    return attn.reshape(side, -1).cpu().numpy().astype(np.float64), expert


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """8-bit binary PGM (P5) from values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PGM output expects a 2-D array")
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(quantized.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM back into floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height).reshape(height, width)
    return pixels.astype(np.float64) / maxval
