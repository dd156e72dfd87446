"""Evaluation metrics, Grad-CAM heat maps and latency timing."""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractError
from .tensor import Tensor, no_grad


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _check_cm(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 1:
        raise ContractError(f"confusion matrix must be square and non-empty, got shape {list(cm.shape)}")
    if cm.sum() == 0:
        raise ContractError("confusion matrix holds no samples")
    if np.any(cm < 0):
        raise ContractError("confusion matrix entries must be >= 0")
    return cm


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a class with no predictions or no support scores 0."""
    cm = _check_cm(cm).astype(np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    denom = predicted + actual
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / denom, 0.0)
    return f1


def macro_f1(cm) -> float:
    return float(per_class_f1(cm).mean())


def accuracy(cm) -> float:
    cm = _check_cm(cm)
    return float(np.trace(cm) / cm.sum())


def predict(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Arg-max class predictions in eval mode, restoring the previous mode."""
    was_training = model.training
    model.eval()
    preds = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                logits = model(images[start : start + batch_size]).logits
                preds.append(logits.data.argmax(axis=1))
    finally:
        model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, dataset) -> dict[str, float]:
    cm = confusion_matrix(dataset.labels, predict(model, dataset.images), dataset.num_classes)
    return {"accuracy": accuracy(cm), "macro_f1": macro_f1(cm)}


def cam_from_gradients(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Channel weights are the spatial mean of the gradients; the map is
    ``relu(sum_k w_k F_k)`` min-max normalized to [0, 1]."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, features, axes=(0, 0)), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return np.ones_like(cam) if hi > 0 else np.zeros_like(cam)


def grad_cam(model, image: np.ndarray, target_class: int) -> np.ndarray:
    """Heat map over the student's truncated ``g x g`` feature map."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if not 0 <= target_class < model.num_classes:
        raise ContractError(f"target class {target_class} outside [0, {model.num_classes})")
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            feats = model.features(image).data
        leaf = Tensor(feats, requires_grad=True)
        score = model.classify(leaf)[0, target_class]
        score.backward()
    finally:
        model.train(was_training)
    return cam_from_gradients(feats[0], leaf.grad[0])


def write_heatmap_text(cam: np.ndarray, path: str | Path) -> None:
    lines = [" ".join(f"{v:.6f}" for v in row) for row in cam]
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(cam: np.ndarray, path: str | Path, scale: int = 8) -> None:
    """Binary greyscale PGM (P5, maxval 255), each cell blown up to ``scale`` pixels."""
    pixels = np.clip(np.rint(cam * 255.0), 0, 255).astype(np.uint8)
    pixels = np.kron(pixels, np.ones((scale, scale), dtype=np.uint8))
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ContractError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def latency(model, image_shape, warmup_iters: int = 10, timed_iters: int = 50) -> float:
    """Mean wall-clock milliseconds of one eval-mode forward pass, single-threaded."""
    if timed_iters < 1:
        raise ContractError("timed_iters must be >= 1")
    x = np.random.default_rng(0).random((1,) + tuple(image_shape))
    was_training = model.training
    model.eval()
    try:
        with threadpool_limits(limits=1), no_grad():
            for _ in range(warmup_iters):
                model(x)
            start = time.perf_counter()
            for _ in range(timed_iters):
                model(x)
            elapsed = time.perf_counter() - start
    finally:
        model.train(was_training)
    return elapsed / timed_iters * 1e3
