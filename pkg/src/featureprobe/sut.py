"""System-under-test abstraction and the built-in toy SUTs.

A SUT maps an :class:`~featureprobe.core.ImageTensor` to a
:class:`~featureprobe.core.LogitVector`. ``forward`` is pure: repeated
calls on the same image return identical logits. Input adaptation
(resizing) is SUT-side so one generator can serve multiple SUTs.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageTensor, LogitVector
from .errors import (
    NotDifferentiableError,
    UnsupportedOperationError,
    ValidationError,
)


class TaskKind(enum.Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    DETECTION = "detection"


@dataclass(frozen=True)
class SUTCapabilities:
    differentiable: bool
    task_kind: TaskKind
    num_classes: int
    target_class: int | None = None
    concurrency_safe: bool = True

    def __post_init__(self):
        if self.task_kind is TaskKind.BINARY and self.num_classes != 1:
            raise ValidationError("binary tasks use a single logit (K=1)")
        if self.task_kind is TaskKind.DETECTION and self.target_class is None:
            raise ValidationError("detection tasks must declare a target class")


@dataclass(frozen=True)
class FinetuneConfig:
    """Hyperparameters for head-only fine-tuning."""

    lr: float = 2e-5
    max_epochs: int = 20
    early_stop: bool = True
    patience: int = 3


@dataclass(frozen=True)
class FinetuneLog:
    epochs_run: int
    train_accuracy: float
    monitor_accuracy: float | None


def _check_shape(image: ImageTensor, expected):
    if expected is not None and image.shape != tuple(expected):
        raise ValidationError(
            f"image shape {image.shape} does not match SUT input {expected}"
        )


def resize_image(image: ImageTensor, size) -> ImageTensor:
    """Bilinear resize to (H, W); used by the input-adaptation wrapper."""
    h, w, c = image.shape
    zoom = (size[0] / h, size[1] / w, 1.0)
    data = ndimage.zoom(image.data, zoom, order=1)
    return ImageTensor.from_raw(data[: size[0], : size[1], :], image.colorspace)


class LinearMeanSUT:
    """y = w * mean(pixels) + b, a single-logit toy classifier."""

    def __init__(self, w: float = 3.0, b: float = -1.0, input_shape=None):
        self.w = float(w)
        self.b = float(b)
        self.input_shape = tuple(input_shape) if input_shape else None

    def capabilities(self) -> SUTCapabilities:
        return SUTCapabilities(True, TaskKind.BINARY, 1)

    def forward(self, image: ImageTensor) -> LogitVector:
        _check_shape(image, self.input_shape)
        return LogitVector(np.array([self.w * float(image.data.mean()) + self.b]))

    def grad_input(self, image: ImageTensor, target: int = 0) -> np.ndarray:
        _check_shape(image, self.input_shape)
        return np.full(image.shape, self.w / image.data.size)


class LogisticPixelSUT:
    """Binary logistic head over mean-centered pixels.

    The centering image is a frozen (non-head) parameter; only ``weights``
    and ``bias`` change under :meth:`finetune_head`.
    """

    def __init__(self, weights: np.ndarray, bias: float, mean_image: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.mean_image = np.asarray(mean_image, dtype=np.float64)
        if self.weights.shape != self.mean_image.shape:
            raise ValidationError("weights and centering image shapes differ")

    def capabilities(self) -> SUTCapabilities:
        return SUTCapabilities(True, TaskKind.BINARY, 1)

    @property
    def input_shape(self):
        return self.weights.shape

    def forward(self, image: ImageTensor) -> LogitVector:
        _check_shape(image, self.weights.shape)
        z = float(np.sum(self.weights * (image.data - self.mean_image)) + self.bias)
        return LogitVector(np.array([z]))

    def grad_input(self, image: ImageTensor, target: int = 0) -> np.ndarray:
        _check_shape(image, self.weights.shape)
        return self.weights.copy()

    def frozen_checksum(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.mean_image, dtype="<f8").tobytes()
        ).hexdigest()

    def _logits(self, x: np.ndarray) -> np.ndarray:
        flat = (x - self.mean_image[None]).reshape(x.shape[0], -1)
        return flat @ self.weights.ravel() + self.bias

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        preds = (self._logits(x) > 0.0).astype(int)
        return float(np.mean(preds == y))

    def finetune_head(self, x: np.ndarray, y: np.ndarray,
                      config: FinetuneConfig,
                      monitor: tuple | None = None) -> FinetuneLog:
        """Full-batch gradient descent on the summed binary cross-entropy
        (sum reduction: the step scales with batch size, which is what makes
        very small learning rates effective on small repair sets).

        ``monitor`` is an optional (x, y) set used for early stopping:
        training halts after ``patience`` epochs without improvement and the
        best-seen head is restored.
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 4 or x.shape[0] == 0:
            raise ValidationError("finetune_head needs a non-empty NHWC batch")
        if x.shape[0] != y.shape[0]:
            raise ValidationError("images and labels disagree in length")
        n = x.shape[0]
        flat = (x - self.mean_image[None]).reshape(n, -1)
        w = self.weights.ravel().copy()
        b = self.bias
        best = (w.copy(), b)
        best_score = -math.inf
        stall = 0
        epochs_run = 0
        for _ in range(config.max_epochs):
            z = flat @ w + b
            p = 1.0 / (1.0 + np.exp(-z))
            grad_z = p - y
            w -= config.lr * (flat.T @ grad_z)
            b -= config.lr * float(grad_z.sum())
            epochs_run += 1
            if monitor is not None and config.early_stop:
                score = self._monitor_accuracy(monitor, w, b)
                if score > best_score:
                    best_score = score
                    best = (w.copy(), b)
                    stall = 0
                else:
                    stall += 1
                    if stall >= config.patience:
                        break
        if monitor is not None and config.early_stop:
            w, b = best
        self.weights = w.reshape(self.weights.shape)
        self.bias = b
        monitor_acc = (self._monitor_accuracy(monitor, w, b)
                       if monitor is not None else None)
        return FinetuneLog(
            epochs_run=epochs_run,
            train_accuracy=self.accuracy(x, y.astype(int)),
            monitor_accuracy=monitor_acc,
        )

    def _monitor_accuracy(self, monitor, w, b) -> float:
        mx, my = monitor
        flat = (np.asarray(mx) - self.mean_image[None]).reshape(len(my), -1)
        preds = (flat @ w + b > 0.0).astype(int)
        return float(np.mean(preds == np.asarray(my)))

    def to_npz(self, path):
        np.savez(path, weights=self.weights, bias=np.array([self.bias]),
                 mean_image=self.mean_image)

    @classmethod
    def from_npz(cls, path) -> "LogisticPixelSUT":
        data = np.load(path)
        return cls(data["weights"], float(data["bias"][0]), data["mean_image"])


class SoftmaxLinearSUT:
    """Multiclass toy: logits = W @ pixels + b."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, input_shape):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        if self.weight.shape != (self.bias.size, int(np.prod(input_shape))):
            raise ValidationError("weight shape does not match (K, H*W*C)")

    def capabilities(self) -> SUTCapabilities:
        return SUTCapabilities(True, TaskKind.MULTICLASS, self.bias.size)

    def forward(self, image: ImageTensor) -> LogitVector:
        _check_shape(image, self.input_shape)
        return LogitVector(self.weight @ image.data.ravel() + self.bias)

    def grad_input(self, image: ImageTensor, target: int) -> np.ndarray:
        _check_shape(image, self.input_shape)
        return self.weight[target].reshape(self.input_shape)


def detection_target_score(detections, target_class, floor: float = -10.0) -> float:
    """Scalar logit proxy for a detector: logit of the max target confidence.

    ``detections`` are post-NMS (class, confidence, box) tuples; the box may
    be None. Confidence must lie strictly inside (0, 1).
    """
    best = None
    for det in detections:
        cls, conf = det[0], float(det[1])
        if not (0.0 < conf < 1.0):
            raise ValidationError(f"confidence {conf} outside (0, 1)")
        if cls == target_class and (best is None or conf > best):
            best = conf
    if best is None:
        return float(floor)
    return float(np.log(best / (1.0 - best)))


class DetectionShimSUT:
    """Wraps a black-box detector into the single-logit SUT contract."""

    def __init__(self, detector_fn, target_class, floor: float = -10.0):
        self.detector_fn = detector_fn
        self.target_class = target_class
        self.floor = float(floor)

    def capabilities(self) -> SUTCapabilities:
        return SUTCapabilities(
            differentiable=False,
            task_kind=TaskKind.DETECTION,
            num_classes=1,
            target_class=self.target_class,
        )

    def forward(self, image: ImageTensor) -> LogitVector:
        dets = self.detector_fn(image)
        score = detection_target_score(dets, self.target_class, self.floor)
        return LogitVector(np.array([score]))

    def grad_input(self, image: ImageTensor, target: int = 0):
        raise NotDifferentiableError("detector is a black box")


class CallCountingSUT:
    """Proxy that counts forward invocations (FDA cost accounting)."""

    def __init__(self, inner):
        self.inner = inner
        self.forward_calls = 0

    def capabilities(self):
        return self.inner.capabilities()

    def forward(self, image):
        self.forward_calls += 1
        return self.inner.forward(image)

    def grad_input(self, image, target):
        return self.inner.grad_input(image, target)

    def reset(self):
        self.forward_calls = 0


class ScaledLogitSUT:
    """Proxy multiplying all logits by a positive constant (test helper for
    the argsort-invariance property)."""

    def __init__(self, inner, scale: float):
        if scale <= 0:
            raise ValidationError("scale must be positive")
        self.inner = inner
        self.scale = float(scale)

    def capabilities(self):
        return self.inner.capabilities()

    def forward(self, image):
        lv = self.inner.forward(image)
        return LogitVector(lv.values * self.scale, lv.target_index)

    def grad_input(self, image, target):
        return self.inner.grad_input(image, target) * self.scale


class ResizingSUT:
    """Input-adaptation wrapper: resizes incoming images to the inner SUT."""

    def __init__(self, inner, input_size):
        self.inner = inner
        self.input_size = tuple(input_size)

    def capabilities(self):
        return self.inner.capabilities()

    def forward(self, image):
        return self.inner.forward(resize_image(image, self.input_size))

    def grad_input(self, image, target):
        raise NotDifferentiableError(
            "gradients are not propagated through resizing"
        )


def finetune_supported(sut) -> bool:
    return hasattr(sut, "finetune_head")


def require_finetune(sut):
    if not finetune_supported(sut):
        raise UnsupportedOperationError(
            f"{type(sut).__name__} does not support head fine-tuning"
        )
