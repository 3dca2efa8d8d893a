"""Network primitives and loss primitives on top of `Tensor`.

Shapes follow the single-document convention used across docline: images and
feature maps are `[C, H, W]`, sequences are `[T, d]`, attention runs over
`[heads, T, d_head]`.
"""

import math
import typing as t

import numpy as np

from docline.numkit.tensor import Function, Operand, Tensor, as_tensor

GELU_COEF = math.sqrt(2.0 / math.pi)
MASK_FILL = -1e9


class Softmax(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        shifted = np.exp(x - np.max(x, axis=axis, keepdims=True))
        self.out = shifted / np.sum(shifted, axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        inner = np.sum(grad * self.out, axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


class LogSoftmax(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:  # type: ignore[override]
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
        self.probs = np.exp(out)
        return out

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        return (grad - self.probs * np.sum(grad, axis=self.axis, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:  # type: ignore[override]
        mean = np.mean(x, axis=-1, keepdims=True)
        centered = x - mean
        var = np.mean(centered * centered, axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = centered * self.inv_std
        return self.x_hat * gamma + beta

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        _, gamma, _ = self.parents
        width = self.x_hat.shape[-1]
        g_hat = grad * gamma.data
        grad_x = (self.inv_std / width) * (
            width * g_hat
            - np.sum(g_hat, axis=-1, keepdims=True)
            - self.x_hat * np.sum(g_hat * self.x_hat, axis=-1, keepdims=True)
        )
        lead = tuple(range(grad.ndim - 1))
        grad_gamma = np.sum(grad * self.x_hat, axis=lead)
        grad_beta = np.sum(grad, axis=lead)
        return grad_x, grad_gamma, grad_beta


class Gelu(Function):
    """tanh approximation; smooth everywhere, which keeps finite differences honest."""

    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        inner = GELU_COEF * (x + 0.044715 * x**3)
        self.th = np.tanh(inner)
        return 0.5 * x * (1.0 + self.th)

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        (x,) = self.parents
        xs = x.data
        d_inner = GELU_COEF * (1.0 + 3.0 * 0.044715 * xs * xs)
        local = 0.5 * (1.0 + self.th) + 0.5 * xs * (1.0 - self.th * self.th) * d_inner
        return (grad * local,)


class L2Normalize(Function):
    """Unit rows along the last axis; all-zero rows stay zero."""

    def forward(self, x: np.ndarray) -> np.ndarray:  # type: ignore[override]
        norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        self.safe = np.where(norm > 0.0, norm, 1.0)
        self.live = norm > 0.0
        self.out = np.where(self.live, x / self.safe, 0.0)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        radial = np.sum(grad * self.out, axis=-1, keepdims=True)
        return (np.where(self.live, (grad - self.out * radial) / self.safe, 0.0),)


def _conv_taps(stride: int, count: int, offset: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


class Conv2d(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
    ) -> np.ndarray:
        channels, height, width = x.shape
        out_channels, in_channels, kernel, _ = weight.shape
        if in_channels != channels:
            raise ValueError(f"conv2d weight expects {in_channels} channels, input has {channels}")
        self.stride, self.padding, self.kernel = stride, padding, kernel
        self.x_padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        self.out_h = (height + 2 * padding - kernel) // stride + 1
        self.out_w = (width + 2 * padding - kernel) // stride + 1
        out = np.zeros((out_channels, self.out_h, self.out_w))
        for a in range(kernel):
            rows = _conv_taps(stride, self.out_h, a)
            for b in range(kernel):
                cols = _conv_taps(stride, self.out_w, b)
                out += np.tensordot(weight[:, :, a, b], self.x_padded[:, rows, cols], axes=(1, 0))
        return out + bias[:, None, None]

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, weight, _ = self.parents
        grad_padded = np.zeros_like(self.x_padded)
        grad_weight = np.zeros(weight.shape)
        for a in range(self.kernel):
            rows = _conv_taps(self.stride, self.out_h, a)
            for b in range(self.kernel):
                cols = _conv_taps(self.stride, self.out_w, b)
                patch = self.x_padded[:, rows, cols]
                grad_weight[:, :, a, b] = np.tensordot(grad, patch, axes=([1, 2], [1, 2]))
                grad_padded[:, rows, cols] += np.tensordot(weight.data[:, :, a, b], grad, axes=(0, 0))
        p = self.padding
        grad_x = grad_padded[:, p : p + x.shape[1], p : p + x.shape[2]]
        return grad_x, grad_weight, np.sum(grad, axis=(1, 2))


class ConvTranspose2d(Function):
    def forward(  # type: ignore[override]
        self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
    ) -> np.ndarray:
        channels, height, width = x.shape
        in_channels, out_channels, kernel, _ = weight.shape
        if in_channels != channels:
            raise ValueError(f"conv_transpose2d weight expects {in_channels} channels, input has {channels}")
        self.stride, self.padding, self.kernel = stride, padding, kernel
        full = np.zeros((out_channels, (height - 1) * stride + kernel, (width - 1) * stride + kernel))
        for a in range(kernel):
            rows = _conv_taps(stride, height, a)
            for b in range(kernel):
                cols = _conv_taps(stride, width, b)
                full[:, rows, cols] += np.tensordot(weight[:, :, a, b], x, axes=(0, 0))
        self.full_shape = full.shape
        self.out_h = full.shape[1] - 2 * padding
        self.out_w = full.shape[2] - 2 * padding
        out = full[:, padding : padding + self.out_h, padding : padding + self.out_w]
        return out + bias[:, None, None]

    def backward(self, grad: np.ndarray) -> tuple[t.Optional[np.ndarray], ...]:
        x, weight, _ = self.parents
        p = self.padding
        grad_full = np.zeros(self.full_shape)
        grad_full[:, p : p + self.out_h, p : p + self.out_w] = grad
        grad_x = np.zeros(x.shape)
        grad_weight = np.zeros(weight.shape)
        for a in range(self.kernel):
            rows = _conv_taps(self.stride, x.shape[1], a)
            for b in range(self.kernel):
                cols = _conv_taps(self.stride, x.shape[2], b)
                view = grad_full[:, rows, cols]
                grad_x += np.tensordot(weight.data[:, :, a, b], view, axes=(1, 0))
                grad_weight[:, :, a, b] = np.tensordot(x.data, view, axes=([1, 2], [1, 2]))
        return grad_x, grad_weight, np.sum(grad, axis=(1, 2))


def softmax(x: Operand, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x: Operand, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def layer_norm(x: Operand, gamma: Operand, beta: Operand, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Operand) -> Tensor:
    return Gelu.apply(x)


def l2_normalize(x: Operand) -> Tensor:
    return L2Normalize.apply(x)


def linear(x: Operand, weight: Operand, bias: t.Optional[Operand] = None) -> Tensor:
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding id out of range [0, {rows}): min={ids.min()} max={ids.max()}")
    return table[ids]


def conv2d(x: Operand, weight: Operand, bias: Operand, stride: int = 2, padding: int = 1) -> Tensor:
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x: Operand, weight: Operand, bias: Operand, stride: int = 2, padding: int = 0) -> Tensor:
    return ConvTranspose2d.apply(x, weight, bias, stride=stride, padding=padding)


def pooling_matrix(size: int, out: int) -> np.ndarray:
    """Row i averages the window [floor(i*size/out), floor((i+1)*size/out))."""
    matrix = np.zeros((out, size))
    for i in range(out):
        start, stop = (i * size) // out, ((i + 1) * size) // out
        matrix[i, start:stop] = 1.0 / (stop - start)
    return matrix


def adaptive_avg_pool(feature_map: Operand, out: tuple[int, int] = (7, 7)) -> Tensor:
    x = as_tensor(feature_map)
    _, height, width = x.shape
    if height < out[0] or width < out[1]:
        raise ValueError(f"adaptive_avg_pool needs at least {out} spatial cells, got {(height, width)}")
    rows = Tensor(pooling_matrix(height, out[0]))
    cols = Tensor(pooling_matrix(width, out[1]).T)
    return (rows @ x) @ cols


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, bias: t.Optional[Operand] = None
) -> Tensor:
    """softmax(q k^T / sqrt(d) + bias) v over `[heads, T, d_head]` operands."""
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return softmax(scores, axis=-1) @ v


def _checked_labels(labels: np.ndarray, rows: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (rows,):
        raise ValueError(f"expected {rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes}): min={labels.min()} max={labels.max()}")
    return labels


def cross_entropy_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    rows, classes = logits.shape
    labels = _checked_labels(labels, rows, classes)
    picked = log_softmax(logits, axis=-1)[np.arange(rows), labels]
    return -picked.sum()


def cross_entropy_mean(
    logits: Tensor, labels: np.ndarray, ignore_mask: t.Optional[np.ndarray] = None
) -> Tensor:
    rows, classes = logits.shape
    keep = np.ones(rows, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    if not keep.any():
        raise ValueError("cross_entropy_mean: every row is ignored")
    labels = _checked_labels(labels, rows, classes)
    kept = np.flatnonzero(keep)
    picked = log_softmax(logits, axis=-1)[kept, labels[kept]]
    return -picked.sum() * (1.0 / kept.size)


def l1_masked_mean(pred: Tensor, target: Operand, mask: np.ndarray) -> Tensor:
    target = as_tensor(target)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"l1_masked_mean shape mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("l1_masked_mean: empty mask")
    return ((pred - target).abs() * mask.astype(np.float64)).sum() * (1.0 / count)
