"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately written as plain pixel loops or fixed-point
iterations, sharing no code with the library paths it checks.
"""

import numpy as np
import torch


def bilinear_resize_loop(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear interpolation, one pixel at a time."""
    in_h, in_w = arr.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            sr = (i + 0.5) * in_h / out_h - 0.5
            sc = (j + 0.5) * in_w / out_w - 0.5
            r0 = min(max(int(np.floor(sr)), 0), in_h - 1)
            c0 = min(max(int(np.floor(sc)), 0), in_w - 1)
            r1 = min(r0 + 1, in_h - 1)
            c1 = min(c0 + 1, in_w - 1)
            fr = min(max(sr - r0, 0.0), 1.0)
            fc = min(max(sc - c0, 0.0), 1.0)
            out[i, j] = (
                arr[r0, c0] * (1 - fr) * (1 - fc)
                + arr[r1, c0] * fr * (1 - fc)
                + arr[r0, c1] * (1 - fr) * fc
                + arr[r1, c1] * fr * fc
            )
    return out


def convolve_reflect_loop(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Direct convolution with numpy-'reflect' padding via explicit loops."""
    half = kernel.shape[0] // 2
    padded = np.pad(arr.astype(np.float64), half, mode="reflect")
    out = np.zeros_like(arr, dtype=np.float64)
    kh, kw = kernel.shape
    for i in range(arr.shape[0]):
        for j in range(arr.shape[1]):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += padded[i + a, j + b] * kernel[kh - 1 - a, kw - 1 - b]
            out[i, j] = acc
    return out


def reconstruct_by_erosion_fixed_point(marker: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Iterated 8-connected geodesic erosion of marker above mask, to stability."""
    current = marker.astype(np.float64).copy()
    mask = mask.astype(np.float64)
    h, w = current.shape
    while True:
        padded = np.pad(current, 1, mode="constant", constant_values=np.inf)
        eroded = np.empty_like(current)
        for i in range(h):
            for j in range(w):
                eroded[i, j] = padded[i : i + 3, j : j + 3].min()
        nxt = np.maximum(eroded, mask)
        if np.array_equal(nxt, current):
            return current
        current = nxt


def surrounding_l1_loop(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    total, count = 0.0, 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if not mask[i, j]:
                total += abs(float(a[i, j]) - float(b[i, j]))
                count += 1
    return total / count


def cycle_l1_loop(a: np.ndarray, b: np.ndarray) -> float:
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            total += abs(float(a[i, j]) - float(b[i, j]))
    return total / a.size


def mse_loop(scores: np.ndarray, target: float) -> float:
    total = 0.0
    flat = scores.ravel()
    for v in flat:
        total += (float(v) - target) ** 2
    return total / flat.size


def dice_loop(pred: np.ndarray, gt: np.ndarray) -> float:
    inter = 0
    p_count = 0
    t_count = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = bool(pred[i, j])
            t = bool(gt[i, j])
            inter += p and t
            p_count += p
            t_count += t
    if p_count + t_count == 0:
        return 1.0
    return 2.0 * inter / (p_count + t_count)


def bce_loop(probs: np.ndarray, target: np.ndarray, eps: float = 1e-7) -> float:
    total = 0.0
    for i in range(probs.shape[0]):
        for j in range(probs.shape[1]):
            p = min(max(float(probs[i, j]), eps), 1 - eps)
            t = float(target[i, j])
            total += -(t * np.log(p) + (1 - t) * np.log(1 - p))
    return total / probs.size


def finite_difference_gradient(fn, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array, in float64."""
    grad = np.zeros_like(x0, dtype=np.float64)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return grad


def autograd_gradient(loss_fn, x0: np.ndarray) -> np.ndarray:
    """Analytic gradient of a torch scalar loss w.r.t. a float64 input array."""
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    loss = loss_fn(x)
    loss.backward()
    return x.grad.numpy()


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
