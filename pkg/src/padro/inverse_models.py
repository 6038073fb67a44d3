"""Forward operators, the Laplacian-Tikhonov baseline and image metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg, sparse
from scipy.ndimage import correlate1d
from scipy.signal import correlate2d

from .core import DimensionError, Reconstructor


# ---------------------------------------------------------------------------
# Forward operators
# ---------------------------------------------------------------------------

class DenseOperator:
    """Forward map given by an explicit ``m x n`` matrix."""

    kind = "dense"

    def __init__(self, matrix):
        m = np.array(matrix, dtype=float, ndmin=2)
        if m.ndim != 2:
            raise DimensionError("forward operator must be a matrix")
        m.setflags(write=False)
        self._matrix = m

    @property
    def shape(self):
        return self._matrix.shape

    def matrix(self) -> np.ndarray:
        return self._matrix

    def __call__(self, x):
        return apply_forward(self, x)

    def _apply(self, x):
        return x @ self._matrix.T


class ConvolutionOperator:
    """Valid-mode 2-D correlation of a ``side x side`` image with a small kernel.

    Inputs are flattened row-major; outputs have side ``side - k + 1``.
    """

    kind = "convolution"

    def __init__(self, kernel, side: int = 28):
        kernel = np.asarray(kernel, dtype=float)
        if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
            raise ValueError("kernel must be square")
        if side < kernel.shape[0]:
            raise ValueError("image smaller than kernel")
        kernel.setflags(write=False)
        self.kernel = kernel
        self.side = side
        self.out_side = side - kernel.shape[0] + 1
        self._matrix = None

    @property
    def shape(self):
        return self.out_side ** 2, self.side ** 2

    def matrix(self) -> np.ndarray:
        """Dense matrix whose action equals the correlation."""
        if self._matrix is None:
            k = self.kernel.shape[0]
            M = np.zeros(self.shape)
            rows = np.arange(self.out_side)
            for r in rows:
                for c in rows:
                    out = r * self.out_side + c
                    for i in range(k):
                        start = (r + i) * self.side + c
                        M[out, start:start + k] = self.kernel[i]
            M.setflags(write=False)
            self._matrix = M
        return self._matrix

    def __call__(self, x):
        return apply_forward(self, x)

    def _apply(self, x):
        lead = x.shape[:-1]
        imgs = x.reshape(-1, self.side, self.side)
        out = np.stack([correlate2d(im, self.kernel, mode="valid") for im in imgs])
        return out.reshape(*lead, self.out_side ** 2)


def as_operator(H):
    if isinstance(H, (DenseOperator, ConvolutionOperator)):
        return H
    return DenseOperator(H)


def apply_forward(H, x) -> np.ndarray:
    """Noiseless measurement ``H x`` for a vector or a stack of vectors."""
    op = as_operator(H)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != op.shape[1]:
        raise DimensionError(f"x has dimension {x.shape[-1]}, operator expects {op.shape[1]}")
    return op._apply(x)


def gaussian_kernel_3x3(bandwidth: float) -> np.ndarray:
    """Normalized samples of ``exp(-(i^2 + j^2) / (2 b^2))`` on ``{-1, 0, 1}^2``."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    off = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(off[:, None] ** 2 + off[None, :] ** 2) / (2.0 * bandwidth ** 2))
    return k / k.sum()


# ---------------------------------------------------------------------------
# Tikhonov baseline
# ---------------------------------------------------------------------------

def laplacian_neumann(side: int = 28) -> np.ndarray:
    """Five-point Laplacian on a ``side x side`` grid with reflecting boundaries."""
    main = np.full(side, -2.0)
    main[[0, -1]] = -1.0
    D = sparse.diags([np.ones(side - 1), main, np.ones(side - 1)], [-1, 0, 1])
    eye = sparse.identity(side)
    return (sparse.kron(eye, D) + sparse.kron(D, eye)).toarray()


@dataclass(frozen=True)
class TikhonovInverse:
    lambda_reg: float
    reconstructor: Reconstructor


def _operator_matrix(H) -> np.ndarray:
    return as_operator(H).matrix()


def tikhonov_inverse(H, L, lambda_reg: float) -> Reconstructor:
    """``g = (H^T H + lambda L^T L)^{-1} H^T`` as an explicit matrix."""
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be nonnegative")
    Hm = _operator_matrix(H)
    L = np.asarray(L, dtype=float)
    A = Hm.T @ Hm + lambda_reg * (L.T @ L)
    try:
        c = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"H^T H + {lambda_reg:g} L^T L is not positive definite") from exc
    return Reconstructor(linalg.cho_solve(c, Hm.T))


@dataclass
class TikhonovFit:
    lambda_reg: float
    mse: float
    boundary: str | None
    history: list


def fit_tikhonov_lambda(H, L, clean, noisy, interval=(1e-6, 1e2), tol: float = 0.05,
                        max_iters: int = 40, objective: Callable | None = None) -> TikhonovFit:
    """Pick the regularization weight minimizing the average reconstruction MSE.

    The search runs on ``log10(lambda)`` with the same three-point rule as
    the multiplier search. ``clean`` are ground-truth signals (rows) and
    ``noisy`` the matching measurements. ``objective`` replaces the MSE
    (a map ``lambda -> value``) for testing.
    """
    from .optimizer import trisection_search

    lo, hi = interval
    if not 0 < lo < hi:
        raise ValueError("need 0 < lower < upper for the regularization interval")
    if objective is None:
        clean = np.asarray(clean, dtype=float)
        noisy = np.asarray(noisy, dtype=float)
        if len(clean) == 0:
            raise ValueError("empty dataset")

        def objective(lam):
            g = tikhonov_inverse(H, L, lam)
            return mse(g(noisy), clean)

    res = trisection_search(lambda t: objective(10.0 ** t), math.log10(lo), math.log10(hi),
                            tol, max_iters)
    history = [(10.0 ** t, v) for t, v in res.history]
    return TikhonovFit(10.0 ** res.x, res.value, res.boundary, history)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    off = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-off ** 2 / (2.0 * sigma ** 2))
    return w / w.sum()


def _filter_valid(img, w):
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=-1, mode="constant"), w, axis=-2, mode="constant")
    return out[..., half:img.shape[-2] - half, half:img.shape[-1] - half]


def ssim(a, b, win_size: int = 7, sigma: float = 1.5, data_range: float = 1.0,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully contained Gaussian windows.

    Local statistics use a separable Gaussian window; variances are the
    biased (window-weighted) moments. A stack of images returns the mean
    over the stack.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim < 2 or min(a.shape[-2:]) < win_size:
        raise DimensionError("images must be 2-D and at least as large as the window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    w = _gaussian_window(win_size, sigma)
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a ** 2
    var_b = _filter_valid(b * b, w) - mu_b ** 2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
