"""Differentiable few-shot learner: a ridge-regressed convolution kernel.

The kernel ``w`` (``D x C x k x k``) minimizes

    sum_i || conv(F_i, w) - E_i ||^2 + lam * ||w||^2

over the template features ``F_i`` and their mask encodings ``E_i``. Writing
the convolution as a product with the unfolded design matrix ``A`` (one row
per template pixel, ``C * k * k`` columns) turns this into ordinary ridge
regression with ``D`` right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .maskenc import MaskEncoding


@dataclass
class FewShotProblem:
    features: torch.Tensor  # N x C x h x w
    encodings: torch.Tensor  # N x D x h x w
    lam: float | torch.Tensor = 1e-2
    kernel_size: int = 3

    def __post_init__(self):
        if self.features.shape[0] != self.encodings.shape[0] or \
                self.features.shape[-2:] != self.encodings.shape[-2:]:
            raise ValueError(f"features {tuple(self.features.shape)} and encodings "
                             f"{tuple(self.encodings.shape)} are not aligned")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if float(torch.as_tensor(self.lam).detach()) < 0:
            raise ValueError("lam must be non-negative")

    @property
    def in_channels(self) -> int:
        return self.features.shape[1]

    @property
    def out_channels(self) -> int:
        return self.encodings.shape[1]


@dataclass
class LearnedKernel:
    weight: torch.Tensor  # D x C x k x k
    trace: list[float] = field(default_factory=list)
    loss: torch.Tensor | None = None  # objective at the returned kernel
    data_term: torch.Tensor | None = None
    rank_deficient: bool = False


def design_matrix(features: torch.Tensor, kernel_size: int) -> torch.Tensor:
    n, c, h, w = features.shape
    cols = F.unfold(features, kernel_size, padding=kernel_size // 2)  # n x C*k*k x h*w
    return cols.transpose(1, 2).reshape(n * h * w, c * kernel_size ** 2)


def response_matrix(encodings: torch.Tensor) -> torch.Tensor:
    n, d, h, w = encodings.shape
    return encodings.permute(0, 2, 3, 1).reshape(n * h * w, d)


def _to_kernel(w: torch.Tensor, c: int, k: int) -> torch.Tensor:
    return w.T.reshape(w.shape[1], c, k, k)


def _objective(a, b, w, lam):
    data = ((a @ w - b) ** 2).sum()
    return data + lam * (w ** 2).sum(), data


def solve_closed_form(problem: FewShotProblem) -> LearnedKernel:
    """Exact minimizer via the regularized normal equations.

    With ``lam == 0`` and a singular Gram matrix the least-norm solution is
    returned and ``rank_deficient`` is set.
    """
    a = design_matrix(problem.features, problem.kernel_size)
    b = response_matrix(problem.encodings)
    lam = torch.as_tensor(problem.lam, dtype=a.dtype)
    gram = a.T @ a
    rank_deficient = False
    if float(lam) == 0.0:
        rank_deficient = int(torch.linalg.matrix_rank(gram)) < gram.shape[0]
    if rank_deficient:
        w = torch.linalg.pinv(a) @ b
    else:
        eye = torch.eye(gram.shape[0], dtype=a.dtype)
        w = torch.linalg.solve(gram + lam * eye, a.T @ b)
    loss, data = _objective(a, b, w, lam)
    return LearnedKernel(_to_kernel(w, problem.in_channels, problem.kernel_size),
                         [float(loss)], loss, data, rank_deficient)


def solve_iterative(problem: FewShotProblem, steps: int = 5) -> LearnedKernel:
    """Steepest descent from zero with exact line search, fully differentiable.

    For the quadratic objective the optimal step along ``-g`` is
    ``|g|^2 / (2 (|A g|^2 + lam |g|^2))``. Every iterate stays in the autograd
    graph, so gradients reach the features, the encodings and ``lam``.
    ``trace[0]`` is the objective at zero, ``trace[i]`` after step ``i``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    a = design_matrix(problem.features, problem.kernel_size)
    b = response_matrix(problem.encodings)
    lam = problem.lam if torch.is_tensor(problem.lam) else torch.tensor(problem.lam, dtype=a.dtype)
    w = a.new_zeros(a.shape[1], b.shape[1])
    loss, data = _objective(a, b, w, lam)
    trace = [float(loss.detach())]
    for _ in range(steps):
        grad = 2.0 * (a.T @ (a @ w - b) + lam * w)
        g_sq = (grad ** 2).sum()
        if float(g_sq.detach()) == 0.0:
            break
        curvature = ((a @ grad) ** 2).sum() + lam * g_sq
        alpha = g_sq / (2.0 * curvature.clamp_min(torch.finfo(a.dtype).tiny))
        w = w - alpha * grad
        loss, data = _objective(a, b, w, lam)
        trace.append(float(loss.detach()))
    return LearnedKernel(_to_kernel(w, problem.in_channels, problem.kernel_size),
                         trace, loss, data)


def apply(kernel: LearnedKernel | torch.Tensor, features: torch.Tensor) -> MaskEncoding:
    """Same-padded convolution of ``B x C x h x w`` features with the learned kernel."""
    weight = kernel.weight if isinstance(kernel, LearnedKernel) else kernel
    if features.shape[1] != weight.shape[1]:
        raise ValueError(f"kernel expects {weight.shape[1]} channels, features have "
                         f"{features.shape[1]}")
    return MaskEncoding(F.conv2d(features, weight, padding=weight.shape[-1] // 2), "ind")
