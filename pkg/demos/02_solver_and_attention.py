"""
The two few-shot mechanisms on toy tensors
==========================================

Part one fits a small convolution kernel to template features by ridge
regression, both exactly and by a few steps of steepest descent, and shows
how fast the iterative objective approaches the exact one.

Part two runs the scaled attention used for label propagation and checks it
against a plain numpy softmax.
"""

import numpy as np
import torch

from transind.induction import FewShotProblem, apply, solve_closed_form, solve_iterative
from transind.transduction import attention

torch.manual_seed(0)

# Template features (3 images, 6 channels, 8x8) and their 4-channel mask encodings.
feats = torch.randn(3, 6, 8, 8, dtype=torch.float64)
true_kernel = torch.randn(4, 6, 3, 3, dtype=torch.float64)
encs = torch.nn.functional.conv2d(feats, true_kernel, padding=1)
encs = encs + 0.1 * torch.randn_like(encs)

problem = FewShotProblem(feats, encs, lam=0.1, kernel_size=3)
exact = solve_closed_form(problem)
print("exact objective:", round(exact.trace[0], 4))
for steps in (1, 5, 20, 100):
    it = solve_iterative(problem, steps)
    print(f"{steps:3d} steps: {it.trace[-1]:.4f}")

# The kernel recovers the generator up to the noise and the ridge penalty.
err = (exact.weight - true_kernel).norm() / true_kernel.norm()
print(f"relative kernel error: {err:.3f}")

# Applying it to a new target is just a same-padded convolution.
target = torch.randn(1, 6, 8, 8, dtype=torch.float64)
print("target encoding shape:", tuple(apply(exact, target).values.shape))

# -- attention ---------------------------------------------------------------
q, k, v = torch.randn(5, 8), torch.randn(7, 8), torch.randn(7, 4)
wq, wk, wv = torch.eye(8), torch.eye(8), torch.eye(4)
out, w = attention(q, k, v, wq, wk, wv, n_heads=1, tau=0.5, return_weights=True)

logits = q.numpy() @ k.numpy().T * 0.5
ref = np.exp(logits - logits.max(1, keepdims=True))
ref /= ref.sum(1, keepdims=True)
print("max weight difference vs numpy:", np.abs(w[0].numpy() - ref).max())
print("rows sum to one:", np.allclose(w.sum(-1).numpy(), 1))

# A smaller temperature flattens the weights toward uniform.
for tau in (1.0, 1 / 30):
    _, w = attention(q, k, v, wq, wk, wv, tau=tau, return_weights=True)
    print(f"tau={tau:.3f}: mean max weight {w.max(-1).values.mean():.3f}")
