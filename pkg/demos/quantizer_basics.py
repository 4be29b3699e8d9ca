"""
Quantizing vectors against a shared codebook
============================================

Build a small codebook, snap random vectors to their nearest entries,
and watch the EMA update pull codes toward the data.
"""

import torch

from vqbiart.quantizer import Codebook, codebook_stats, ema_update, quantize

torch.manual_seed(0)

# a 32-entry codebook of 4-d vectors
cb = Codebook(32, 4, generator=torch.Generator().manual_seed(0))

# two tight clusters of data
centers = torch.tensor([[2.0, 0.0, 0.0, 0.0], [-2.0, 1.0, 0.0, 0.0]])
labels = torch.randint(0, 2, (256,))
z = centers[labels] + 0.1 * torch.randn(256, 4)

res = quantize(z, cb)
print("commitment loss before:", float(res.commitment_loss))
print("codes in use:", codebook_stats(res.indices))

# EMA steps: each assigned code moves toward the mean of its members
for _ in range(50):
    res = quantize(z, cb)
    ema_update(cb, z, res.indices)

res = quantize(z, cb)
print("commitment loss after: ", float(res.commitment_loss))
print("codes in use:", codebook_stats(res.indices))

# the quantized output is made of codebook rows, but gradients pass straight through
z.requires_grad_(True)
quantize(z, cb).quantized.sum().backward()
print("gradient is all ones:", bool((z.grad == 1).all()))
