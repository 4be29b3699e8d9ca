"""
Four latent scales, one codebook
================================

Overfit the multi-level autoencoder on a handful of synthetic scenes,
compare per-level and pooled code usage, then cut it down to the
single-level model that produces a 32x32 token grid at 256x256.
"""

import torch

from vqbiart.augvae import AugVaeML, reconstruction_loss, surgery_to_sl
from vqbiart.quantizer import codebook_stats
from vqbiart.synthetic import make_pairs, to_tensor

pairs = make_pairs(8, side=64, seed=0)
x = torch.stack([to_tensor(img) for img, _ in pairs])
print(pairs[0][1])

ml = AugVaeML(channels=16, codebook_size=128, resblocks=1, seed=0)
opt = torch.optim.AdamW(ml.parameters(), lr=1e-3)
for step in range(300):
    out = ml(x)
    loss = reconstruction_loss(x, out.x_hat) + out.commitment_loss
    opt.zero_grad()
    loss.backward()
    opt.step()
    if step % 100 == 0:
        print(f"step {step:4d}  mse {reconstruction_loss(x, out.x_hat).item():.4f}")

# every level draws from the same table
ml.eval()
with torch.no_grad():
    grids = ml.encode_indices(x)
for g in grids:
    print(f"{g.shape[-1]:3d}x{g.shape[-1]:<3d}", codebook_stats(g))
print("pooled ", codebook_stats(torch.cat([g.reshape(-1) for g in grids])))

# surgery keeps the two finest stages and the shared codebook
sl = surgery_to_sl(ml).eval()
with torch.no_grad():
    big = torch.nn.functional.interpolate(x[:1], size=256, mode="nearest")
    print("single-level grid at 256x256:", tuple(sl.encode_indices(big)[0].shape))
