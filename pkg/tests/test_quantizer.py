import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vqbiart.errors import ContractViolation
from vqbiart.quantizer import Codebook, codebook_stats, ema_update, nearest_codes, quantize


def brute_force_nearest(z: np.ndarray, entries: np.ndarray) -> list[int]:
    out = []
    for row in z:
        best, best_d = 0, math.inf
        for j, e in enumerate(entries):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(row, e))
            if d < best_d:
                best, best_d = j, d
        out.append(best)
    return out


def make_cb(n=16, d=8, seed=0, **kw):
    return Codebook(n, d, generator=torch.Generator().manual_seed(seed), **kw)


def test_exact_match_row():
    cb = make_cb(32, 8)
    assert nearest_codes(cb.entries[5:6].clone(), cb).tolist() == [5]


def test_obvious_nearest():
    cb = make_cb(2, 2)
    cb.entries.copy_(torch.tensor([[0.0, 0.0], [10.0, 10.0]]))
    assert nearest_codes(torch.tensor([[1.0, 1.0]]), cb).tolist() == [0]


def test_ties_go_to_lowest_index():
    cb = make_cb(4, 2)
    cb.entries.copy_(torch.tensor([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]))
    assert nearest_codes(torch.zeros(1, 2), cb).tolist() == [1]


def test_matches_brute_force_100_rows():
    cb = make_cb(32, 8, seed=3)
    z = torch.randn(100, 8, generator=torch.Generator().manual_seed(4))
    expected = brute_force_nearest(z.numpy(), cb.entries.numpy())
    assert nearest_codes(z, cb).tolist() == expected


@settings(max_examples=30, deadline=None)
@given(
    n_codes=st.integers(1, 64),
    dim=st.integers(1, 6),
    m=st.integers(1, 40),
    seed=st.integers(0, 2**31 - 1),
)
def test_nearest_codes_property(n_codes, dim, m, seed):
    g = torch.Generator().manual_seed(seed)
    cb = make_cb(n_codes, dim, seed=seed)
    z = torch.randn(m, dim, generator=g)
    assert nearest_codes(z, cb).tolist() == brute_force_nearest(z.numpy(), cb.entries.numpy())


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        nearest_codes(torch.zeros(3, 5), make_cb(4, 8))
    with pytest.raises(ContractViolation):
        quantize(torch.zeros(3, 5), make_cb(4, 8))


def test_quantize_identity_on_code_rows():
    cb = make_cb(16, 8)
    z = cb.entries[[3, 1, 4, 1, 5]].clone().reshape(5, 1, 8)
    res = quantize(z, cb)
    assert torch.equal(res.quantized, z)
    assert res.indices.tolist() == [[3], [1], [4], [1], [5]]
    assert float(res.commitment_loss) == 0.0


def test_quantized_rows_are_codebook_rows_bitwise():
    cb = make_cb(16, 8)
    z = torch.randn(2, 4, 4, 8, generator=torch.Generator().manual_seed(1), requires_grad=True)
    res = quantize(z, cb)
    assert torch.equal(res.quantized.detach(), cb.entries[res.indices])


def test_straight_through_gradient_is_all_ones():
    cb = make_cb(16, 8)
    z = torch.randn(4, 4, 8, requires_grad=True)
    quantize(z, cb).quantized.sum().backward()
    assert torch.equal(z.grad, torch.ones_like(z))


def test_straight_through_matches_grad_at_quantized():
    cb = make_cb(16, 8)
    z = torch.randn(3, 8, requires_grad=True)
    w = torch.randn(3, 8)
    q = quantize(z, cb).quantized
    q.retain_grad()
    (torch.sin(q) * w).sum().backward()
    assert torch.equal(z.grad, q.grad)


def test_commitment_gradient_matches_finite_differences():
    cb = make_cb(16, 8, seed=2).double()
    z0 = torch.randn(4, 4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    z = z0.clone().requires_grad_(True)
    quantize(z, cb, beta=0.25).commitment_loss.backward()
    idx = quantize(z0, cb).indices
    q = cb.entries[idx]

    def f(v):
        # quantized target held fixed, as the stop-gradient prescribes
        return 0.25 * float(torch.mean((v - q) ** 2))

    h = 1e-6
    fd = torch.zeros_like(z0)
    flat, fdf = z0.reshape(-1), fd.reshape(-1)
    for i in range(flat.numel()):
        p, m = flat.clone(), flat.clone()
        p[i] += h
        m[i] -= h
        fdf[i] = (f(p.reshape(z0.shape)) - f(m.reshape(z0.shape))) / (2 * h)
    rel = (z.grad - fd).norm() / fd.norm()
    assert rel < 1e-4


def test_ema_decay_zero_jumps_to_point():
    cb = make_cb(8, 4, decay=0.0)
    p = torch.tensor([0.5, -1.0, 2.0, 0.25])
    ema_update(cb, p.repeat(64, 1), torch.full((64,), 3))
    assert torch.allclose(cb.entries[3], p, rtol=1e-3)


def test_ema_mass_conservation():
    cb = make_cb(16, 4, decay=0.9)
    old = float(cb.ema_cluster_size.sum())
    idx = torch.randint(0, 16, (37,))
    ema_update(cb, torch.randn(37, 4), idx)
    assert math.isclose(float(cb.ema_cluster_size.sum()), 0.9 * old + 0.1 * 37, rel_tol=1e-6)


def test_ema_invariants_hold_after_update():
    cb = make_cb(16, 4)
    for _ in range(5):
        z = torch.randn(50, 4)
        ema_update(cb, z, nearest_codes(z, cb))
    assert (cb.ema_cluster_size >= 0).all()
    assert torch.isfinite(cb.entries).all()
    n = cb.ema_cluster_size.sum()
    smoothed = n * (cb.ema_cluster_size + cb.eps) / (n + cb.num_codes * cb.eps)
    assert torch.allclose(cb.entries, cb.ema_embed_sum / smoothed[:, None])


def test_ema_converges_to_cluster_means():
    g = torch.Generator().manual_seed(0)
    cb = make_cb(2, 3, decay=0.99)
    means = torch.tensor([[1.0, 2.0, -1.0], [-3.0, 0.5, 0.0]])
    idx = torch.tensor([0] * 50 + [1] * 50)
    for _ in range(500):
        z = means[idx] + 0.1 * torch.randn(100, 3, generator=g)
        ema_update(cb, z, idx)
    assert (cb.entries - means).abs().max() < 1e-2


def test_ema_rejects_out_of_range():
    cb = make_cb(4, 2)
    with pytest.raises(ContractViolation):
        ema_update(cb, torch.zeros(2, 2), torch.tensor([0, 4]))


def test_dead_code_restart():
    cb = make_cb(8, 2, restart_after=2)
    z = torch.full((10, 2), 7.0)
    for _ in range(2):
        ema_update(cb, z, torch.zeros(10, dtype=torch.long), generator=torch.Generator().manual_seed(0))
    # every code except 0 went unused twice and was moved onto a batch vector
    assert torch.allclose(cb.entries[1:], torch.full((7, 2), 7.0), rtol=1e-4)


def test_update_through_one_level_moves_another_levels_codes():
    from vqbiart.augvae import AugVaeML, quantize_levels

    m = AugVaeML(channels=8, codebook_size=16, resblocks=1, seed=1)
    lat = m.encode(torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(2)))
    _, before, _ = quantize_levels(lat, m.codebook)
    v = lat[3][0, :, 0, 0].detach()
    c = (int(before[3][0, 0, 0]) + 1) % 16
    # an update issued for level-0 vectors assigned to code c, placed at a level-3 vector
    m.codebook.decay = 0.0
    ema_update(m.codebook, v.repeat(4, 1), torch.full((4,), c))
    _, after, _ = quantize_levels(lat, m.codebook)
    assert int(after[3][0, 0, 0]) == c


def test_codebook_stats_examples():
    s = codebook_stats(torch.full((10,), 4))
    assert (s.usage, s.perplexity) == (1, 1.0)
    s = codebook_stats(torch.arange(8).repeat(3))
    assert s.usage == 8 and math.isclose(s.perplexity, 8.0, rel_tol=1e-12)
    s = codebook_stats(torch.tensor([0, 0, 0, 1]))
    expected = math.exp(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    assert math.isclose(s.perplexity, expected, rel_tol=1e-12)
    assert round(s.perplexity, 4) == 1.7548
    with pytest.raises(ContractViolation):
        codebook_stats(torch.tensor([], dtype=torch.long))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=200))
def test_perplexity_bounds(values):
    s = codebook_stats(torch.tensor(values))
    assert 1.0 - 1e-9 <= s.perplexity <= s.usage + 1e-9
