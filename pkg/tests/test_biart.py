import math

import pytest
import torch
import torch.nn.functional as F

from vqbiart import biart as B
from vqbiart.errors import ContractViolation


def rand_pair(g, n_text=None):
    n = int(torch.randint(0, B.TEXT_LEN + 1, (1,), generator=g)) if n_text is None else n_text
    text = torch.randint(0, B.TEXT_VOCAB, (n,), generator=g)
    image = torch.randint(0, B.IMAGE_VOCAB, (B.IMAGE_LEN,), generator=g)
    return text, image


def tiny_model(seed=0, **kw):
    cfg = B.BiartConfig(n_layer=2, n_head=2, n_embd=32, **kw)
    return B.BiartModel(cfg, seed=seed).eval()


def test_token_layout_constants():
    assert (B.PAD, B.SOC, B.SOI, B.VOCAB_SIZE) == (57600, 57601, 57602, 57603)
    assert B.TEXT_OFFSET + B.TEXT_VOCAB == 57600
    assert B.SEQ_LEN == 1090
    t = torch.arange(B.TEXT_VOCAB)
    assert torch.equal(B.global_to_text(B.text_to_global(t)), t)
    assert int(B.text_to_global(t).min()) == 8192 and int(B.text_to_global(t).max()) == 57599


def test_t2i_layout_with_ten_text_tokens():
    g = torch.Generator().manual_seed(0)
    text, image = rand_pair(g, 10)
    p = B.pack_sequence(text, image, "text_to_image")
    assert len(p) == 1090
    assert int(p.ids[0]) == B.SOC
    assert (p.ids[11:65] == B.PAD).all()
    assert int(p.ids[65]) == B.SOI
    assert (p.segments[:65] == B.REF).all() and (p.segments[65:] == B.GEN).all()


def test_i2t_segments():
    g = torch.Generator().manual_seed(1)
    p = B.pack_sequence(*rand_pair(g), "image_to_text")
    assert int(p.ids[0]) == B.SOI and int(p.ids[1025]) == B.SOC
    assert (p.segments[:1025] == B.REF).all() and (p.segments[1025:] == B.GEN).all()


def test_pack_rejects_bad_input():
    g = torch.Generator().manual_seed(2)
    text, image = rand_pair(g, 5)
    with pytest.raises(ContractViolation):
        B.pack_sequence(torch.zeros(65, dtype=torch.long), image, "text_to_image")
    with pytest.raises(ContractViolation):
        B.pack_sequence(text, image[:1000], "text_to_image")
    with pytest.raises(ContractViolation):
        B.pack_sequence(text, image.clone().fill_(8192), "text_to_image")
    with pytest.raises(ContractViolation):
        B.pack_sequence(torch.tensor([B.TEXT_VOCAB]), image, "text_to_image")


@pytest.mark.parametrize("direction", list(B.Direction))
def test_pack_invariants_random(direction):
    g = torch.Generator().manual_seed(3)
    for _ in range(100):
        text, image = rand_pair(g)
        p = B.pack_sequence(text, image, direction)
        targets = p.ids[1:]
        assert not (p.ref_loss_mask & p.gen_loss_mask).any()
        assert torch.equal(p.ref_loss_mask | p.gen_loss_mask, targets != B.PAD)
        t2, i2, d2 = B.unpack_sequence(p)
        assert torch.equal(t2, text) and torch.equal(i2, image) and d2 is direction


def test_forward_shapes_and_finite():
    m = tiny_model()
    g = torch.Generator().manual_seed(4)
    p = B.pack_sequence(*rand_pair(g), "text_to_image")
    logits = m(p.ids[None], p.segments[None])
    assert logits.shape == (1, 1090, B.VOCAB_SIZE)
    assert torch.isfinite(logits).all()


def test_overlength_rejected():
    m = tiny_model()
    ids = torch.zeros(1, 1091, dtype=torch.long)
    with pytest.raises(ContractViolation):
        m(ids, torch.zeros_like(ids))


def test_causality_suffix_perturbation():
    m = tiny_model(seed=1)
    g = torch.Generator().manual_seed(5)
    p = B.pack_sequence(*rand_pair(g), "image_to_text")
    ids = p.ids[None]
    with torch.no_grad():
        ref = m(ids, p.segments[None])
        for t in (0, 17, 500, 1088):
            ids2 = ids.clone()
            ids2[0, t + 1 :] = torch.randint(0, B.VOCAB_SIZE, (1089 - t,), generator=g)
            out = m(ids2, p.segments[None])
            assert torch.equal(out[0, : t + 1], ref[0, : t + 1])


def test_segment_flip_changes_logits():
    m = tiny_model(seed=2)
    g = torch.Generator().manual_seed(6)
    p = B.pack_sequence(*rand_pair(g), "text_to_image")
    with torch.no_grad():
        a = m(p.ids[None], p.segments[None])
        b = m(p.ids[None], 1 - p.segments[None])
    assert (a - b).abs().max() > 0


def test_uniform_logits_give_log_vocab():
    m = tiny_model()
    with torch.no_grad():
        m.head.weight.zero_()
    g = torch.Generator().manual_seed(7)
    out = B.loss(m, B.pack_sequence(*rand_pair(g, 12), "text_to_image"))
    assert math.isclose(out["nll_ref"].item(), math.log(57603), rel_tol=1e-6)
    assert math.isclose(out["nll_gen"].item(), math.log(57603), rel_tol=1e-6)


def test_loss_matches_per_position_recomputation():
    m = tiny_model(seed=3)
    g = torch.Generator().manual_seed(8)
    packs = [B.pack_sequence(*rand_pair(g), d) for d in B.Direction]
    batch = B.collate(packs)
    out = B.loss(m, batch)
    with torch.no_grad():
        logits = m(batch["ids"], batch["segments"])
    ref_terms, gen_terms = [], []
    for b in range(2):
        for t in range(1089):
            target = int(batch["ids"][b, t + 1])
            nll = -float(F.log_softmax(logits[b, t].double(), dim=-1)[target])
            if batch["ref_loss_mask"][b, t]:
                ref_terms.append(nll)
            elif batch["gen_loss_mask"][b, t]:
                gen_terms.append(nll)
            else:
                assert target == B.PAD
    expected = sum(ref_terms) / len(ref_terms) + sum(gen_terms) / len(gen_terms)
    assert abs(out["total"].item() - expected) < 1e-6 * max(1.0, expected)
    n_live = int((batch["ids"][:, 1:] != B.PAD).sum())
    assert len(ref_terms) + len(gen_terms) == n_live


def test_segment_rows_receive_gradient():
    m = tiny_model(seed=4).train()
    g = torch.Generator().manual_seed(9)
    batch = B.collate([B.pack_sequence(*rand_pair(g), d) for d in B.Direction])
    B.loss(m, batch)["total"].backward()
    assert (m.seg_emb.weight.grad.abs().sum(dim=1) > 0).all()


def test_weight_decay_groups_exclude_embeddings():
    m = tiny_model()
    groups = m.param_groups(0.01)
    no_decay = {id(p) for p in groups[1]["params"]}
    assert groups[1]["weight_decay"] == 0.0
    for emb in (m.tok_emb, m.pos_emb, m.seg_emb):
        assert id(emb.weight) in no_decay
    assert sum(len(g["params"]) for g in groups) == len(list(m.parameters()))


def test_generate_greedy_ignores_seed():
    m = tiny_model(seed=5)
    g = torch.Generator().manual_seed(10)
    text, _ = rand_pair(g, 7)
    pi, ps = B.generation_prefix("text_to_image", text_ids=text)
    outs = [
        B.generate(m, pi, ps, 40, B.image_tokens(), top_k=1, generator=torch.Generator().manual_seed(s))
        for s in (0, 1)
    ]
    assert torch.equal(outs[0], outs[1])


def test_generate_respects_range_and_seed():
    m = tiny_model(seed=6)
    g = torch.Generator().manual_seed(11)
    text, _ = rand_pair(g, 7)
    pi, ps = B.generation_prefix("text_to_image", text_ids=text)
    a = B.generate(m, pi.expand(3, -1), ps.expand(3, -1), 50, B.image_tokens(), generator=torch.Generator().manual_seed(0))
    b = B.generate(m, pi.expand(3, -1), ps.expand(3, -1), 50, B.image_tokens(), generator=torch.Generator().manual_seed(0))
    assert torch.equal(a, b)
    assert int(a.min()) >= 0 and int(a.max()) < 8192
    small = B.generate(m, pi, ps, 50, B.image_tokens(16), top_k=8, generator=torch.Generator().manual_seed(1))
    assert int(small.max()) < 16


def test_generate_text_pad_only_after_fullstop():
    m = tiny_model(seed=7)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.weight[B.PAD, :] = 0.0
    # PAD would dominate if it were allowed everywhere
    bias = torch.zeros(B.VOCAB_SIZE)
    bias[B.PAD] = 50.0
    m.head.register_forward_hook(lambda mod, inp, out: out + bias)
    g = torch.Generator().manual_seed(12)
    _, image = rand_pair(g)
    pi, ps = B.generation_prefix("image_to_text", image_ids=image)
    fs = 3
    out = B.generate(m, pi.expand(8, -1), ps.expand(8, -1), 32, B.text_tokens(100, fullstop_id=fs),
                     generator=torch.Generator().manual_seed(0))
    for row in out.tolist():
        seen_fs = False
        for t in row:
            if t == B.PAD:
                assert seen_fs
            else:
                assert 8192 <= t < 8292
            seen_fs |= t == fs + B.TEXT_OFFSET


def test_kv_cache_matches_full_forward():
    m = tiny_model(seed=8)
    g = torch.Generator().manual_seed(13)
    p = B.pack_sequence(*rand_pair(g, 9), "text_to_image")
    ids, segs = p.ids[None, :80], p.segments[None, :80]
    with torch.no_grad():
        full = m(ids, segs)[0, -1]
        h, past = m.hidden(ids[:, :70], segs[:, :70])
        for t in range(70, 80):
            h, past = m.hidden(ids[:, t : t + 1], segs[:, t : t + 1], past=past, start=t)
        step = m.head(h[0, -1])
    assert torch.allclose(full, step, atol=1e-5)


def test_empty_allowed_range():
    with pytest.raises(ContractViolation):
        B.AllowedTokens(5, 5)


def test_chunked_nll_matches_cross_entropy_and_gradcheck():
    g = torch.Generator().manual_seed(14)
    head = torch.nn.Linear(6, 11, bias=False).double()
    h = torch.randn(9, 6, dtype=torch.float64, generator=g, requires_grad=True)
    t = torch.randint(0, 11, (9,), generator=g)
    ref = F.cross_entropy(head(h), t, reduction="none")
    assert torch.allclose(B.token_nll(h, head, t, chunk=4), ref)
    assert torch.autograd.gradcheck(lambda a, w: B._ChunkedNll.apply(a, w, t, 4, False), (h, head.weight))


def test_chunked_nll_low_precision_is_close():
    g = torch.Generator().manual_seed(15)
    head = torch.nn.Linear(32, 500, bias=False)
    torch.nn.init.normal_(head.weight, std=0.1, generator=g)
    h = torch.randn(70, 32, generator=g, requires_grad=True)
    t = torch.randint(0, 500, (70,), generator=g)
    exact = B.token_nll(h, head, t)
    exact.sum().backward()
    g_exact = h.grad.clone()
    h.grad = None
    with torch.autocast("cpu", dtype=torch.bfloat16):
        low = B.token_nll(h, head, t)
    low.sum().backward()
    assert low.dtype == torch.float32
    assert (low - exact).abs().max() < 0.05
    assert (h.grad - g_exact).norm() / g_exact.norm() < 0.02
