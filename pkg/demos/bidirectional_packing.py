"""
One transformer, two directions
===============================

Tokenize a caption, pack it with an image-token grid in both orders,
and let an untrained desk-size model continue each prefix.
"""

import torch

from vqbiart import biart as B
from vqbiart.harness.cli import format_pack
from vqbiart.tokenizer import decode, encode, train_bpe

captions = [
    "a red circle in the top left on black.",
    "a blue square in the bottom right on white.",
]
vocab = train_bpe(captions, 64)
ids, mask = encode(captions[0], vocab)
text = torch.as_tensor(ids[mask])
print("tokens:", [vocab.tokens[i] for i in text.tolist()])

image = torch.randint(0, 128, (B.IMAGE_LEN,), generator=torch.Generator().manual_seed(0))

# text first: [SOC] text... [PAD]... [SOI] image...
t2i = B.pack_sequence(text, image, "text_to_image")
print("\n".join(format_pack(t2i)[:4] + ["..."] + format_pack(t2i)[65:68]))

# image first: [SOI] image... [SOC] text...
i2t = B.pack_sequence(text, image, "image_to_text")
print("image-to-text starts with", int(i2t.ids[0]), "and switches to GEN at", int((i2t.segments == B.GEN).nonzero()[0]))

model = B.BiartModel(B.BiartConfig.desk(), seed=0).eval()
print("loss of the untrained model:", {k: round(v.item(), 3) for k, v in B.loss(model, t2i).items()})
print("uniform guess:", round(B.uniform_nll(), 3))

prefix, segs = B.generation_prefix("image_to_text", image_ids=image)
out = B.generate(model, prefix, segs, 16, B.text_tokens(vocab.size, vocab.fullstop_id), top_k=8,
                 generator=torch.Generator().manual_seed(1))
print("sampled caption:", repr(decode([t - B.TEXT_OFFSET for t in out[0].tolist() if t != B.PAD], vocab)))
