"""Evaluation report: reconstruction quality, codebook diversity, token NLL.

``report.csv`` columns, in order::

    index, image, mse, psnr_db, psnr_capped,
    nll_t2i_ref, nll_t2i_gen, nll_i2t_ref, nll_i2t_gen

PSNR uses a peak-to-peak range of 2 (pixels in [-1, 1]). A perfect
reconstruction has infinite PSNR; the field is then written as the cap
``PSNR_CAP_DB`` with ``psnr_capped = 1``. NLL columns are empty when no
transformer checkpoint is given.

``summary.json`` keys: ``num_images``, ``mean_mse``, ``mean_psnr_db``,
``codebook`` (``d_z``, ``pooled``, ``levels``), ``nll`` (or null).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from .. import biart as B
from ..quantizer import codebook_stats
from ..tokenizer import encode
from .data import ImageBank, Manifest, Preprocessing
from .train import load_model, load_vocab, normalize_caption

PSNR_CAP_DB = 100.0
CSV_COLUMNS = [
    "index",
    "image",
    "mse",
    "psnr_db",
    "psnr_capped",
    "nll_t2i_ref",
    "nll_t2i_gen",
    "nll_i2t_ref",
    "nll_i2t_gen",
]


def psnr_db(mse: float) -> tuple[float, bool]:
    if mse <= 0:
        return PSNR_CAP_DB, True
    value = 10.0 * math.log10(4.0 / mse)
    return (PSNR_CAP_DB, True) if value > PSNR_CAP_DB else (value, False)


@dataclass
class Report:
    rows: list[dict]
    summary: dict

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("" if r.get(k) is None else r[k]) for k in CSV_COLUMNS})
        (out / "summary.json").write_text(json.dumps(self.summary, indent=2, sort_keys=True) + "\n")


def _level_stats(indices: list[torch.Tensor]) -> dict:
    levels = []
    for i, grid in enumerate(indices):
        st = codebook_stats(grid)
        levels.append({"level": i, "side": int(grid.shape[-1]), "usage": st.usage, "perplexity": st.perplexity})
    pooled = codebook_stats(torch.cat([g.reshape(-1) for g in indices]))
    return {"pooled": {"usage": pooled.usage, "perplexity": pooled.perplexity}, "levels": levels}


@torch.no_grad()
def evaluate(
    checkpoint: str | Path,
    manifest: Manifest,
    biart_checkpoint: str | Path | None = None,
    batch_size: int = 8,
) -> Report:
    vae, meta = load_model(checkpoint)
    side = meta["config"]["image_side"]
    manifest.preprocessing = Preprocessing(side, 1.0, meta["config"].get("resample", "lanczos"))
    bank = ImageBank(manifest)
    n = len(bank)

    all_indices: list[list[torch.Tensor]] = []
    rows = []
    for s in range(0, n, batch_size):
        x = bank.plain(list(range(s, min(n, s + batch_size))))
        out = vae(x, update_codebook=False)
        all_indices.append(out.indices)
        per = ((out.x_hat - x) ** 2).flatten(1).mean(1)
        for j, m in enumerate(per.tolist()):
            p, capped = psnr_db(m)
            rows.append(
                {
                    "index": s + j,
                    "image": str(manifest.records[s + j].image_path),
                    "mse": m,
                    "psnr_db": p,
                    "psnr_capped": int(capped),
                }
            )
    levels = [torch.cat([b[lv] for b in all_indices]) for lv in range(len(all_indices[0]))]
    code = _level_stats(levels)
    code["d_z"] = vae.codebook.num_codes

    nll_summary = None
    if biart_checkpoint is not None:
        nll_summary = _nll_columns(biart_checkpoint, vae, levels, manifest, rows)

    summary = {
        "num_images": n,
        "mean_mse": sum(r["mse"] for r in rows) / n,
        "mean_psnr_db": sum(r["psnr_db"] for r in rows) / n,
        "codebook": code,
        "nll": nll_summary,
    }
    return Report(rows, summary)


def _nll_columns(biart_checkpoint, vae, levels, manifest, rows) -> dict:
    model, meta = load_model(biart_checkpoint)
    vocab = load_vocab(meta)
    lower = meta["config"].get("lowercase", True)
    if len(levels) != 1:
        raise ValueError("token NLL needs a single-level autoencoder checkpoint")
    grids = levels[0].reshape(len(rows), -1)
    sums = {k: 0.0 for k in ("nll_t2i_ref", "nll_t2i_gen", "nll_i2t_ref", "nll_i2t_gen")}
    for i, row in enumerate(rows):
        ids, mask = encode(normalize_caption(manifest.records[i].caption, lower), vocab)
        for d, tag in ((B.Direction.TEXT_TO_IMAGE, "t2i"), (B.Direction.IMAGE_TO_TEXT, "i2t")):
            out = B.loss(model, B.pack_sequence(ids[mask], grids[i], d))
            row[f"nll_{tag}_ref"] = out["nll_ref"].item()
            row[f"nll_{tag}_gen"] = out["nll_gen"].item()
            sums[f"nll_{tag}_ref"] += row[f"nll_{tag}_ref"]
            sums[f"nll_{tag}_gen"] += row[f"nll_{tag}_gen"]
    return {k: v / len(rows) for k, v in sums.items()}
