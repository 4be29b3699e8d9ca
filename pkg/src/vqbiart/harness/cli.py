"""Command-line entry point: ``vqbiart <command> [--config FILE] [--seed N] [--out DIR] ...``.

Every key of :class:`TrainConfig` can be overridden with ``--key-name VALUE``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import importlib
import json
import logging
import sys
from pathlib import Path

import torch

from .. import biart as B
from ..quantizer import codebook_stats
from ..sampler import ConstantScorer, sample_caption, sample_images
from ..tokenizer import encode
from .config import TrainConfig, load_config, make_config
from .container import IndexGrid, load_grids, save_grids
from .data import Preprocessing, load_image, load_manifest, pil_to_tensor, tensor_to_pil
from .evaluate import evaluate
from .train import load_model, load_vocab, normalize_caption, train

log = logging.getLogger("vqbiart")

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[s.lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--profile", choices=("full", "desk"), default="full")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        kind = {bool: _parse_bool, int: int, float: float, str: str}[type(f.default)]
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}", type=kind, default=None)


def _config(args, stage: str | None = None) -> TrainConfig:
    overrides = {
        k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None
    }
    if args.seed is not None:
        overrides["seed"] = args.seed
    if stage is not None:
        overrides["stage"] = stage
    if args.config:
        return load_config(args.config, **overrides)
    return make_config(overrides.pop("stage", stage or "augvae_ml"), args.profile, **overrides)


def _load_scorer(spec: str):
    if spec == "constant":
        return ConstantScorer()
    mod, _, attr = spec.partition(":")
    return getattr(importlib.import_module(mod), attr)()


def cmd_train(args, stage: str) -> int:
    cfg = _config(args, stage)
    if stage == "augvae_sl" and args.source:
        cfg.source_checkpoint = str(args.source)
    if stage == "biart" and args.augvae:
        cfg.augvae_checkpoint = str(args.augvae)
    manifest = load_manifest(args.manifest)
    trainer = train(cfg, manifest, args.out)
    print(json.dumps({"checkpoint": str(args.out / "checkpoint.vqb"), "steps": trainer.step}))
    return 0


def cmd_encode(args) -> int:
    model, meta = load_model(args.checkpoint)
    side = args.cfg_image_side or meta["config"]["image_side"]
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        x = pil_to_tensor(load_image(path, side))[None]
        grids = model.encode_indices(x)
        records = [IndexGrid(g[0].numpy(), model.codebook.num_codes) for g in grids]
        save_grids(args.out / (Path(path).stem + ".vqg"), records)
    return 0


def cmd_decode(args) -> int:
    model, _ = load_model(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.grids:
        grids = [torch.from_numpy(g.indices)[None] for g in load_grids(path)]
        img = model.decode_indices(grids)[0]
        tensor_to_pil(img).save(args.out / (Path(path).stem + ".png"))
    return 0


def cmd_sample_image(args) -> int:
    cfg = _config(args)
    vae, _ = load_model(args.augvae)
    model, meta = load_model(args.biart)
    vocab = load_vocab(meta)
    seeds = [(cfg.seed + i) for i in range(cfg.sample_k)]
    text = normalize_caption(args.text, meta["config"].get("lowercase", True))
    picks = sample_images(
        text, model, vae, vocab, _load_scorer(args.scorer), n=cfg.sample_n, k=cfg.sample_k, seeds=seeds,
        temperature=cfg.temperature, top_k=cfg.top_k or None,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "scores.jsonl", "w") as f:
        for r, pick in enumerate(picks):
            tensor_to_pil(pick.image).save(args.out / f"sample_{r:02d}.png")
            f.write(json.dumps({"round": r, "seed": pick.seed, "selected": pick.index, "scores": pick.scores}) + "\n")
    return 0


def cmd_sample_caption(args) -> int:
    cfg = _config(args)
    vae, vmeta = load_model(args.augvae)
    model, meta = load_model(args.biart)
    vocab = load_vocab(meta)
    x = pil_to_tensor(load_image(args.image, 8 * int(B.IMAGE_LEN**0.5)))
    res = sample_caption(
        x, model, vae, vocab, _load_scorer(args.scorer), n=cfg.sample_n, seed=cfg.seed,
        n_tokens=cfg.caption_tokens, temperature=cfg.temperature, top_k=cfg.top_k or None,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "caption.txt").write_text(res.text + "\n", encoding="utf-8")
    with open(args.out / "candidates.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["candidate", "text", "score", "selected"])
        for i, t in enumerate(res.candidates):
            w.writerow([i, t, res.scores[i] if res.scores else "", int(i == res.index)])
    if res.warning:
        log.warning(res.warning)
    print(res.text)
    return 0


def cmd_eval(args) -> int:
    report = evaluate(args.augvae, load_manifest(args.manifest), args.biart)
    report.write(args.out)
    print(json.dumps(report.summary["codebook"]["pooled"]))
    return 0


def cmd_stats(args) -> int:
    grids = [g for p in args.grids for g in load_grids(p)]
    pooled = codebook_stats(torch.cat([torch.from_numpy(g.indices).reshape(-1) for g in grids]))
    result = {"grids": len(grids), "usage": pooled.usage, "perplexity": pooled.perplexity}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "stats.json").write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result))
    return 0


def format_pack(pack: B.SequencePack) -> list[str]:
    """One tab-separated row per position: pos, id, segment, ref_target, gen_target."""
    rows = ["pos\tid\tsegment\tref_target\tgen_target"]
    for t in range(len(pack)):
        ref = int(pack.ref_loss_mask[t - 1]) if t else 0
        gen = int(pack.gen_loss_mask[t - 1]) if t else 0
        seg = "REF" if int(pack.segments[t]) == B.REF else "GEN"
        rows.append(f"{t}\t{int(pack.ids[t])}\t{seg}\t{ref}\t{gen}")
    return rows


def cmd_pack_dump(args) -> int:
    _, meta = load_model(args.biart)
    vocab = load_vocab(meta)
    ids, mask = encode(normalize_caption(args.text, meta["config"].get("lowercase", True)), vocab)
    grid = load_grids(args.grid)[0].indices.reshape(-1)
    pack = B.pack_sequence(ids[mask], grid, args.direction)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "pack.tsv").write_text("\n".join(format_pack(pack)) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vqbiart")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-augvae", help="train the multi-level autoencoder")
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=lambda a: cmd_train(a, "augvae_ml"))

    p = sub.add_parser("finetune-augvae-sl", help="surgery to single-level and finetune")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--source", type=Path, help="multi-level checkpoint")
    p.set_defaults(func=lambda a: cmd_train(a, "augvae_sl"))

    p = sub.add_parser("train-biart", help="train the transformer on a frozen single-level autoencoder")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--augvae", type=Path, help="single-level checkpoint")
    p.set_defaults(func=lambda a: cmd_train(a, "biart"))

    p = sub.add_parser("encode", help="images -> index-grid files")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("images", nargs="+", type=Path)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="index-grid files -> PNG images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("grids", nargs="+", type=Path)
    p.set_defaults(func=cmd_decode)

    for name, func, extra in (
        ("sample-image", cmd_sample_image, ("--text", str)),
        ("sample-caption", cmd_sample_caption, ("--image", Path)),
    ):
        p = sub.add_parser(name)
        p.add_argument("--augvae", type=Path, required=True)
        p.add_argument("--biart", type=Path, required=True)
        p.add_argument(extra[0], type=extra[1], required=True)
        p.add_argument("--n", dest="cfg_sample_n", type=int)
        p.add_argument("--k", dest="cfg_sample_k", type=int)
        p.add_argument("--scorer", default="constant", help="'constant' or module:factory")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="reconstruction / codebook / NLL report")
    p.add_argument("--augvae", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--biart", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="codebook usage and perplexity of index-grid files")
    p.add_argument("grids", nargs="+", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pack-dump", help="print a packed sequence as rows")
    p.add_argument("--biart", type=Path, required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--direction", choices=[d.value for d in B.Direction], default="text_to_image")
    p.set_defaults(func=cmd_pack_dump)

    for p in sub.choices.values():
        _add_common(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
