"""Training loops for the three stages, with bit-exact checkpoint/resume.

Every source of randomness is a named substream of the run's root seed:
``init`` (weights), ``data`` (batch order and crops), ``codebook`` (dead-code
restarts), ``bpe`` (BPE dropout), ``direction`` (per-sample direction mode)
and the global torch RNG for dropout layers. All of them, together with the
optimizer, plateau rule and data cursor, go into the checkpoint.
"""

from __future__ import annotations

import contextlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .. import biart as B
from ..augvae import AugVaeML, AugVaeSL, ReconLossConfig, reconstruction_loss, surgery_to_sl
from ..errors import ContractViolation, require
from ..tokenizer import BpeVocab, encode, train_bpe
from .config import TrainConfig, derive_seed, torch_generator
from .container import flatten_optimizer, load_container, save_container, unflatten_optimizer
from .data import EpochSampler, ImageBank, Manifest, Preprocessing
from .schedule import PlateauHalving

log = logging.getLogger(__name__)

FORMAT = "vqbiart-checkpoint"


def _vae_kwargs(cfg: TrainConfig) -> dict:
    return dict(
        channels=cfg.channels,
        codebook_size=cfg.codebook_size,
        resblocks=cfg.resblocks,
        beta=cfg.commitment_beta,
        decay=cfg.ema_decay,
        eps=cfg.ema_eps,
        restart_after=cfg.restart_after or None,
        bottleneck_ratio=cfg.bottleneck_ratio,
    )


def _biart_config(cfg: TrainConfig) -> B.BiartConfig:
    return B.BiartConfig(
        n_layer=cfg.n_layer,
        n_head=cfg.n_head,
        n_embd=cfg.n_embd,
        embd_pdrop=cfg.embd_pdrop,
        resid_pdrop=cfg.resid_pdrop,
        attn_pdrop=cfg.attn_pdrop,
    )


def normalize_caption(text: str, lowercase: bool) -> str:
    text = " ".join(text.split())
    return text.lower() if lowercase else text


def build_model(kind: str, model_config: dict) -> torch.nn.Module:
    if kind == "augvae_ml":
        return AugVaeML(**model_config)
    if kind == "augvae_sl":
        return AugVaeSL(**model_config)
    if kind == "biart":
        return B.BiartModel(B.BiartConfig(**model_config))
    raise ContractViolation(f"unknown model kind {kind!r}")


def _model_config(model) -> dict:
    if isinstance(model, B.BiartModel):
        return dict(vars(model.cfg))
    return dict(model.config)


def load_model(path: str | Path) -> tuple[torch.nn.Module, dict]:
    """Model (in eval mode) and metadata stored in a checkpoint container."""
    meta, tensors = load_container(path)
    require(meta.get("format") == FORMAT, f"{path} is not a training checkpoint")
    model = build_model(meta["model_kind"], meta["model_config"])
    model.load_state_dict({k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")})
    model.eval()
    return model, meta


def load_vocab(meta: dict) -> BpeVocab:
    require("bpe_vocab" in meta.get("extras", {}), "checkpoint carries no BPE vocabulary")
    return BpeVocab.loads(meta["extras"]["bpe_vocab"])


class _Trainer:
    kind: str

    def __init__(self, cfg: TrainConfig, manifest: Manifest):
        self.cfg = cfg
        self.manifest = manifest
        manifest.preprocessing = Preprocessing(cfg.image_side, cfg.crop_ratio, cfg.resample)
        self.bank = ImageBank(manifest)
        self.gens = {name: torch_generator(cfg.seed, name) for name in ("data", "codebook", "direction")}
        self.np_rng = np.random.default_rng(derive_seed(cfg.seed, "bpe"))
        torch.manual_seed(derive_seed(cfg.seed, "dropout"))
        self.sampler = EpochSampler(len(self.bank), cfg.batch_size, self.gens["data"])
        self.plateau = PlateauHalving(cfg.plateau_window, cfg.plateau_eps, cfg.plateau_factor)
        self.step = 0
        self.recent: list[float] = []
        self.log_rows: list[dict] = []
        self.extras: dict = {}

    def _make_optimizer(self, groups) -> torch.optim.Optimizer:
        c = self.cfg
        return torch.optim.AdamW(
            groups, lr=c.effective_lr, betas=(c.beta1, c.beta2), eps=c.adam_eps, weight_decay=c.weight_decay
        )

    def _after_step(self, loss: float, row: dict) -> None:
        self.step += 1
        self.recent.append(loss)
        row = {"step": self.step, "lr": self.optimizer.param_groups[0]["lr"], **row}
        self.log_rows.append(row)
        if self.cfg.plateau_every and self.step % self.cfg.plateau_every == 0:
            if self.plateau.observe(sum(self.recent) / len(self.recent)):
                self.plateau.apply(self.optimizer)
                log.info("step %d: loss plateau, lr -> %g", self.step, self.optimizer.param_groups[0]["lr"])
            self.recent.clear()
        if self.cfg.lr_decay == "cosine":
            self._cosine_lr()
        if self.cfg.log_every and self.step % self.cfg.log_every == 0:
            log.info("step %d %s", self.step, json.dumps(row))

    def _cosine_lr(self) -> None:
        # plateau halvings still apply on top of the cosine curve
        c = self.cfg
        frac = min(self.step / max(c.max_steps, 1), 1.0)
        lr = c.effective_lr * c.plateau_factor**self.plateau.halvings * 0.5 * (1 + math.cos(math.pi * frac))
        for g in self.optimizer.param_groups:
            g["lr"] = lr

    def _clip(self) -> None:
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)

    def run(self, steps: int | None = None) -> list[dict]:
        end = self.cfg.max_steps if steps is None else self.step + steps
        rows = []
        while self.step < end:
            rows.append(self.train_step())
            if self.should_stop():
                break
        return rows

    def should_stop(self) -> bool:
        return False

    # checkpointing

    def checkpoint_payload(self) -> tuple[dict, dict[str, torch.Tensor]]:
        opt_meta, opt_tensors = flatten_optimizer(self.optimizer.state_dict())
        tensors = {f"model/{k}": v for k, v in self.model.state_dict().items()}
        tensors.update(opt_tensors)
        tensors["rng/torch_global"] = torch.get_rng_state()
        for name, g in self.gens.items():
            tensors[f"rng/{name}"] = g.get_state()
        meta = {
            "format": FORMAT,
            "model_kind": self.kind,
            "model_config": _model_config(self.model),
            "config": self.cfg.to_dict(),
            "step": self.step,
            "optimizer": opt_meta,
            "numpy_rng": self.np_rng.bit_generator.state,
            "plateau": self.plateau.state(),
            "sampler": self.sampler.state(),
            "recent": self.recent,
            "extras": self.extras,
        }
        return json.loads(json.dumps(meta)), tensors

    def save(self, path: str | Path) -> None:
        meta, tensors = self.checkpoint_payload()
        save_container(path, meta, tensors)

    def restore(self, path: str | Path) -> None:
        meta, tensors = load_container(path)
        require(meta.get("model_kind") == self.kind, f"checkpoint holds {meta.get('model_kind')}, not {self.kind}")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        self.optimizer.load_state_dict(unflatten_optimizer(meta["optimizer"], tensors))
        torch.set_rng_state(tensors["rng/torch_global"])
        for name, g in self.gens.items():
            g.set_state(tensors[f"rng/{name}"])
        self.np_rng.bit_generator.state = meta["numpy_rng"]
        self.plateau.load(meta["plateau"])
        self.sampler.load(meta["sampler"])
        self.recent = [float(v) for v in meta["recent"]]
        self.step = int(meta["step"])
        self.extras = meta["extras"]


class AugVaeTrainer(_Trainer):
    """Reconstruction training for the multi-level model, or SL finetuning after surgery."""

    def __init__(self, cfg: TrainConfig, manifest: Manifest):
        require(cfg.stage in ("augvae_ml", "augvae_sl"), f"AugVaeTrainer cannot run stage {cfg.stage}")
        super().__init__(cfg, manifest)
        self.kind = cfg.stage
        init_seed = derive_seed(cfg.seed, "init")
        if cfg.stage == "augvae_ml":
            self.model = AugVaeML(**_vae_kwargs(cfg), seed=init_seed)
        else:
            require(bool(cfg.source_checkpoint), "augvae_sl finetuning needs source_checkpoint (an ML checkpoint)")
            require(Path(cfg.source_checkpoint).is_file(), f"source checkpoint {cfg.source_checkpoint} not found")
            ml, meta = load_model(cfg.source_checkpoint)
            require(meta["model_kind"] == "augvae_ml", "source_checkpoint must hold an augvae_ml model")
            self.model = surgery_to_sl(ml, seed=init_seed)
        self.model.train()
        self.loss_cfg = ReconLossConfig(perceptual_weight=cfg.perceptual_weight)
        self.optimizer = self._make_optimizer(self.model.parameters())
        self.last_mse = float("inf")

    def train_step(self) -> dict:
        idx = self.sampler.next()
        x = self.bank.batch(idx, self.gens["data"])
        out = self.model(x, generator=self.gens["codebook"])
        mse = reconstruction_loss(x, out.x_hat, self.loss_cfg)
        loss = mse + out.commitment_loss
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self._clip()
        self.optimizer.step()
        self.last_mse = mse.item()
        row = {"loss": loss.item(), "recon": self.last_mse, "commit": out.commitment_loss.item()}
        self._after_step(loss.item(), row)
        return row

    def should_stop(self) -> bool:
        return self.cfg.target_mse > 0 and self.last_mse < self.cfg.target_mse


class BiartTrainer(_Trainer):
    """Alternating-direction dual-NLL training on a frozen single-level autoencoder."""

    kind = "biart"

    def __init__(self, cfg: TrainConfig, manifest: Manifest):
        require(cfg.stage == "biart", f"BiartTrainer cannot run stage {cfg.stage}")
        require(bool(cfg.augvae_checkpoint), "biart training needs augvae_checkpoint (an SL checkpoint)")
        require(Path(cfg.augvae_checkpoint).is_file(), f"autoencoder checkpoint {cfg.augvae_checkpoint} not found")
        super().__init__(cfg, manifest)
        self.vae, vmeta = load_model(cfg.augvae_checkpoint)
        require(vmeta["model_kind"] == "augvae_sl", "biart needs a single-level (augvae_sl) autoencoder")
        self.vae.requires_grad_(False)
        side = cfg.image_side // 8
        require(side * side == B.IMAGE_LEN, f"image_side {cfg.image_side} does not give a 32x32 token grid")

        self.captions = [normalize_caption(c, cfg.lowercase) for c in manifest.captions]
        if cfg.vocab_path:
            self.vocab = BpeVocab.load(cfg.vocab_path)
        else:
            self.vocab = train_bpe(self.captions, cfg.text_vocab)
        self.extras = {"bpe_vocab": self.vocab.dumps(), "augvae_checkpoint": str(cfg.augvae_checkpoint)}

        self.model = B.BiartModel(_biart_config(cfg), seed=derive_seed(cfg.seed, "init"))
        self.model.train()
        self.optimizer = self._make_optimizer(self.model.param_groups(cfg.weight_decay))
        self._grids = None if self.bank.augments else self._encode(list(range(len(self.bank))), None)

    @torch.no_grad()
    def _encode(self, idx, gen) -> torch.Tensor:
        # the autoencoder always runs in full precision
        x = self.bank.batch(idx, gen)
        return self.vae.encode_indices(x)[0].reshape(len(idx), -1)

    def direction_for(self, step: int, n: int) -> list[B.Direction]:
        if self.cfg.direction_mode == "sample":
            flips = torch.randint(0, 2, (n,), generator=self.gens["direction"]).tolist()
            return [B.Direction.TEXT_TO_IMAGE if f == 0 else B.Direction.IMAGE_TO_TEXT for f in flips]
        d = B.Direction.TEXT_TO_IMAGE if step % 2 == 0 else B.Direction.IMAGE_TO_TEXT
        return [d] * n

    def make_batch(self, idx: list[int], directions: list[B.Direction]) -> dict[str, torch.Tensor]:
        grids = self._grids[torch.as_tensor(idx)] if self._grids is not None else self._encode(idx, self.gens["data"])
        packs = []
        for j, i in enumerate(idx):
            ids, mask = encode(self.captions[i], self.vocab, self.cfg.bpe_dropout, B.TEXT_LEN, self.np_rng)
            packs.append(B.pack_sequence(ids[mask], grids[j], directions[j]))
        return B.collate(packs)

    def train_step(self) -> dict:
        idx = self.sampler.next()
        directions = self.direction_for(self.step, len(idx))
        batch = self.make_batch(idx, directions)
        amp = (
            torch.autocast("cpu", dtype=torch.bfloat16) if self.cfg.mixed_precision else contextlib.nullcontext()
        )
        with amp:
            out = B.loss(self.model, batch, self.cfg.w_ref, self.cfg.w_gen)
        self.optimizer.zero_grad(set_to_none=True)
        out["total"].backward()
        self._clip()
        self.optimizer.step()
        row = {
            "direction": directions[0].value if self.cfg.direction_mode == "iteration" else "mixed",
            "loss": out["total"].item(),
            "nll_ref": out["nll_ref"].item(),
            "nll_gen": out["nll_gen"].item(),
        }
        self._after_step(out["total"].item(), row)
        return row


def make_trainer(cfg: TrainConfig, manifest: Manifest) -> _Trainer:
    return BiartTrainer(cfg, manifest) if cfg.stage == "biart" else AugVaeTrainer(cfg, manifest)


def train(cfg: TrainConfig, manifest: Manifest, out_dir: str | Path | None = None) -> _Trainer:
    """Run ``cfg.max_steps`` steps (or until ``target_mse``) and optionally write the checkpoint and log."""
    trainer = make_trainer(cfg, manifest)
    trainer.run()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        trainer.save(out / "checkpoint.vqb")
        cfg.save(out / "config.json")
        with open(out / "train_log.jsonl", "w") as f:
            for row in trainer.log_rows:
                f.write(json.dumps(row) + "\n")
    return trainer


def train_augvae(manifest: Manifest, cfg: TrainConfig, out_dir=None) -> _Trainer:
    require(cfg.stage in ("augvae_ml", "augvae_sl"), "train_augvae runs augvae_ml or augvae_sl")
    return train(cfg, manifest, out_dir)


def train_biart(manifest: Manifest, cfg: TrainConfig, augvae_ckpt: str | Path | None = None, out_dir=None) -> _Trainer:
    if augvae_ckpt is not None:
        cfg.augvae_checkpoint = str(augvae_ckpt)
    require(cfg.stage == "biart", "train_biart runs the biart stage")
    return train(cfg, manifest, out_dir)
