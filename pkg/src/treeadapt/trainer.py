"""Few-shot domain-adaptive training loop and checkpointing."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .decoder import CountingModel, DabConfig, ModelConfig
from .discriminator import Discriminator, DiscriminatorConfig
from .encoder import EncoderConfig
from .losses import (HcdfaWeights, LossBatch, NonFiniteError, OtConfig, TdmWeights, discriminator_loss,
                     generator_adversarial, hcdfa_loss, tdm_loss, total_loss)
from .serialization import read_container, write_container

log = logging.getLogger(__name__)

RECORD_KEYS = ("epoch", "step", "l_count", "l_ot", "l_tv", "l_tdm_s", "l_tdm_t", "l_tdm_st", "l_ds", "l_dt",
               "l_hcdfa", "l_adv_g", "l_adv_d", "lambda", "l_total")


class TrainingDiverged(RuntimeError):
    def __init__(self, record):
        self.record = record
        super().__init__(f"non-finite loss at epoch {record.get('epoch')} step {record.get('step')}: {record}")


@dataclass
class TrainConfig:
    profile: str = "toy"
    k_shot: int = 5
    batch_size: int = 8
    epochs: int = 200
    lr: float = 1e-4
    lr_schedule: str = "constant"   # "constant" or "cosine" (decays to 0 over ``epochs``)
    weight_decay: float = 1e-5
    disc_lr: float = 1e-3
    lambda_start: float = 0.1
    lambda_after: float = 1.0
    lambda_switch_epoch: int = 100
    seed: int = 0
    crop_size: int | None = None
    sigma: float = D.DEFAULT_SIGMA
    grad_clip: float | None = None
    mode: str = "adapt"             # "adapt" or "source_only"
    use_cross: bool = True          # False: source + target subnets only
    use_hcdfa: bool = True
    use_adv: bool = True
    loss: str = "tdm"               # "tdm" or "l2"
    beta1: float = 0.3
    beta2: float = 0.7
    phi1: float = 1.0
    phi2: float = 0.1
    phi3: float = 0.01
    hcdfa_scales: tuple = (2, 3, 4)
    dab_scales: tuple = (2, 3, 4)
    dab_heads: int | None = None
    bidirectional: bool = False
    shared_decoder: bool = True
    cutmix: bool = True
    cutmix_prob: float = 0.5
    flip_prob: float = 0.5
    ot_epsilon: float = 1e-2
    ot_iterations: int = 100
    ot_pool: int | None = None
    ot_solver: str = "scaling"
    disc_with_image: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.profile not in ("toy", "paper"):
            raise ValueError(f"unknown profile {self.profile!r}")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.mode not in ("adapt", "source_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in ("tdm", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        self.hcdfa_scales = tuple(int(s) for s in np.atleast_1d(self.hcdfa_scales))
        self.dab_scales = tuple(int(s) for s in np.atleast_1d(self.dab_scales))
        toy = self.profile == "toy"
        if self.crop_size is None:
            self.crop_size = 64 if toy else 256
        if self.ot_pool is None:
            self.ot_pool = 4 if toy else 8
        if self.grad_clip is None and toy:
            self.grad_clip = 10.0
        if self.grad_clip is not None and self.grad_clip <= 0:
            self.grad_clip = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        enc = EncoderConfig.for_profile(self.profile)
        dab = DabConfig.paper() if self.profile == "paper" else DabConfig.toy()
        dab.dab_scales = tuple(sorted(self.dab_scales))
        dab.bidirectional = self.bidirectional
        dab.shared = self.shared_decoder
        if self.dab_heads:
            dab.num_heads = self.dab_heads
        return ModelConfig(profile=self.profile, img_size=self.crop_size, encoder=enc, dab=dab)

    def disc_config(self) -> DiscriminatorConfig:
        if self.profile == "paper":
            cfg = DiscriminatorConfig.paper(input_size=self.crop_size)
        else:
            cfg = DiscriminatorConfig.toy()
        cfg.with_image = self.disc_with_image
        return cfg

    def ot_config(self) -> OtConfig:
        return OtConfig(epsilon=self.ot_epsilon, iterations=self.ot_iterations, pool=self.ot_pool,
                        solver=self.ot_solver)


def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lambda_start if epoch < cfg.lambda_switch_epoch else cfg.lambda_after


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Generator learning rate for a 0-based epoch."""
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.lr


def sample_few_shot(target_train, k: int, seed: int) -> list:
    """Uniform draw of ``k`` samples without replacement."""
    if k > len(target_train):
        raise ValueError(f"k={k} exceeds the {len(target_train)} available target samples")
    idx = np.random.default_rng(seed).choice(len(target_train), size=k, replace=False)
    chosen = [target_train[int(i)] for i in idx]
    log.info("few-shot selection: %s", [s.name or int(i) for s, i in zip(chosen, idx)])
    return chosen


def steps_per_epoch(n_source: int, batch_size: int) -> int:
    return math.ceil(n_source / batch_size)


def make_paired_batches(source, target_few, cfg: TrainConfig, epoch: int = 0):
    """Yield (source batch, target batch) lists of augmented Samples for one epoch.

    Source images are visited once in shuffled order; the few-shot target set is
    cycled, each draw re-cropped, flipped and (optionally) CutMix-ed with another shot.
    """
    if not source or not target_few:
        raise ValueError("both source and target sets must be non-empty")
    rng = np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(len(source))
    tcycle = []
    size, sigma = cfg.crop_size, cfg.sigma
    for step in range(steps_per_epoch(len(source), cfg.batch_size)):
        idx = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
        bs = [D.random_crop_flip(source[i], size, rng, cfg.flip_prob, sigma) for i in idx]
        bt = []
        for _ in idx:
            if not tcycle:
                tcycle = list(rng.permutation(len(target_few)))
            t = D.random_crop_flip(target_few[tcycle.pop()], size, rng, cfg.flip_prob, sigma)
            if cfg.cutmix and rng.random() < cfg.cutmix_prob:
                other = D.random_crop_flip(target_few[int(rng.integers(len(target_few)))], size, rng,
                                           cfg.flip_prob, sigma)
                t = D.cutmix(t, other, seed=int(rng.integers(2**31)), sigma=sigma)
            bt.append(t)
        yield bs, bt


def to_tensors(samples, dtype=torch.float32):
    img = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).to(dtype)
    dens = torch.from_numpy(np.stack([s.density for s in samples])).to(dtype)
    return img.contiguous(), dens


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


class Trainer:
    """Owns the generator (encoder + decoder), the domain classifier and their optimizers."""

    def __init__(self, cfg: TrainConfig | None = None):
        self.cfg = cfg = cfg or TrainConfig()
        torch.manual_seed(cfg.seed)
        self.model = CountingModel(cfg.model_config())
        self.disc = Discriminator(cfg.disc_config())
        self.opt_g = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.opt_d = torch.optim.SGD(self.disc.parameters(), lr=cfg.disc_lr)
        self.tdm_w = TdmWeights(cfg.phi1, cfg.phi2, cfg.phi3)
        self.hcdfa_w = HcdfaWeights(cfg.beta1, cfg.beta2)
        self.ot_cfg = cfg.ot_config()
        self.epoch = -1  # last completed epoch
        self.history = []

    # --- one update -------------------------------------------------------
    def generator_loss(self, img_s, dens_s, img_t, dens_t, lam):
        """Forward the subnets and return (loss, record, outputs)."""
        cfg = self.cfg
        zero = torch.zeros((), dtype=img_s.dtype)
        rec = dict.fromkeys(RECORD_KEYS[2:], 0.0)
        if cfg.mode == "source_only":
            pyr = self.model.encoder(img_s)
            t_s, _ = self.model.decoder(pyr, pyr, "self", out_size=img_s.shape[-2:])
            tdm, parts = tdm_loss(LossBatch([t_s[:, 0]], [dens_s], ("s",)), self.tdm_w, self.ot_cfg,
                                  pixel_l2=cfg.loss == "l2")
            rec.update({k: _f(v) for k, v in parts.items()})
            rec["lambda"] = 0.0
            rec["l_total"] = _f(tdm)
            return tdm, rec, {"T_s": t_s}
        out = self.model(img_s, img_t, cross=cfg.use_cross)
        preds, gts, names = [out["T_s"][:, 0], out["T_t"][:, 0]], [dens_s, dens_t], ["s", "t"]
        if cfg.use_cross:
            preds.append(out["T_st"][:, 0])
            gts.append(dens_t)
            names.append("st")
        tdm, parts = tdm_loss(LossBatch(preds, gts, tuple(names)), self.tdm_w, self.ot_cfg,
                              pixel_l2=cfg.loss == "l2")
        hc, l_ds, l_dt = zero, zero, zero
        if cfg.use_cross and cfg.use_hcdfa:
            hc, l_ds, l_dt = hcdfa_loss(out["score_st"], out["score_s"], out["score_t"], self.hcdfa_w,
                                        scales=cfg.hcdfa_scales, return_parts=True)
        adv_g = zero
        if cfg.use_adv:
            img_arg = (img_s, img_t) if cfg.disc_with_image else (None, None)
            adv_g = generator_adversarial(self.disc(out["T_s"], img_arg[0]), self.disc(out["T_t"], img_arg[1]))
        loss = total_loss(tdm, hc, lam * adv_g)
        rec.update({k: _f(v) for k, v in parts.items()})
        rec.update(l_ds=_f(l_ds), l_dt=_f(l_dt), l_hcdfa=_f(hc), l_adv_g=_f(adv_g), l_total=_f(loss))
        rec["lambda"] = float(lam)
        return loss, rec, out

    def discriminator_step(self, out, img_s=None, img_t=None):
        if not self.cfg.use_adv or self.cfg.mode == "source_only":
            return 0.0
        self.disc.requires_grad_(True)
        self.opt_d.zero_grad(set_to_none=True)
        a, b = (img_s, img_t) if self.cfg.disc_with_image else (None, None)
        d_loss = discriminator_loss(self.disc(out["T_s"].detach(), a), self.disc(out["T_t"].detach(), b))
        d_loss.backward()
        self.opt_d.step()
        return _f(d_loss)

    def train_step(self, batch_s, batch_t, epoch: int, step: int = 0) -> dict:
        self.model.train()
        self.disc.train()
        img_s, dens_s = to_tensors(batch_s)
        img_t, dens_t = to_tensors(batch_t)
        lam = lambda_schedule(epoch, self.cfg)
        for group in self.opt_g.param_groups:
            group["lr"] = lr_at(epoch, self.cfg)
        self.disc.requires_grad_(False)
        self.opt_g.zero_grad(set_to_none=True)
        try:
            loss, rec, out = self.generator_loss(img_s, dens_s, img_t, dens_t, lam)
        except NonFiniteError as exc:
            raise TrainingDiverged({"epoch": epoch, "step": step, "lambda": lam, "error": str(exc)}) from None
        rec.update(epoch=epoch, step=step)
        if not math.isfinite(rec["l_total"]):
            raise TrainingDiverged(rec)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt_g.step()
        rec["l_adv_d"] = self.discriminator_step(out, img_s, img_t)
        return {k: rec[k] for k in RECORD_KEYS}

    # --- loops ------------------------------------------------------------
    def fit(self, source, target_few, epochs=None, log_path=None, ckpt_dir=None, callback=None):
        """Train from ``self.epoch + 1`` up to ``epochs`` (total count); returns the history."""
        epochs = self.cfg.epochs if epochs is None else epochs
        fh = open(log_path, "a") if log_path else None
        try:
            for epoch in range(self.epoch + 1, epochs):
                for step, (bs, bt) in enumerate(make_paired_batches(source, target_few, self.cfg, epoch)):
                    rec = self.train_step(bs, bt, epoch, step)
                    self.history.append(rec)
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                self.epoch = epoch
                if fh:
                    fh.flush()
                if ckpt_dir and ((epoch + 1) % self.cfg.checkpoint_every == 0 or epoch + 1 == epochs):
                    self.save(Path(ckpt_dir) / f"checkpoint_epoch{epoch:04d}.ckpt")
                    self.save(Path(ckpt_dir) / "checkpoint_last.ckpt")
                if callback:
                    callback(self, epoch)
        finally:
            if fh:
                fh.close()
        return self.history

    @torch.no_grad()
    def predict(self, images) -> torch.Tensor:
        """Target-subnet densities for a B x 3 x H x W batch (eval mode)."""
        self.model.eval()
        return self.model.predict(images)[:, 0]

    # --- checkpoints ------------------------------------------------------
    def save(self, path) -> Path:
        arrays = {}
        for prefix, sd in (("model.", self.model.state_dict()), ("disc.", self.disc.state_dict())):
            for k, v in sd.items():
                arrays[prefix + k] = v.detach().cpu().numpy()
        opt_meta = {}
        for name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            sd = opt.state_dict()
            scalars = {}
            for pid, st in sd["state"].items():
                for k, v in st.items():
                    if torch.is_tensor(v):
                        arrays[f"{name}.{pid}.{k}"] = v.detach().cpu().numpy()
                    else:
                        scalars[f"{pid}.{k}"] = v
            opt_meta[name] = {"param_groups": sd["param_groups"], "scalars": scalars,
                              "state_ids": [int(p) for p in sd["state"]]}
        arrays["rng.torch"] = torch.get_rng_state().numpy()
        meta = {"epoch": self.epoch, "config": self.cfg.to_dict(), "optim": opt_meta,
                "format": "treeadapt-checkpoint"}
        return write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Trainer":
        arrays, meta = read_container(path)
        cfg = TrainConfig.from_dict(meta["config"])
        tr = cls(cfg)
        for prefix, mod in (("model.", tr.model), ("disc.", tr.disc)):
            sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
            mod.load_state_dict(sd)
        for name, opt in (("opt_g", tr.opt_g), ("opt_d", tr.opt_d)):
            om = meta["optim"][name]
            state = {}
            for pid in om["state_ids"]:
                st = {}
                pre = f"{name}.{pid}."
                for k, v in arrays.items():
                    if k.startswith(pre):
                        st[k[len(pre):]] = torch.from_numpy(v)
                for k, v in om["scalars"].items():
                    p, key = k.split(".", 1)
                    if int(p) == pid:
                        st[key] = v
                state[pid] = st
            opt.load_state_dict({"state": state, "param_groups": om["param_groups"]})
        torch.set_rng_state(torch.from_numpy(arrays["rng.torch"]))
        tr.epoch = int(meta["epoch"])
        return tr


def load_model(path) -> CountingModel:
    model = Trainer.load(path).model
    model.eval()
    return model


def train(config: TrainConfig, source_root, target_root, out_dir, resume=None) -> Path:
    """Train on ``<root>/train`` of both datasets; writes checkpoints, loss log and the few-shot ids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = D.load_dataset(source_root, "train", config.sigma, "source")
    target = D.load_dataset(target_root, "train", config.sigma, "target")
    if not source:
        raise FileNotFoundError(f"no training images under {Path(source_root) / 'train'}")
    if resume:
        trainer = Trainer.load(resume)
        trainer.cfg.epochs = config.epochs
    else:
        trainer = Trainer(config)
    few = sample_few_shot(target, config.k_shot, config.seed) if config.mode == "adapt" else target[:1]
    with open(out_dir / "few_shot.json", "w") as fh:
        json.dump([s.name for s in few], fh)
    trainer.fit(source, few, config.epochs, out_dir / "loss_log.jsonl", out_dir)
    final = out_dir / "checkpoint_last.ckpt"
    if not final.exists():
        trainer.save(final)
    return final
