"""Semi-supervised GAN and ConvNet-baseline training loops.

One SSL step: ADAM update of the discriminator on
``L_supervised + L_unsupervised``, EMA update of its weights, then an ADAM
update of the generator on the feature-matching loss measured against the
freshly updated discriminator.

Randomness: every epoch gets its own generator derived from
``(config.seed, "epoch", epoch)``, so resuming from an epoch checkpoint
replays exactly what an uninterrupted run would have done.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import load_container, save_container
from .dataset import LabeledSubset, PatchDataset
from .model import (
    Discriminator,
    Generator,
    LossBundle,
    init_discriminator,
    init_generator,
    loss_feature_matching,
    loss_supervised,
    loss_unsupervised,
    sample_latent,
)
from .seeds import derive_seed, rng_for

log = logging.getLogger(__name__)

METHODS = ("ssl", "convnet")


@dataclass
class TrainConfig:
    epochs: int = 1200
    batch_size: int = 100
    lrelu_slope: float = 0.2
    ema_decay: float = 0.999
    adam_alpha: float = 3e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay_start_epoch: int = 1000
    weight_init_sigma: float = 0.05
    latent_dim: int = 100
    n_classes: int = 2
    input_size: int = 32
    d_widths: tuple[int, int] = (96, 192)
    g_channels: tuple[int, ...] = (512, 256, 128)
    dropout: tuple[float, float, float] = (0.2, 0.5, 0.5)
    feature_mode: str = "pooled"
    augment_crop: bool = True
    augment_hflip: bool = True
    augment_vflip: bool = True
    crop_pad: int = 2
    balanced_labeled: bool = True
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("d_widths", "g_channels", "dropout"):
            setattr(self, name, tuple(getattr(self, name)))
        positive = ("batch_size", "adam_alpha", "adam_beta1", "weight_init_sigma",
                    "latent_dim", "input_size", "checkpoint_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        # epochs == 0 is allowed: it writes an untrained checkpoint
        if self.epochs < 0 or not 0 <= self.lr_decay_start_epoch <= self.epochs:
            raise ValueError("need 0 <= lr_decay_start_epoch <= epochs")
        if not 0.0 <= self.ema_decay < 1.0 or not 0.0 <= self.adam_beta2 < 1.0:
            raise ValueError("decay rates must lie in [0, 1)")
        if self.crop_pad < 0:
            raise ValueError("crop_pad must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def desk_config(**overrides) -> TrainConfig:
    """Small networks for 16 px patches on a CPU (~100k parameters in total).

    With ~40 training images an epoch is only a handful of steps, so the
    batch is smaller and the EMA shorter than the full-scale defaults.
    """
    base = dict(epochs=200, lr_decay_start_epoch=160, batch_size=32, ema_decay=0.99,
                input_size=16, d_widths=(16, 32), g_channels=(32, 32, 16), checkpoint_every=50)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Constant ``adam_alpha``, then linear to 0 from the decay start to the last epoch."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    start, end = config.lr_decay_start_epoch, config.epochs
    if epoch < start:
        return config.adam_alpha
    if end == start:
        return 0.0
    return config.adam_alpha * ((end - epoch) / (end - start))


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentDraw:
    offsets: torch.Tensor  # B x 2 crop offsets into the padded sample (row, col)
    hflip: torch.Tensor  # B bool
    vflip: torch.Tensor  # B bool


def draw_augment(batch_size: int, generator: torch.Generator, pad: int) -> AugmentDraw:
    offsets = torch.randint(0, 2 * pad + 1, (batch_size, 2), generator=generator)
    hflip = torch.rand(batch_size, generator=generator) < 0.5
    vflip = torch.rand(batch_size, generator=generator) < 0.5
    return AugmentDraw(offsets, hflip, vflip)


def apply_augment(batch: torch.Tensor, draw: AugmentDraw, pad: int, crop: bool = True,
                  hflip: bool = True, vflip: bool = True) -> torch.Tensor:
    b, c, h, w = batch.shape
    out = batch
    if crop and pad > 0:
        padded = F.pad(batch, (pad, pad, pad, pad), mode="reflect")
        rows = draw.offsets[:, 0, None] + torch.arange(h)
        cols = draw.offsets[:, 1, None] + torch.arange(w)
        out = padded[
            torch.arange(b)[:, None, None, None],
            torch.arange(c)[None, :, None, None],
            rows[:, None, :, None],
            cols[:, None, None, :],
        ]
    if hflip:
        out = torch.where(draw.hflip[:, None, None, None], out.flip(3), out)
    if vflip:
        out = torch.where(draw.vflip[:, None, None, None], out.flip(2), out)
    return out


def augment(batch: torch.Tensor, generator: torch.Generator, config: TrainConfig) -> torch.Tensor:
    """Reflect-pad + random crop (jitter of ``crop_pad`` px) and random h/v flips.

    Random draws are consumed even for disabled transforms so toggling one
    flag does not reshuffle the others.
    """
    draw = draw_augment(batch.shape[0], generator, config.crop_pad)
    return apply_augment(batch, draw, config.crop_pad, config.augment_crop,
                         config.augment_hflip, config.augment_vflip)


# ---------------------------------------------------------------------------
# EMA


@dataclass
class EmaState:
    shadow: dict[str, torch.Tensor]
    decay: float = 0.999
    update_count: int = 0

    @classmethod
    def from_module(cls, module: nn.Module, decay: float) -> "EmaState":
        return cls({k: v.detach().clone() for k, v in module.named_parameters()}, decay, 0)


def _named(params: nn.Module | Mapping[str, torch.Tensor]) -> Mapping[str, torch.Tensor]:
    return dict(params.named_parameters()) if isinstance(params, nn.Module) else params


def ema_update(ema: EmaState, params: nn.Module | Mapping[str, torch.Tensor]) -> EmaState:
    """New state with ``shadow <- d * shadow + (1 - d) * params``."""
    params = _named(params)
    if params.keys() != ema.shadow.keys():
        raise ValueError("EMA shadow and parameters have different names")
    d = ema.decay
    shadow = {}
    with torch.no_grad():
        for name, s in ema.shadow.items():
            p = params[name].detach()
            if p.shape != s.shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(s.shape)}")
            shadow[name] = d * s + (1.0 - d) * p
    return EmaState(shadow, d, ema.update_count + 1)


def with_ema_weights(module: nn.Module, ema: EmaState) -> nn.Module:
    """Copy of ``module`` carrying the EMA parameters."""
    clone = copy.deepcopy(module)
    with torch.no_grad():
        for name, p in clone.named_parameters():
            p.copy_(ema.shadow[name])
    return clone


# ---------------------------------------------------------------------------
# optimisation steps


def make_optimizer(module: nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=config.adam_alpha,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train_step_ssl(disc: Discriminator, gen: Generator, opt_d: torch.optim.Optimizer,
                   opt_g: torch.optim.Optimizer, ema: EmaState,
                   labeled: tuple[torch.Tensor, torch.Tensor] | None,
                   unlabeled: torch.Tensor, z: torch.Tensor, lr: float,
                   generator: torch.Generator | None = None) -> tuple[EmaState, LossBundle]:
    """One discriminator update, EMA update, then one generator update (in place).

    With an empty/missing labeled batch the discriminator is trained on the
    unsupervised loss alone.
    """
    set_lr(opt_d, lr)
    set_lr(opt_g, lr)
    gen.train()
    x_l, y_l = labeled if labeled is not None else (unlabeled[:0], torch.zeros(0, dtype=torch.long))
    n_l, n_u = x_l.shape[0], unlabeled.shape[0]
    if n_l == 0:
        log.warning("empty labeled batch: discriminator step uses the unsupervised loss only")

    with torch.no_grad():
        fake = gen(z)
    logits, _ = disc(torch.cat([x_l, unlabeled, fake]), train=True, generator=generator)
    l_sup = loss_supervised(logits[:n_l], y_l) if n_l else logits.new_zeros(())
    l_unsup = loss_unsupervised(logits[n_l:n_l + n_u], logits[n_l + n_u:])
    opt_d.zero_grad(set_to_none=True)
    (l_sup + l_unsup).backward()
    opt_d.step()
    ema = ema_update(ema, disc)

    fake = gen(z)
    _, feats = disc(torch.cat([unlabeled, fake]), train=True, generator=generator)
    l_g = loss_feature_matching(feats[:n_u].detach(), feats[n_u:])
    opt_g.zero_grad(set_to_none=True)
    l_g.backward(inputs=list(gen.parameters()))
    opt_g.step()
    return ema, LossBundle(l_sup.item(), l_unsup.item(), l_g.item())


def train_step_supervised(disc: Discriminator, opt: torch.optim.Optimizer, ema: EmaState,
                          x: torch.Tensor, y: torch.Tensor, lr: float,
                          generator: torch.Generator | None = None) -> tuple[EmaState, LossBundle]:
    set_lr(opt, lr)
    logits, _ = disc(x, train=True, generator=generator)
    loss = loss_supervised(logits, y)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return ema_update(ema, disc), LossBundle(loss.item(), 0.0, 0.0)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class EpochLoss:
    epoch: int
    l_supervised: float
    l_unsupervised: float
    l_g: float
    lr: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.l_supervised, self.l_unsupervised, self.l_g))


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer,
                       names: list[str]) -> dict[str, np.ndarray]:
    out = {}
    state = opt.state_dict()["state"]
    for idx, name in enumerate(names):
        for key, value in state.get(idx, {}).items():
            out[f"{prefix}/{name}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return out


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, names: list[str],
                    tensors: Mapping[str, np.ndarray]) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for idx, name in enumerate(names):
        entry = {}
        for key in ("step", "exp_avg", "exp_avg_sq"):
            arr = tensors.get(f"{prefix}/{name}/{key}")
            if arr is not None:
                entry[key] = torch.from_numpy(arr.copy())
        if entry:
            state[idx] = entry
    sd = opt.state_dict()
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def save_checkpoint(path: str | os.PathLike, disc: Discriminator, ema: EmaState,
                    opt_d: torch.optim.Optimizer, gen: Generator | None = None,
                    opt_g: torch.optim.Optimizer | None = None,
                    meta: Mapping[str, Any] | None = None) -> None:
    """Persist network, EMA and ADAM state in the container format."""
    tensors: dict[str, np.ndarray] = {}
    tensors.update({f"d/{k}": v.detach().numpy() for k, v in disc.state_dict().items()})
    tensors.update({f"ema/{k}": v.detach().numpy() for k, v in ema.shadow.items()})
    tensors.update(_optimizer_tensors("opt_d", opt_d, [n for n, _ in disc.named_parameters()]))
    if gen is not None:
        tensors.update({f"g/{k}": v.detach().numpy() for k, v in gen.state_dict().items()})
        tensors.update(_optimizer_tensors("opt_g", opt_g, [n for n, _ in gen.named_parameters()]))
    meta = dict(meta or {})
    meta["ema_decay"] = ema.decay
    meta["ema_update_count"] = ema.update_count
    save_container(path, tensors, meta)


def _strip(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "/"
    return {k[len(p):]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith(p)}


def _load_state(module: nn.Module, state: Mapping[str, torch.Tensor]) -> None:
    ref = module.state_dict()
    module.load_state_dict({k: state[k].to(ref[k].dtype) for k in ref})


def build_networks(config: TrainConfig, method: str) -> tuple[Discriminator, Generator | None]:
    disc = init_discriminator(
        config.n_classes, derive_seed(config.seed, "init_d"), config.weight_init_sigma,
        widths=config.d_widths, input_size=config.input_size, slope=config.lrelu_slope,
        dropout=config.dropout, feature_mode=config.feature_mode)
    gen = None
    if method == "ssl":
        gen = init_generator(derive_seed(config.seed, "init_g"), config.weight_init_sigma,
                             latent_dim=config.latent_dim, channels=config.g_channels,
                             output_size=config.input_size)
    return disc, gen


# ---------------------------------------------------------------------------
# runs


@dataclass
class TrainRun:
    run_dir: Path
    config: TrainConfig
    method: str
    losses: list[EpochLoss]
    discriminator: Discriminator
    ema: EmaState
    generator: Generator | None = None
    subset: LabeledSubset | None = None
    low_data: bool = False
    seeds: dict[str, int] = field(default_factory=dict)

    @property
    def completed_epochs(self) -> int:
        return len(self.losses)

    def ema_discriminator(self) -> Discriminator:
        return with_ema_weights(self.discriminator, self.ema).eval()

    @classmethod
    def load(cls, run_dir: str | os.PathLike, checkpoint: str | os.PathLike | None = None) -> "TrainRun":
        run_dir = Path(run_dir)
        path = Path(checkpoint) if checkpoint is not None else run_dir / "final.ckpt"
        if not path.is_file():
            raise FileNotFoundError(f"no checkpoint at {path}")
        tensors, meta = load_container(path)
        config = TrainConfig.from_dict(meta["config"])
        method = meta["method"]
        disc, gen = build_networks(config, method)
        _load_state(disc, _strip(tensors, "d"))
        if gen is not None:
            _load_state(gen, _strip(tensors, "g"))
        shadow = {k: v.to(torch.float32) for k, v in _strip(tensors, "ema").items()}
        ema = EmaState(shadow, meta["ema_decay"], meta["ema_update_count"])
        subset = None if meta.get("subset") is None else LabeledSubset.from_json(meta["subset"])
        return cls(run_dir, config, method, [EpochLoss(**r) for r in meta["losses"]], disc, ema,
                   gen, subset, bool(meta.get("low_data", False)), dict(meta.get("seeds", {})))


def _write_losses(path: Path, losses: list[EpochLoss]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_sup", "l_unsup", "l_g", "lr"])
        for r in losses:
            w.writerow([r.epoch, repr(r.l_supervised), repr(r.l_unsupervised), repr(r.l_g),
                        repr(r.lr)])


def _latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((run_dir / "checkpoints").glob("epoch_*.ckpt"),
                   key=lambda p: int(p.stem.split("_")[1]))
    final = run_dir / "final.ckpt"
    if final.is_file():
        return final
    return ckpts[-1] if ckpts else None


class _LabeledSampler:
    """Draws labeled batches with replacement, half per class when both exist."""

    def __init__(self, indices: np.ndarray, labels: np.ndarray, balanced: bool):
        self.indices = indices
        self.by_class = [indices[labels[indices] == c] for c in (0, 1)]
        self.balanced = balanced and all(len(b) for b in self.by_class)

    def __len__(self):
        return len(self.indices)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if not len(self.indices):
            return self.indices[:0]
        if not self.balanced:
            return self.indices[rng.integers(len(self.indices), size=n)]
        half = n // 2
        neg = self.by_class[0][rng.integers(len(self.by_class[0]), size=n - half)]
        pos = self.by_class[1][rng.integers(len(self.by_class[1]), size=half)]
        return np.concatenate([neg, pos])


def _prepare_run_dir(run_dir: Path, resume: bool) -> None:
    if run_dir.exists() and any(run_dir.iterdir()) and not resume:
        raise FileExistsError(f"run directory {run_dir} is not empty (use resume)")
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)


def _train(method: str, config: TrainConfig, dataset: PatchDataset, subset: LabeledSubset,
           run_dir: str | os.PathLike, resume: bool = False,
           stop_after: int | None = None) -> TrainRun:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    run_dir = Path(run_dir)
    _prepare_run_dir(run_dir, resume)
    if dataset.geometry.downsample != config.input_size:
        raise ValueError(f"patches are {dataset.geometry.downsample} px, network expects "
                         f"{config.input_size} px")

    disc, gen = build_networks(config, method)
    opt_d = make_optimizer(disc, config)
    opt_g = make_optimizer(gen, config) if gen is not None else None
    ema = EmaState.from_module(disc, config.ema_decay)
    losses: list[EpochLoss] = []

    ckpt = _latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        tensors, meta = load_container(ckpt)
        if meta["method"] != method or TrainConfig.from_dict(meta["config"]) != config:
            raise ValueError(f"checkpoint {ckpt} was written by a different method/config")
        _load_state(disc, _strip(tensors, "d"))
        _load_optimizer(opt_d, "opt_d", [n for n, _ in disc.named_parameters()], tensors)
        if gen is not None:
            _load_state(gen, _strip(tensors, "g"))
            _load_optimizer(opt_g, "opt_g", [n for n, _ in gen.named_parameters()], tensors)
        ema = EmaState(_strip(tensors, "ema"), meta["ema_decay"], meta["ema_update_count"])
        losses = [EpochLoss(**r) for r in meta["losses"]]
        log.info("resuming %s from %s at epoch %d", run_dir, ckpt.name, len(losses))

    with open(run_dir / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    with open(run_dir / "subset.json", "w") as fh:
        json.dump(subset.to_json(), fh, indent=2)

    x_all = torch.from_numpy(np.ascontiguousarray(dataset.pixels.transpose(0, 3, 1, 2)))
    y_all = torch.from_numpy(dataset.labels)
    labeled = _LabeledSampler(dataset.indices_for(subset.labeled_ids), dataset.labels,
                              config.balanced_labeled)
    pool = dataset.indices_for(list(subset.labeled_ids) + list(subset.unlabeled_ids))
    if not len(pool):
        raise ValueError("no training patches")
    b = config.batch_size
    steps = max(1, len(pool) // b)
    low_data = len(subset.labeled_ids) < 2 or not labeled.balanced
    if low_data:
        log.warning("low-data run: %d labeled images, both classes present: %s",
                    len(subset.labeled_ids), labeled.balanced)
    seeds = {"master": config.seed, "init_d": derive_seed(config.seed, "init_d")}
    if gen is not None:
        seeds["init_g"] = derive_seed(config.seed, "init_g")

    def meta() -> dict[str, Any]:
        return {"method": method, "config": config.to_dict(), "epoch": len(losses),
                "losses": [dataclasses.asdict(r) for r in losses], "subset": subset.to_json(),
                "low_data": low_data, "seeds": seeds}

    last = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(len(losses), last):
        rng = rng_for(config.seed, "epoch", epoch)
        tgen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        lr = lr_at(epoch, config)
        order = rng.permutation(len(pool)) if len(pool) >= b else None
        totals = np.zeros(3)
        for step in range(steps):
            if order is not None:
                u_idx = pool[order[step * b:(step + 1) * b]]
            else:
                u_idx = pool[rng.integers(len(pool), size=b)]
            l_idx = labeled.draw(rng, b)
            x_l = augment(x_all[l_idx], tgen, config)
            y_l = y_all[l_idx]
            if method == "ssl":
                x_u = augment(x_all[u_idx], tgen, config)
                z = sample_latent(b, tgen, config.latent_dim)
                ema, bundle = train_step_ssl(disc, gen, opt_d, opt_g, ema, (x_l, y_l), x_u, z,
                                             lr, tgen)
            else:
                ema, bundle = train_step_supervised(disc, opt_d, ema, x_l, y_l, lr, tgen)
            totals += (bundle.l_supervised, bundle.l_unsupervised, bundle.l_g)
        rec = EpochLoss(epoch, *(float(v) for v in totals / steps), lr)
        if not rec.finite():
            log.warning("non-finite loss at epoch %d: %s", epoch, rec)
        losses.append(rec)
        done = epoch + 1
        if done % config.checkpoint_every == 0 or done in (config.epochs, last):
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{done}.ckpt", disc, ema, opt_d,
                            gen, opt_g, meta())
            _write_losses(run_dir / "losses.csv", losses)

    if len(losses) == config.epochs:
        save_checkpoint(run_dir / "final.ckpt", disc, ema, opt_d, gen, opt_g, meta())
    _write_losses(run_dir / "losses.csv", losses)
    return TrainRun(run_dir, config, method, losses, disc, ema, gen, subset, low_data, seeds)


def train_ssl(config: TrainConfig, dataset: PatchDataset, subset: LabeledSubset,
              run_dir: str | os.PathLike, resume: bool = False,
              stop_after: int | None = None) -> TrainRun:
    """Semi-supervised GAN training; the unsupervised pool is every training patch.

    ``stop_after`` ends the run early after that many epochs (for resumable,
    interrupted runs); the final checkpoint is only written on completion.
    """
    return _train("ssl", config, dataset, subset, run_dir, resume, stop_after)


def train_baseline(config: TrainConfig, dataset: PatchDataset, subset: LabeledSubset,
                   run_dir: str | os.PathLike, resume: bool = False,
                   stop_after: int | None = None) -> TrainRun:
    """ConvNet baseline: same discriminator, supervised loss on labeled patches only.

    Runs the same number of steps per epoch as the SSL loop so both methods
    get an equal optimisation budget.
    """
    return _train("convnet", config, dataset, subset, run_dir, resume, stop_after)


def train(method: str, config: TrainConfig, dataset: PatchDataset, subset: LabeledSubset,
          run_dir: str | os.PathLike, resume: bool = False) -> TrainRun:
    return _train(method, config, dataset, subset, run_dir, resume)
