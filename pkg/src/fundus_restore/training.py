"""Two-phase adversarial training: generator step with D frozen, then discriminator step."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import config_hash, load_container, read_header, save_container
from .data import augment_pair, crop_patch_pair, item_rng
from .discriminator import Discriminator, DiscriminatorConfig
from .errors import ConfigError, ConfigMismatchError, DataError, NonFiniteError
from .generator import Generator, GeneratorConfig
from .losses import (LossConfig, PerceptionNetwork, adv_loss_D, adv_loss_G, build_perception,
                     charbonnier, edge_loss, fqp_loss, total_loss)

log = logging.getLogger(__name__)

LOG_KEYS = ("charbonnier", "fqp", "edge", "adv_g", "adv_d", "loss_g", "loss_d")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    patch_size: int | None = 128
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 keeps only the final checkpoint
    grad_clip: float | None = None
    augment: bool = True
    perception_seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_final <= self.lr_init:
            raise ConfigError(f"need 0 < lr_final <= lr_init, got {self.lr_final}, {self.lr_init}")
        if self.patch_size is not None and self.patch_size < 1:
            raise ConfigError("patch_size must be positive")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["generator"] = self.generator.to_dict()
        d["discriminator"] = self.discriminator.to_dict()
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        nested = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
                  "loss": LossConfig}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in (d or {}).items():
            if key not in names:
                raise ConfigError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                sub_names = {f.name for f in dataclasses.fields(sub)}
                for k in value or {}:
                    if k not in sub_names:
                        raise ConfigError(f"unknown config key {key}.{k!r}")
                try:
                    value = sub(**(value or {}))
                except TypeError as e:
                    raise ConfigError(f"invalid {key} config: {e}") from None
            kwargs[key] = value
        return cls(**kwargs)

    def model_config(self) -> dict:
        return {"generator": self.generator.to_dict(), "discriminator": self.discriminator.to_dict()}


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return cfg.lr_init
    if step == total_steps:
        return cfg.lr_final
    lr = cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * step / total_steps))
    return min(lr, cfg.lr_init)


def set_deterministic(enabled: bool = True):
    """Single-threaded, deterministic kernels: required for bit-identical reruns."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    total_steps: int
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    best: dict = field(default_factory=dict)

    def payload(self) -> dict:
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "total_steps": self.total_steps,
            "history": self.history,
            "best": self.best,
            "torch_rng": torch.get_rng_state(),
        }


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_init, betas=(cfg.beta1, cfg.beta2),
                            eps=cfg.adam_eps, foreach=False)


def init_state(cfg: TrainConfig, total_steps: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    g = Generator(cfg.generator)
    d = Discriminator(cfg.discriminator)
    return TrainState(cfg, g, d, _adam(g.parameters(), cfg), _adam(d.parameters(), cfg), total_steps)


def save_state(state: TrainState, path):
    return save_container(path, state.payload(), role="train_state",
                          config=state.cfg.model_config(),
                          extra={"train_config": state.cfg.to_dict(), "step": state.step})


def load_state(path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a training state; with ``cfg`` given the model configs must match the checkpoint."""
    payload, header = load_container(path, role="train_state",
                                     expect_config=cfg.model_config() if cfg else None)
    if cfg is None:
        cfg = TrainConfig.from_dict(header["train_config"])
    state = init_state(cfg, payload["total_steps"])
    state.generator.load_state_dict(payload["generator"])
    state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_g.load_state_dict(payload["opt_g"])
    state.opt_d.load_state_dict(payload["opt_d"])
    state.step = payload["step"]
    state.epoch = payload["epoch"]
    state.history = list(payload["history"])
    state.best = dict(payload["best"])
    torch.set_rng_state(payload["torch_rng"])
    return state


def export_generator(generator: Generator, path):
    return save_container(path, {"generator": generator.state_dict()}, role="generator",
                          config={"generator": generator.cfg.to_dict()})


def load_generator(path, expect: GeneratorConfig | None = None) -> Generator:
    """Generator weights from either a generator export or a full training checkpoint.

    With ``expect`` given, a checkpoint made for a different generator config is refused.
    """
    header = read_header(path)
    if header["role"] not in ("generator", "train_state"):
        raise ConfigMismatchError(f"{path} holds a {header['role']!r} checkpoint, not a generator")
    gcfg = GeneratorConfig(**header["config"]["generator"])
    if expect is not None and gcfg != expect:
        raise ConfigMismatchError(
            f"{path} was trained with generator config hash {config_hash(gcfg.to_dict())}, "
            f"expected {config_hash(expect.to_dict())}"
        )
    g = Generator(gcfg)
    payload, _ = load_container(path, expect_config=header["config"])
    g.load_state_dict(payload["generator"])
    g.eval()
    return g


def _first_non_finite(named):
    for name, t in named:
        if not torch.isfinite(t).all():
            return name
    return None


def train_step(batch, state: TrainState, phi: PerceptionNetwork) -> dict:
    """One mini-batch: (i) update G with D fixed, (ii) update D with G fixed."""
    cfg, lcfg = state.cfg, state.cfg.loss
    lq, hq = batch
    G, D = state.generator, state.discriminator
    if not phi.is_frozen():
        raise RuntimeError("perception network parameters must stay frozen")
    lr = lr_schedule(state.step, state.total_steps, cfg)
    for opt in (state.opt_g, state.opt_d):
        for group in opt.param_groups:
            group["lr"] = lr
    ref = hq if cfg.discriminator.paired_input else None

    D.requires_grad_(False)
    restored = G(lq)
    comps = {
        "charbonnier": charbonnier(restored, hq, lcfg.epsilon, lcfg.charbonnier_form),
        "fqp": fqp_loss(restored, hq, phi),
        "edge": edge_loss(restored, hq, lcfg.epsilon, lcfg.laplacian, lcfg.charbonnier_form),
        "adv_g": adv_loss_G(D(restored, ref)),
    }
    loss_g = total_loss({**comps, "adv_d": torch.zeros(())}, lcfg)[0]
    bad = _first_non_finite([("restored", restored), *comps.items(), ("loss_g", loss_g)])
    if bad:
        raise NonFiniteError(f"step {state.step}: {bad} is not finite")
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(G.parameters(), cfg.grad_clip)
    state.opt_g.step()
    D.requires_grad_(True)

    fake = restored.detach()
    comps["adv_d"] = adv_loss_D(D(fake, ref), D(hq, ref))
    loss_d = total_loss(comps, lcfg)[1]
    if not torch.isfinite(loss_d):
        raise NonFiniteError(f"step {state.step}: adv_d is not finite")
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(D.parameters(), cfg.grad_clip)
    state.opt_d.step()

    state.step += 1
    logs = {k: float(v.detach()) for k, v in comps.items()}
    logs.update(loss_g=float(loss_g.detach()), loss_d=float(loss_d.detach()), lr=lr)
    return logs


def make_batch(images, indices, cfg: TrainConfig, epoch: int):
    lqs, hqs = [], []
    for i in indices:
        lq, hq = images[i]
        rng = item_rng(cfg.seed, epoch, int(i))
        if cfg.patch_size is not None:
            lq, hq = crop_patch_pair(lq, hq, cfg.patch_size, rng)
        if cfg.augment:
            lq, hq = augment_pair(lq, hq, rng)
        lqs.append(lq)
        hqs.append(hq)
    to = lambda xs: torch.from_numpy(np.ascontiguousarray(np.stack(xs))).permute(0, 3, 1, 2).float()
    return to(lqs), to(hqs)


def fit(pairs, cfg: TrainConfig, out_dir=None, resume=None, phi: PerceptionNetwork | None = None) -> TrainState:
    """Train on ``pairs`` (iterable of ImagePair, or of (lq, hq) arrays).

    Checkpoints go to ``out_dir/checkpoints`` and one JSON line per step to
    ``out_dir/logs/train.jsonl``. ``resume`` is a checkpoint path to continue from.
    """
    images = [p.load() if hasattr(p, "load") else p for p in pairs]
    if not images:
        raise DataError("training set is empty")
    n = len(images)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if phi is None:
        phi = build_perception(cfg.loss.perception, cfg.loss.perception_path, cfg.perception_seed)
    state = load_state(resume, cfg) if resume else init_state(cfg, total)
    if state.total_steps != total:
        raise ConfigError(f"checkpoint was made for {state.total_steps} total steps, run has {total}")

    out_dir = Path(out_dir) if out_dir else None
    log_file = None
    if out_dir:
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "logs" / "train.jsonl", "a")
    try:
        for epoch in range(state.epoch, cfg.epochs):
            state.epoch = epoch
            order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            for b in range(steps_per_epoch):
                if epoch * steps_per_epoch + b < state.step:
                    continue
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                logs = train_step(make_batch(images, idx, cfg, epoch), state, phi)
                logs = {"step": state.step, "epoch": epoch, **logs}
                state.history.append(logs)
                if log_file:
                    log_file.write(json.dumps(logs) + "\n")
                    log_file.flush()
                if out_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_state(state, out_dir / "checkpoints" / f"step{state.step:07d}.ckpt")
            state.epoch = epoch + 1
        if out_dir:
            save_state(state, out_dir / "checkpoints" / "final.ckpt")
    finally:
        if log_file:
            log_file.close()
    log.info("finished %d steps", state.step)
    return state
