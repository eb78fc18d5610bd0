"""Progressive WGAN-GP training with critic drift, EMA and baseline variants."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from .datapipe import downsample
from .genmodels import (
    DEFAULT_WIDTHS,
    LATENT_DIM,
    Checkpoint,
    Critic,
    Generator,
    count_parameters,
    generate,
    resolution,
    sample_latent,
    save_checkpoint,
)

log = logging.getLogger(__name__)

VARIANTS = ("pwgan_gp", "wgan_gp", "gan", "wgan_clip")
DEVICE_ENV = "SPONGIOSA_DEVICE"


class ConfigurationError(ValueError):
    pass


def default_device() -> torch.device:
    return torch.device(os.environ.get(DEVICE_ENV, "cpu"))


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    batch_size: int = 16
    n_critic: int = 3
    gp_lambda: float = 10.0
    drift_epsilon: float = 0.001
    epochs_train_per_stage: float = 5.0
    epochs_blend_per_stage: float = 5.0
    ema_decay: float = 0.999
    ema_warmup: bool = True
    stages: int = 4
    variant: str = "pwgan_gp"
    clip_value: float = 0.01
    seed: int = 0
    blend_first: bool = True
    widths: tuple = DEFAULT_WIDTHS
    minibatch_std: bool = True
    diversity_samples: int = 64
    collapse_threshold: float = 0.2
    experimental_64: bool = False

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("learning_rate", "gp_lambda", "clip_value"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.drift_epsilon < 0:
            raise ConfigurationError("drift_epsilon must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.n_critic < 1:
            raise ConfigurationError("batch_size and n_critic must be at least 1")
        if self.epochs_train_per_stage < 0 or self.epochs_blend_per_stage < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if not 0 <= self.ema_decay <= 1:
            raise ConfigurationError("ema_decay must lie in [0, 1]")
        max_stages = 5 if self.experimental_64 else 4
        if not 1 <= self.stages <= max_stages:
            raise ConfigurationError(
                f"stages must lie in [1, {max_stages}]" + ("" if self.experimental_64 else
                                                            " (64³ needs experimental_64)"))
        if len(self.widths) < self.stages:
            raise ConfigurationError("need one channel width per stage")

    @property
    def final_stage(self) -> int:
        return self.stages - 1

    @property
    def progressive(self) -> bool:
        return self.variant == "pwgan_gp"

    def for_variant(self, variant: str) -> "TrainConfig":
        """Same hyperparameters, different method."""
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def epoch_schedule(config: TrainConfig):
    """List of ``(stage, phase, epochs)`` with phase ``"blend"`` or ``"stable"``.

    Progressive runs spend ``epochs_train + epochs_blend`` per stage. With
    ``blend_first`` each new stage fades in first and then stabilizes; stage 0
    has nothing to fade, so its blend budget runs at full strength. Otherwise
    the literal order is used: train at the current stage, then fade in the
    next one; the last stage's blend budget becomes extra training.
    Non-progressive variants train the final stage for the same total.
    """
    et, eb = config.epochs_train_per_stage, config.epochs_blend_per_stage
    last = config.final_stage
    if not config.progressive:
        return [(last, "stable", config.stages * (et + eb))]
    phases = []
    if config.blend_first:
        for s in range(config.stages):
            phases.append((s, "stable" if s == 0 else "blend", eb))
            phases.append((s, "stable", et))
    else:
        phases.append((0, "stable", et))
        for s in range(1, config.stages):
            phases.append((s, "blend", eb))
            phases.append((s, "stable", et))
        phases.append((last, "stable", eb))
    return [p for p in phases if p[2] > 0]


def wasserstein_losses(d_real, d_fake):
    """``(critic_core, gen_core, wasserstein_estimate)`` from critic scores."""
    d_real, d_fake = torch.as_tensor(d_real), torch.as_tensor(d_fake)
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("empty batch")
    critic_core = d_fake.mean() - d_real.mean()
    return critic_core, -d_fake.mean(), -critic_core


def gradient_penalty(critic, real, fake, lam: float = 10.0, generator: Optional[torch.Generator] = None):
    """λ·E[(‖∇D(x̂)‖₂ − 1)²] on per-pair interpolates x̂ = u·x + (1 − u)·x̃."""
    real, fake = torch.as_tensor(real), torch.as_tensor(fake)
    if real.shape != fake.shape:
        raise ValueError(f"batch shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    u = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator,
                   dtype=real.dtype, device=real.device)
    x_hat = (u * real + (1.0 - u) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    if torch.is_tensor(out) and out.requires_grad:
        (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True, allow_unused=True)
    else:
        grad = None
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return lam * ((norms - 1.0) ** 2).mean()


def check_double_backward(critic, sample) -> None:
    """Fail early when the critic cannot be differentiated through its input gradient."""
    try:
        params = [p for p in critic.parameters() if p.requires_grad]
        penalty = gradient_penalty(critic, sample, sample.flip(0))
        grads = torch.autograd.grad(penalty, params, allow_unused=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"critic does not support second-order gradients: {exc}") from None
    if all(g is None for g in grads):
        raise ConfigurationError("gradient penalty does not reach the critic parameters")


def drift_penalty(d_real, epsilon_drift: float = 0.001):
    d_real = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real
    if d_real.numel() == 0:
        raise ValueError("empty batch")
    return epsilon_drift * (d_real * d_real).mean()


@torch.no_grad()
def ema_update(shadow, live, decay: float):
    """shadow ← decay·shadow + (1 − decay)·live for modules or state dicts."""
    s_items = dict(shadow.named_parameters()) if isinstance(shadow, torch.nn.Module) else shadow
    l_items = dict(live.named_parameters()) if isinstance(live, torch.nn.Module) else live
    if s_items.keys() != l_items.keys():
        raise ValueError("shadow and live weights have different tensors")
    for name, s in s_items.items():
        l = l_items[name]
        if s.shape != l.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(l.shape)}")
        s.mul_(decay).add_(l.detach(), alpha=1.0 - decay)
    return shadow


def ema_decay_at(n_updates: int, decay: float, warmup: bool = True) -> float:
    """Decay for the (n+1)-th EMA update; warm-up caps it at (1+n)/(10+n)."""
    return min(decay, (1.0 + n_updates) / (10.0 + n_updates)) if warmup else decay


def baseline_losses(variant: str, d_real, d_fake, from_logits: bool = False):
    """``(critic_loss_core, gen_loss_core)`` for a variant.

    For ``gan`` the scores are sigmoid probabilities (or logits when
    ``from_logits``) and the losses are the log-loss with a non-saturating
    generator term. The Wasserstein variants share the Eq.-1 core; their
    regularizers (penalty, drift, clipping) are applied by the training step.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    d_real, d_fake = torch.as_tensor(d_real, dtype=torch.float64) if not torch.is_tensor(d_real) else d_real, \
        torch.as_tensor(d_fake, dtype=torch.float64) if not torch.is_tensor(d_fake) else d_fake
    if variant == "gan":
        if from_logits:
            critic = F.binary_cross_entropy_with_logits(d_real, torch.ones_like(d_real)) + \
                F.binary_cross_entropy_with_logits(d_fake, torch.zeros_like(d_fake))
            gen = F.binary_cross_entropy_with_logits(d_fake, torch.ones_like(d_fake))
        else:
            critic = F.binary_cross_entropy(d_real, torch.ones_like(d_real)) + \
                F.binary_cross_entropy(d_fake, torch.zeros_like(d_fake))
            gen = F.binary_cross_entropy(d_fake, torch.ones_like(d_fake))
        return critic, gen
    critic_core, gen_core, _ = wasserstein_losses(d_real, d_fake)
    return critic_core, gen_core


@torch.no_grad()
@torch.no_grad()
def clip_weights(network, clip_value: float):
    """Clamp the weights the layers actually apply to [-c, c].

    Equalized layers store unit-scale weights and multiply by ``scale`` at run
    time, so their stored bound is ``c / scale``.
    """
    for module in network.modules():
        scale = getattr(module, "scale", None)
        for name, p in module.named_parameters(recurse=False):
            bound = clip_value / scale if name == "weight" and scale else clip_value
            p.clamp_(-bound, bound)


def mean_pairwise_l2(samples) -> float:
    x = torch.as_tensor(np.asarray(samples), dtype=torch.float64).reshape(len(samples), -1)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    return float(torch.pdist(x).mean())


class MetricsLog:
    """Append-only training records with monotone timestamps."""

    def __init__(self):
        self.records = []
        self._t0 = time.monotonic()

    def append(self, kind: str, **values):
        rec = {"kind": kind, "t": time.monotonic() - self._t0, **values}
        self.records.append(rec)
        return rec

    def of_kind(self, kind: str):
        return [r for r in self.records if r["kind"] == kind]

    def __len__(self):
        return len(self.records)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "MetricsLog":
        m = cls()
        with open(path) as fh:
            m.records = [json.loads(line) for line in fh if line.strip()]
        return m


def _torch_latents(n, generator, device):
    z = torch.randn(n, LATENT_DIM, generator=generator).to(device)
    return z / z.norm(dim=1, keepdim=True)


def _checkpoint(G, D, ema, opt_g, opt_d, config, epoch, extra=None) -> Checkpoint:
    return Checkpoint(
        generator={k: v.detach().cpu().clone() for k, v in G.state_dict().items()},
        critic={k: v.detach().cpu().clone() for k, v in D.state_dict().items()},
        ema={k: v.detach().cpu().clone() for k, v in ema.state_dict().items()},
        stage=G.stage, alpha=float(G.alpha), widths=config.widths, max_stage=G.max_stage,
        variant=config.variant, minibatch_std=config.minibatch_std, epoch=epoch,
        config=config.to_dict(), config_hash=config.config_hash(),
        opt_g=copy.deepcopy(opt_g.state_dict()), opt_d=copy.deepcopy(opt_d.state_dict()),
        param_counts={"generator": count_parameters(G), "critic": count_parameters(D)},
        extra=extra or {},
    )


def train_progressive(patches, config: TrainConfig = TrainConfig(), checkpoint_dir=None,
                      device: Optional[torch.device] = None, max_seconds: Optional[float] = None):
    """Train one variant on normalized cubic patches ``(n, s, s, s)``.

    Returns ``(checkpoints, metrics)``: one checkpoint per finished stage
    (the last one is the final model) and the :class:`MetricsLog`.
    """
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 4 or len(patches) == 0:
        raise ValueError("dataset must be a nonempty (n, s, s, s) array")
    target_res = resolution(config.final_stage)
    data_res = patches.shape[1]
    if len(set(patches.shape[1:])) != 1 or data_res < max(32, target_res) or data_res % target_res:
        raise ValueError(f"dataset patches must be cubic, at least 32³ and a multiple of {target_res}")
    device = device or default_device()
    torch.manual_seed(config.seed)
    tgen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    schedule = epoch_schedule(config)
    start_stage = schedule[0][0]
    max_stage = config.stages - 1
    G = Generator(start_stage, config.widths, max_stage=max_stage, seed=config.seed).to(device)
    D = Critic(start_stage, config.widths, max_stage=max_stage, minibatch_std=config.minibatch_std,
               sigmoid_head=config.variant == "gan", seed=config.seed + 7919).to(device)
    ema = copy.deepcopy(G)
    for p in ema.parameters():
        p.requires_grad_(False)

    def optimizers():
        betas = (config.adam_beta1, config.adam_beta2)
        return (torch.optim.Adam(G.parameters(), config.learning_rate, betas=betas),
                torch.optim.Adam(D.parameters(), config.learning_rate, betas=betas))

    opt_g, opt_d = optimizers()
    metrics = MetricsLog()
    checkpoints = []
    eval_z = _torch_latents(config.diversity_samples, torch.Generator().manual_seed(config.seed + 1), device)
    eval_real_idx = rng.choice(len(patches), size=min(config.diversity_samples, len(patches)), replace=False)
    uses_gp = config.variant in ("pwgan_gp", "wgan_gp")

    steps_per_epoch = max(1, len(patches) // config.batch_size)
    epoch_counter = 0.0
    g_iter = 0
    t_start = time.monotonic()
    stage_real = {}
    checked = False

    for phase_idx, (stage, phase, epochs) in enumerate(schedule):
        while G.stage < stage:
            grow_seed = config.seed + 101 * (G.stage + 1)
            G.grow(grow_seed)
            D.grow(grow_seed + 7919)
            # same seed, so the shadow's new layers start equal to the live ones
            ema.grow(grow_seed)
            for p in ema.parameters():
                p.requires_grad_(False)
            opt_g, opt_d = optimizers()
        if stage not in stage_real:
            stage_real[stage] = torch.from_numpy(
                downsample(patches, data_res // resolution(stage)).astype(np.float32))[:, None]
        real_all = stage_real[stage]
        if uses_gp and not checked:
            check_double_backward(D, real_all[:2].to(device))
            checked = True

        total_steps = max(1, int(round(epochs * steps_per_epoch)))
        fading = phase == "blend" and stage > 0
        order = rng.permutation(len(patches))
        cursor = 0
        critic_since_g = 0
        for step in range(total_steps):
            alpha = step / total_steps if fading else 1.0
            G.alpha = D.alpha = ema.alpha = alpha

            if cursor + config.batch_size > len(order):
                order, cursor = rng.permutation(len(patches)), 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            real = real_all[idx].to(device)
            if fading and alpha < 1.0:
                coarse = F.interpolate(F.avg_pool3d(real, 2), scale_factor=2, mode="nearest")
                real = alpha * real + (1.0 - alpha) * coarse

            z = _torch_latents(len(idx), tgen, device)
            with torch.no_grad():
                fake = G(z)
            rec = {}
            if config.variant == "gan":
                loss_d, _ = baseline_losses("gan", D.logits(real), D.logits(fake), from_logits=True)
                rec["critic_loss"] = float(loss_d.detach())
            else:
                d_real, d_fake = D(real), D(fake)
                core, _, w_est = wasserstein_losses(d_real, d_fake)
                loss_d = core
                rec.update(wasserstein=float(w_est.detach()))
                if uses_gp:
                    gp = gradient_penalty(D, real, fake, config.gp_lambda, tgen)
                    drift = drift_penalty(d_real, config.drift_epsilon)
                    loss_d = loss_d + gp + drift
                    rec.update(gp=float(gp.detach()), drift=float(drift.detach()))
                rec["critic_loss"] = float(loss_d.detach())
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
            if config.variant == "wgan_clip":
                clip_weights(D, config.clip_value)
            critic_since_g += 1

            if critic_since_g == config.n_critic:
                z = _torch_latents(config.batch_size, tgen, device)
                fake = G(z)
                if config.variant == "gan":
                    logits = D.logits(fake)
                    loss_g = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits))
                else:
                    loss_g = -D(fake).mean()
                opt_g.zero_grad(set_to_none=True)
                loss_g.backward()
                opt_g.step()
                ema_update(ema, G, ema_decay_at(g_iter, config.ema_decay, config.ema_warmup))
                g_iter += 1
                metrics.append("iter", stage=stage, phase=phase, alpha=alpha, g_iter=g_iter,
                               critic_updates=critic_since_g, gen_loss=float(loss_g.detach()), **rec)
                critic_since_g = 0

            if (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps:
                frac = ((step % steps_per_epoch) + 1) / steps_per_epoch
                epoch_counter += frac
                _log_diversity(metrics, G, eval_z, real_all[eval_real_idx], config, stage, phase,
                               epoch_counter)
            if max_seconds is not None and time.monotonic() - t_start > max_seconds:
                raise TimeoutError(f"training exceeded {max_seconds} s")

        last_of_stage = phase_idx + 1 == len(schedule) or schedule[phase_idx + 1][0] != stage
        if last_of_stage:
            G.alpha = D.alpha = ema.alpha = 1.0
            ckpt = _checkpoint(G, D, ema, opt_g, opt_d, config, epoch_counter)
            checkpoints.append(ckpt)
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt, Path(checkpoint_dir) / f"stage{stage}.ckpt")
            log.info("stage %d done after %.2f epochs", stage, epoch_counter)
    if checkpoint_dir is not None:
        save_checkpoint(checkpoints[-1], Path(checkpoint_dir) / "final.ckpt")
    return checkpoints, metrics


@torch.no_grad()
def _log_diversity(metrics, G, eval_z, real, config, stage, phase, epoch):
    was_training = G.training
    G.eval()
    fake = G(eval_z)[:, 0].cpu().numpy()
    G.train(was_training)
    gen_div = mean_pairwise_l2(fake)
    real_div = mean_pairwise_l2(real[:, 0].numpy())
    ratio = gen_div / real_div if real_div > 0 else math.inf
    metrics.append("epoch", stage=stage, phase=phase, epoch=epoch, diversity=gen_div,
                   real_diversity=real_div, diversity_ratio=ratio,
                   collapse=bool(ratio < config.collapse_threshold))


def collapse_flag(metrics: MetricsLog) -> bool:
    """Collapse verdict of the last epoch record."""
    epochs = metrics.of_kind("epoch")
    return bool(epochs and epochs[-1]["collapse"])


class ProgressiveWGAN(BaseEstimator):
    """Estimator wrapper around :func:`train_progressive`.

    ``fit`` takes normalized patches ``(n, s, s, s)``; the trained model is
    available as ``checkpoint_`` and through :meth:`sample`.
    """

    def __init__(self, variant="pwgan_gp", stages=4, learning_rate=0.001, adam_beta1=0.0,
                 adam_beta2=0.99, batch_size=16, n_critic=3, gp_lambda=10.0, drift_epsilon=0.001,
                 epochs_train_per_stage=5.0, epochs_blend_per_stage=5.0, ema_decay=0.999,
                 ema_warmup=True, clip_value=0.01, blend_first=True, minibatch_std=True,
                 widths=DEFAULT_WIDTHS, seed=0, checkpoint_dir=None):
        self.variant = variant
        self.stages = stages
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.batch_size = batch_size
        self.n_critic = n_critic
        self.gp_lambda = gp_lambda
        self.drift_epsilon = drift_epsilon
        self.epochs_train_per_stage = epochs_train_per_stage
        self.epochs_blend_per_stage = epochs_blend_per_stage
        self.ema_decay = ema_decay
        self.ema_warmup = ema_warmup
        self.clip_value = clip_value
        self.blend_first = blend_first
        self.minibatch_std = minibatch_std
        self.widths = widths
        self.seed = seed
        self.checkpoint_dir = checkpoint_dir

    def train_config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("checkpoint_dir")
        return TrainConfig(**params)

    def fit(self, X, y=None):
        self.checkpoints_, self.metrics_ = train_progressive(X, self.train_config(), self.checkpoint_dir)
        self.checkpoint_ = self.checkpoints_[-1]
        return self

    def sample(self, n: int, random_state=None, use_ema: bool = True) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise ValueError("ProgressiveWGAN is not fitted")
        return generate(self.checkpoint_, sample_latent(random_state, n), use_ema=use_ema)

    @property
    def collapsed_(self) -> bool:
        return collapse_flag(self.metrics_)
