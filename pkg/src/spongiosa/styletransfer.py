"""Latent-space steering toward target micro-structural parameters.

The objective for a latent ``z'`` is::

    mu * ||x_t - G(z')||² + ||w_t - P(G(z'))||²

with ``x_t`` a content volume in [-1, 1] and ``w_t`` a target style vector
(α-weighted BMD, BMD.SD, BVTV*, TMD*). It is minimized with L-BFGS.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .diffmorph import SmoothParams, StyleVectorTransformer, p_vector_normalized
from .genmodels import Checkpoint, Generator, sample_latent
from .morphometry import compute_all
from .volcore import DEFAULT_VOXEL_SIZE_UM, DensityVolume, denormalize_array

DEFAULT_MU = 1e-4
# the literal small value as printed, e^-4
MU_E_MINUS_4 = math.exp(-4)
LATENT_POLICIES = ("sphere", "project_after")


@dataclass
class StyleTarget:
    target_params: np.ndarray
    content: Optional[np.ndarray] = None
    mu: float = DEFAULT_MU

    def __post_init__(self):
        self.target_params = np.asarray(self.target_params, dtype=np.float64)
        if self.target_params.shape != (4,) or not np.all(np.isfinite(self.target_params)):
            raise ValueError("target_params must be a finite 4-vector")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.content is not None:
            self.content = np.asarray(self.content, dtype=np.float64)
            if self.content.min() < -1 or self.content.max() > 1:
                raise ValueError("content volume must lie in [-1, 1]")
        elif self.mu > 0:
            raise ValueError("a content volume is required when mu > 0")


@dataclass
class OptimizeOptions:
    max_iter: int = 500
    history_size: int = 10
    tolerance_grad: float = 1e-6
    tolerance_rel: float = 1e-10
    stall_window: int = 10
    latent_policy: str = "sphere"

    def __post_init__(self):
        if self.latent_policy not in LATENT_POLICIES:
            raise ValueError(f"latent_policy must be one of {LATENT_POLICIES}")


@dataclass
class OptimizeResult:
    z: np.ndarray
    objective: float
    style_residual: float
    content_residual: float
    status: str
    iterations: int
    trace: list = field(default_factory=list)
    objective_before_projection: Optional[float] = None
    start: int = 0


def _double_generator(generator) -> Generator:
    if isinstance(generator, Checkpoint):
        generator = generator.make_generator(use_ema=True)
    g = copy.deepcopy(generator).double().eval()
    for p in g.parameters():
        p.requires_grad_(False)
    return g


def _terms(z_prime, target: StyleTarget, generator, smooth: SmoothParams, policy: str):
    z = z_prime / z_prime.norm() if policy == "sphere" else z_prime
    x = generator(z[None])[0, 0]
    w_t = torch.as_tensor(target.target_params, dtype=x.dtype)
    style = ((w_t - p_vector_normalized(x, smooth)) ** 2).sum()
    if target.content is not None:
        x_t = torch.as_tensor(target.content, dtype=x.dtype)
        if x_t.shape != x.shape:
            raise ValueError(f"content is {tuple(x_t.shape)} but the generator emits {tuple(x.shape)}")
        content = ((x_t - x) ** 2).sum()
    else:
        content = torch.zeros((), dtype=x.dtype)
    return target.mu * content + style, style, content


def style_objective(z_prime, target: StyleTarget, generator, smooth: SmoothParams,
                    latent_policy: str = "sphere"):
    """Objective value and its gradient with respect to ``z_prime``.

    Returns ``(value, gradient, style_term, content_term)`` as floats/arrays.
    ``generator`` should be a float64 module (see :func:`_double_generator`).
    """
    z = torch.as_tensor(np.asarray(z_prime, dtype=np.float64)).requires_grad_(True)
    value, style, content = _terms(z, target, generator, smooth, latent_policy)
    (grad,) = torch.autograd.grad(value, z)
    return value.item(), grad.numpy(), style.item(), content.item()


def optimize_latent(target: StyleTarget, generator, init_z, smooth: SmoothParams,
                    opts: OptimizeOptions = OptimizeOptions()) -> OptimizeResult:
    """Single-start L-BFGS on the style objective.

    The best objective seen is returned, so the result never gets worse than
    the start. The returned latent is on the unit sphere; with the
    ``project_after`` policy the objective is re-evaluated after projection.
    """
    init_z = np.asarray(init_z, dtype=np.float64)
    if abs(np.linalg.norm(init_z) - 1.0) > 1e-5:
        raise ValueError("init_z must have unit norm")
    g = generator if next(generator.parameters()).dtype == torch.float64 else _double_generator(generator)
    v = torch.tensor(init_z, requires_grad=True)
    lbfgs = torch.optim.LBFGS([v], lr=1.0, max_iter=1, history_size=opts.history_size,
                              tolerance_grad=0.0, tolerance_change=0.0, line_search_fn="strong_wolfe")
    policy = opts.latent_policy

    def closure():
        lbfgs.zero_grad()
        value, _, _ = _terms(v, target, g, smooth, policy)
        value.backward()
        return value

    def evaluate():
        value, style, content = _terms(v, target, g, smooth, policy)
        (grad,) = torch.autograd.grad(value, v)
        return value.item(), style.item(), content.item(), grad.abs().max().item()

    value, style, content, gmax = evaluate()
    trace = [{"iter": 0, "objective": value, "style": style, "content": content, "grad_inf": gmax}]
    best = (value, v.detach().clone())
    status = "max_iter"
    if not math.isfinite(value):
        raise FloatingPointError("objective is not finite at the initial latent")
    iterations = 0
    for it in range(1, opts.max_iter + 1):
        if gmax < opts.tolerance_grad:
            status = "converged_grad"
            break
        lbfgs.step(closure)
        iterations = it
        value, style, content, gmax = evaluate()
        trace.append({"iter": it, "objective": value, "style": style, "content": content, "grad_inf": gmax})
        if not math.isfinite(value) or not torch.isfinite(v).all():
            status = "nonfinite_step_rejected"
            with torch.no_grad():
                v.copy_(best[1])
            break
        if value < best[0]:
            best = (value, v.detach().clone())
        if it >= opts.stall_window:
            old = trace[-1 - opts.stall_window]["objective"]
            if old - best[0] <= opts.tolerance_rel * max(abs(old), 1e-300):
                status = "converged_stall"
                break

    with torch.no_grad():
        v.copy_(best[1])
        before = best[0]
        v.div_(v.norm())
    z_final = v.detach().numpy().copy()
    value, style, content = (float(t) for t in _terms(v.detach(), target, g, smooth, "sphere"))
    return OptimizeResult(
        z=z_final, objective=value, style_residual=math.sqrt(style), content_residual=math.sqrt(content),
        status=status, iterations=iterations, trace=trace, objective_before_projection=before,
    )


def optimize_multistart(target: StyleTarget, generator, smooth: SmoothParams, init_z=None,
                        n_starts: int = 4, random_state=None,
                        opts: OptimizeOptions = OptimizeOptions()) -> OptimizeResult:
    """Run :func:`optimize_latent` from ``n_starts`` latents and keep the best.

    ``init_z`` (typically the content latent) is the first start; the rest are
    drawn from ``random_state``.
    """
    g = _double_generator(generator)
    rng = np.random.default_rng(random_state)
    starts = [] if init_z is None else [np.asarray(init_z, dtype=np.float64)]
    while len(starts) < n_starts:
        starts.append(sample_latent(rng))
    best = None
    for i, z0 in enumerate(starts):
        res = optimize_latent(target, g, z0, smooth, opts)
        res.start = i
        if best is None or res.objective < best.objective:
            best = res
        if best.objective == 0.0:
            break
    return best


@dataclass
class TreatmentPreset:
    """Effect trajectory per parameter over months.

    ``effects`` maps a parameter name (``bmd``, ``bmd_sd``, ``bvtv``, ``tmd``)
    to values at ``months``; ``mode`` is ``multiplicative`` or ``additive``
    (physical units). Values are interpolated linearly and held after the
    last month.
    """

    name: str
    months: list
    effects: dict
    mode: str = "multiplicative"
    source: str = ""

    def __post_init__(self):
        if self.mode not in ("multiplicative", "additive"):
            raise ValueError("mode must be multiplicative or additive")
        self.months = [float(m) for m in self.months]
        if not self.months or self.months[0] != 0.0 or any(b <= a for a, b in zip(self.months, self.months[1:])):
            raise ValueError("months must start at 0 and increase strictly")
        identity = 1.0 if self.mode == "multiplicative" else 0.0
        for key, values in self.effects.items():
            if key not in _STYLE_INDEX:
                raise ValueError(f"unknown parameter {key!r} in preset {self.name!r}")
            if len(values) != len(self.months) or not all(math.isfinite(v) for v in values):
                raise ValueError(f"effect table for {key!r} must have one finite value per month")
            if values[0] != identity:
                raise ValueError(f"preset {self.name!r} is not the identity at month 0 for {key!r}")

    def effect(self, key: str, months: float) -> float:
        identity = 1.0 if self.mode == "multiplicative" else 0.0
        if key not in self.effects:
            return identity
        return float(np.interp(months, self.months, self.effects[key]))


_STYLE_INDEX = {"bmd": 0, "bmd_sd": 1, "bvtv": 2, "tmd": 3}


def load_presets(path) -> dict:
    raw = json.loads(Path(path).read_text())
    return {name: TreatmentPreset(name=name, **{k: v for k, v in spec.items() if k != "note"})
            for name, spec in raw["presets"].items()}


def treatment_shift(base_params, preset: TreatmentPreset, months: float, presets: Optional[dict] = None):
    """Apply a preset's effect at ``months`` to raw ⟨BMD, BMD.SD, BVTV, TMD⟩.

    ``preset`` may be a name looked up in ``presets``. Components without an
    effect table are held.
    """
    if isinstance(preset, str):
        if presets is None or preset not in presets:
            raise KeyError(f"unknown preset {preset!r}")
        preset = presets[preset]
    if months < 0:
        raise ValueError("months must be non-negative")
    out = np.array(base_params, dtype=np.float64)
    for key, i in _STYLE_INDEX.items():
        e = preset.effect(key, months)
        out[i] = out[i] * e if preset.mode == "multiplicative" else out[i] + e
    return out


def example_presets_path() -> Path:
    return Path(__file__).parent / "data" / "example_presets.json"


class LatentStyleOptimizer(BaseEstimator):
    """Steer generated samples toward target style vectors.

    ``fit`` derives the style weights (α) from a corpus of normalized patches
    at the generator's resolution; ``transform`` maps target style vectors to
    unit latents.
    """

    def __init__(self, checkpoint=None, mu=DEFAULT_MU, n_starts=4, max_iter=500, history_size=10,
                 latent_policy="sphere", alphas=None, epsilon=1e-4, sigma=10.0, t=225.0,
                 use_ema=True, random_state=0):
        self.checkpoint = checkpoint
        self.mu = mu
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.history_size = history_size
        self.latent_policy = latent_policy
        self.alphas = alphas
        self.epsilon = epsilon
        self.sigma = sigma
        self.t = t
        self.use_ema = use_ema
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.checkpoint is None:
            raise ValueError("a generator checkpoint is required")
        self.style_ = StyleVectorTransformer(self.alphas, self.epsilon, self.sigma, self.t).fit(X)
        self.smooth_params_ = self.style_.smooth_params_
        self.alphas_ = self.style_.alphas_
        self.generator_ = _double_generator(self.checkpoint.make_generator(self.use_ema))
        self.options_ = OptimizeOptions(max_iter=self.max_iter, history_size=self.history_size,
                                        latent_policy=self.latent_policy)
        return self

    def _check(self):
        if not hasattr(self, "generator_"):
            raise ValueError("LatentStyleOptimizer is not fitted")

    def generate(self, z) -> np.ndarray:
        self._check()
        z = torch.as_tensor(np.atleast_2d(np.asarray(z, dtype=np.float64)))
        with torch.no_grad():
            return self.generator_(z)[:, 0].numpy()

    def style_of(self, volumes) -> np.ndarray:
        self._check()
        return self.style_.transform(np.asarray(volumes))

    def optimize(self, w_t, content_z=None, content=None, random_state=None) -> OptimizeResult:
        self._check()
        if content is None and content_z is not None and self.mu > 0:
            content = self.generate(content_z)[0]
        target = StyleTarget(w_t, content if self.mu > 0 else None, self.mu)
        rs = self.random_state if random_state is None else random_state
        return optimize_multistart(target, self.generator_, self.smooth_params_, content_z,
                                   self.n_starts, rs, self.options_)

    def transform(self, W, content_z=None):
        W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        self.results_ = [self.optimize(w, content_z, random_state=(self.random_state, i))
                         for i, w in enumerate(W)]
        return np.stack([r.z for r in self.results_])


def parameter_grid(optimizer: LatentStyleOptimizer, center_z, axes, steps,
                   voxel_size: float = DEFAULT_VOXEL_SIZE_UM, threshold: float = 225.0):
    """Style-transfer grid around a center sample with fixed content.

    ``axes`` are two 4-vectors in style space; cell ``(i, j)`` targets
    ``P(center) + steps[i] * axes[0] + steps[j] * axes[1]``. Each cell
    records its target, achieved smooth and classic parameters, residual and
    status; a failing cell does not stop the grid.
    """
    center_z = np.asarray(center_z, dtype=np.float64)
    center = optimizer.generate(center_z)[0]
    w_center = optimizer.style_of(center[None])[0]
    a1, a2 = (np.asarray(a, dtype=np.float64) for a in axes)
    cells = []
    for i, si in enumerate(steps):
        for j, sj in enumerate(steps):
            w_t = w_center + si * a1 + sj * a2
            cell = {"row": i, "col": j, "step": (float(si), float(sj)), "target": w_t}
            try:
                res = optimizer.optimize(w_t, content_z=center_z, content=center,
                                         random_state=(optimizer.random_state, i, j))
                vol = optimizer.generate(res.z)[0]
                dens = denormalize_array(np.clip(vol, -1, 1))
                cell.update(
                    status=res.status, z=res.z, volume=vol, achieved_style=optimizer.style_of(vol[None])[0],
                    achieved_classic=compute_all(DensityVolume(dens.astype(np.float32), voxel_size), threshold),
                    style_residual=res.style_residual, content_residual=res.content_residual,
                    objective=res.objective,
                )
            except (ValueError, FloatingPointError, RuntimeError) as exc:
                cell.update(status=f"error: {exc}")
            cells.append(cell)
    return cells
