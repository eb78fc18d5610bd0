"""Differentiable density statistics and the style vector used for latent steering.

Everything here is written in torch so gradients flow from the parameter
vector back through a generator. Inputs are densities in mg/cm³ unless the
function name says otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .volcore import DEFAULT_HI, DEFAULT_LO

STYLE_NAMES = ("bmd", "bmd_sd", "bvtv_star", "tmd_star")


@dataclass
class SmoothParams:
    epsilon: float = 1e-4
    sigma: float = 10.0
    t: float = 225.0
    alphas: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not np.isfinite(self.t):
            raise ValueError("threshold must be finite")
        alphas = tuple(float(a) for a in self.alphas)
        if len(alphas) != 4 or not all(np.isfinite(a) and a > 0 for a in alphas):
            raise ValueError("alphas must be four finite positive numbers")
        self.alphas = alphas

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "sigma": self.sigma, "t": self.t, "alphas": list(self.alphas)}

    @classmethod
    def from_dict(cls, d: dict) -> "SmoothParams":
        unknown = set(d) - {"epsilon", "sigma", "t", "alphas"}
        if unknown:
            raise ValueError(f"unknown SmoothParams keys: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if k == "alphas" else v) for k, v in d.items()})


def _tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def softplus_eps(a, epsilon: float = 1e-4):
    """ε·ln(1 + exp(a/ε − 1)) + ε without overflow.

    Uses ln(1 + eᵘ) = max(u, 0) + ln(1 + e^−|u|), so large arguments reduce
    to ``a + ε·ln(1 + e^−u)`` analytically.
    """
    a = _tensor(a)
    u = a / epsilon - 1.0
    return epsilon * (torch.clamp(u, min=0.0) + torch.log1p(torch.exp(-torch.abs(u)))) + epsilon


def smooth_heaviside(a, t: float = 225.0, sigma: float = 10.0):
    return torch.sigmoid((_tensor(a) - t) / sigma)


def _flat(x):
    x = _tensor(x)
    if x.numel() == 0:
        raise ValueError("empty volume")
    return x.reshape(*x.shape[:-3], -1) if x.dim() >= 3 else x.reshape(-1)


def bmd(x):
    return _flat(x).mean(dim=-1)


def bmd_sd(x):
    x = _flat(x)
    if x.shape[-1] < 2:
        raise ValueError("bmd_sd needs at least two voxels")
    # centred two-pass form of sqrt((Σx² − (Σx)²/n) / (n − 1))
    centred = x - x.mean(dim=-1, keepdim=True)
    return torch.sqrt((centred * centred).sum(dim=-1) / (x.shape[-1] - 1))


def bvtv_star(x, t: float = 225.0, sigma: float = 10.0):
    return smooth_heaviside(_flat(x), t, sigma).mean(dim=-1)


def tmd_star(x, t: float = 225.0, sigma: float = 10.0, epsilon: float = 1e-4):
    x = _flat(x)
    weights = smooth_heaviside(x, t, sigma)
    return (weights * x).sum(dim=-1) / softplus_eps(weights.sum(dim=-1), epsilon)


def p_vector(x, params: SmoothParams = SmoothParams()):
    """α-weighted ⟨BMD, BMD.SD, BVTV*, TMD*⟩ of a density volume.

    The last three axes are spatial; leading axes are batch axes, so a
    ``(n, s, s, s)`` input gives an ``(n, 4)`` output.
    """
    alphas = torch.as_tensor(params.alphas, dtype=_tensor(x).dtype)
    raw = torch.stack(
        [bmd(x), bmd_sd(x), bvtv_star(x, params.t, params.sigma),
         tmd_star(x, params.t, params.sigma, params.epsilon)],
        dim=-1,
    )
    return raw * alphas


def denormalize_torch(x, lo: float = DEFAULT_LO, hi: float = DEFAULT_HI):
    return (x + 1.0) * 0.5 * (hi - lo) + lo


def p_vector_normalized(x, params: SmoothParams = SmoothParams(), lo=DEFAULT_LO, hi=DEFAULT_HI):
    """:func:`p_vector` of a [-1, 1] volume; denormalization stays in the graph."""
    return p_vector(denormalize_torch(_tensor(x), lo, hi), params)


class StyleVectorTransformer(TransformerMixin, BaseEstimator):
    """Compute style vectors for a batch of normalized volumes.

    ``fit`` sets ``alphas_`` to the reciprocal corpus standard deviation of
    each raw component (unless ``alphas`` is given explicitly), which puts
    the four components on comparable scales.
    """

    def __init__(self, alphas=None, epsilon=1e-4, sigma=10.0, t=225.0, lo=DEFAULT_LO, hi=DEFAULT_HI):
        self.alphas = alphas
        self.epsilon = epsilon
        self.sigma = sigma
        self.t = t
        self.lo = lo
        self.hi = hi

    def _raw(self, X):
        params = SmoothParams(self.epsilon, self.sigma, self.t)
        with torch.no_grad():
            return p_vector_normalized(torch.as_tensor(np.asarray(X, dtype=np.float64)), params,
                                       self.lo, self.hi).numpy()

    def fit(self, X, y=None):
        if self.alphas is not None:
            alphas = np.asarray(self.alphas, dtype=np.float64)
        else:
            sd = self._raw(X).std(axis=0, ddof=1)
            if not np.all(sd > 0):
                raise ValueError("cannot derive alphas: a style component has zero spread")
            alphas = 1.0 / sd
        self.smooth_params_ = SmoothParams(self.epsilon, self.sigma, self.t, tuple(alphas))
        self.alphas_ = np.array(self.smooth_params_.alphas)
        return self

    def transform(self, X):
        if not hasattr(self, "alphas_"):
            raise ValueError("StyleVectorTransformer is not fitted")
        return self._raw(X) * self.alphas_
