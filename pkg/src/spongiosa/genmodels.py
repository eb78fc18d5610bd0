"""Progressively growing 3-D generator and critic, plus the checkpoint container.

Stage ``s`` works at ``4 * 2**s`` voxels per side. Networks are built at
stage 0 and grown one stage at a time; growing appends a block and an
output (generator) or input (critic) head and resets ``alpha`` to 0 so the
new path fades in.

Checkpoint archive layout (zip, stored uncompressed)::

    metadata.json   UTF-8 JSON: format_version, stage, alpha, widths,
                    latent_dim, variant, epoch, config, config_hash,
                    param_counts, optimizer param_groups
    tensors.bin     flat table-of-contents tensor file, see below

``tensors.bin`` is little-endian::

    b"STEN"  u32 version (=1)  u32 entry count
    per entry: u16 name length, name (UTF-8), u8 dtype code
               (1 float32, 2 float64, 3 int64), u8 ndim, ndim x u32 dims,
               u64 offset from start of data section, u64 byte length
    data section: raw tensor bytes in entry order, C order

Tensor names carry a prefix: ``generator.``, ``critic.``, ``ema.``,
``opt_g.state.<i>.<key>`` and ``opt_d.state.<i>.<key>``.
"""
from __future__ import annotations

import io
import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LATENT_DIM = 32
# channels per stage, coarse (4³) to fine; the fifth entry only serves 64³ runs
DEFAULT_WIDTHS = (32, 32, 32, 16, 8)
MAX_STAGE = 3
CHECKPOINT_FORMAT_VERSION = 1

_TENSOR_MAGIC = b"STEN"
_DTYPE_CODES = {torch.float32: 1, torch.float64: 2, torch.int64: 3}
_CODE_DTYPES = {1: ("<f4", torch.float32), 2: ("<f8", torch.float64), 3: ("<i8", torch.int64)}


def resolution(stage: int) -> int:
    return 4 * 2 ** stage


@dataclass
class StageConfig:
    stage: int = 0
    blend_alpha: float = 1.0
    widths: tuple = DEFAULT_WIDTHS
    max_stage: int = MAX_STAGE

    def __post_init__(self):
        if not 0 <= self.stage <= self.max_stage:
            raise ValueError(f"stage must lie in [0, {self.max_stage}], got {self.stage}")
        if self.max_stage >= len(self.widths):
            raise ValueError("not enough channel widths for max_stage")
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError("blend_alpha must lie in [0, 1]")

    @property
    def resolution(self) -> int:
        return resolution(self.stage)


def sample_latent(rng=None, n: Optional[int] = None, dim: int = LATENT_DIM) -> np.ndarray:
    """Uniform draw(s) on the unit sphere in ``dim`` dimensions."""
    rng = np.random.default_rng(rng)
    z = rng.standard_normal((1 if n is None else n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z[0] if n is None else z


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Scale every location's channel vector (axis 1) to unit RMS."""
    return x / torch.sqrt(torch.mean(x * x, dim=1, keepdim=True) + eps)


class PixelNorm(nn.Module):
    def forward(self, x):
        return pixel_norm(x)


class EqConv3d(nn.Conv3d):
    """Conv with equalized learning rate: N(0, 1) weights scaled by He's constant at run time."""

    def __init__(self, cin, cout, k, gain=2 ** 0.5):
        super().__init__(cin, cout, k, padding=k // 2)
        nn.init.normal_(self.weight)
        nn.init.zeros_(self.bias)
        self.scale = gain / (cin * k ** 3) ** 0.5

    def forward(self, x):
        return F.conv3d(x, self.weight * self.scale, self.bias, padding=self.padding)


class EqLinear(nn.Linear):
    def __init__(self, cin, cout, gain=2 ** 0.5):
        super().__init__(cin, cout)
        nn.init.normal_(self.weight)
        nn.init.zeros_(self.bias)
        self.scale = gain / cin ** 0.5

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


def _conv(cin, cout, k=3, gain=2 ** 0.5):
    return EqConv3d(cin, cout, k, gain)


def _upsample(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def _build_seeded(seed, fn):
    if seed is None:
        return fn()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


class Generator(nn.Module):
    def __init__(self, stage: int = 0, widths=DEFAULT_WIDTHS, latent_dim: int = LATENT_DIM,
                 max_stage: int = MAX_STAGE, seed: Optional[int] = None):
        super().__init__()
        StageConfig(stage, 1.0, tuple(widths), max_stage)
        self.widths = tuple(widths)
        self.latent_dim = latent_dim
        self.max_stage = max_stage
        self.stage = 0
        self.alpha = 1.0
        c0 = self.widths[0]

        def first():
            project = EqLinear(latent_dim, c0 * 64, gain=2 ** 0.5 / 8)
            block = nn.Sequential(
                _conv(c0, c0), PixelNorm(), nn.LeakyReLU(0.2),
                _conv(c0, c0), PixelNorm(), nn.LeakyReLU(0.2),
            )
            return project, block, _conv(c0, 1, 1, gain=1.0)

        self.project, block, rgb = _build_seeded(seed, first)
        self.blocks = nn.ModuleList([block])
        self.to_rgb = nn.ModuleList([rgb])
        for s in range(stage):
            self.grow(None if seed is None else seed + s + 1)
        self.alpha = 1.0

    def grow(self, seed: Optional[int] = None):
        if self.stage >= self.max_stage:
            raise ValueError(f"cannot grow past stage {self.max_stage}")
        cin, cout = self.widths[self.stage], self.widths[self.stage + 1]

        def build():
            block = nn.Sequential(
                _conv(cin, cout), PixelNorm(), nn.LeakyReLU(0.2),
                _conv(cout, cout), PixelNorm(), nn.LeakyReLU(0.2),
            )
            return block, _conv(cout, 1, 1, gain=1.0)

        block, rgb = _build_seeded(seed, build)
        ref = next(self.parameters())
        self.blocks.append(block.to(ref.device, ref.dtype))
        self.to_rgb.append(rgb.to(ref.device, ref.dtype))
        self.stage += 1
        self.alpha = 0.0
        return self

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.project(z).view(-1, self.widths[0], 4, 4, 4)
        h = F.leaky_relu(pixel_norm(h), 0.2)
        h = self.blocks[0](h)
        prev = h
        for s in range(1, self.stage + 1):
            prev = h
            h = self.blocks[s](_upsample(h))
        out = self.to_rgb[self.stage](h)
        if self.stage > 0 and self.alpha < 1.0:
            skip = _upsample(self.to_rgb[self.stage - 1](prev))
            out = self.alpha * out + (1.0 - self.alpha) * skip
        return torch.tanh(out)


class MinibatchStd(nn.Module):
    """Append the mean per-feature standard deviation over the batch as a channel."""

    def forward(self, x):
        if x.shape[0] < 2:
            std = torch.zeros_like(x[:, :1])
        else:
            std = torch.sqrt(x.var(dim=0, unbiased=False) + 1e-8).mean()
            std = std.expand(x.shape[0], 1, *x.shape[2:])
        return torch.cat([x, std], dim=1)


class Critic(nn.Module):
    """Wasserstein critic; with ``sigmoid_head`` it becomes a classic discriminator."""

    def __init__(self, stage: int = 0, widths=DEFAULT_WIDTHS, max_stage: int = MAX_STAGE,
                 minibatch_std: bool = True, sigmoid_head: bool = False, seed: Optional[int] = None):
        super().__init__()
        StageConfig(stage, 1.0, tuple(widths), max_stage)
        self.widths = tuple(widths)
        self.max_stage = max_stage
        self.sigmoid_head = sigmoid_head
        self.stage = 0
        self.alpha = 1.0
        c0 = self.widths[0]

        def first():
            layers = [MinibatchStd()] if minibatch_std else []
            layers += [
                _conv(c0 + int(minibatch_std), c0), nn.LeakyReLU(0.2),
                nn.Flatten(), EqLinear(c0 * 64, 64), nn.LeakyReLU(0.2), EqLinear(64, 1, gain=1.0),
            ]
            return nn.Sequential(*layers), nn.Sequential(_conv(1, c0, 1), nn.LeakyReLU(0.2))

        block, rgb = _build_seeded(seed, first)
        self.blocks = nn.ModuleList([block])
        self.from_rgb = nn.ModuleList([rgb])
        for s in range(stage):
            self.grow(None if seed is None else seed + s + 1)
        self.alpha = 1.0

    def grow(self, seed: Optional[int] = None):
        if self.stage >= self.max_stage:
            raise ValueError(f"cannot grow past stage {self.max_stage}")
        cout, cin = self.widths[self.stage], self.widths[self.stage + 1]

        def build():
            block = nn.Sequential(
                _conv(cin, cin), nn.LeakyReLU(0.2),
                _conv(cin, cout), nn.LeakyReLU(0.2),
                nn.AvgPool3d(2),
            )
            return block, nn.Sequential(_conv(1, cin, 1), nn.LeakyReLU(0.2))

        block, rgb = _build_seeded(seed, build)
        ref = next(self.parameters())
        self.blocks.append(block.to(ref.device, ref.dtype))
        self.from_rgb.append(rgb.to(ref.device, ref.dtype))
        self.stage += 1
        self.alpha = 0.0
        return self

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        h = self.from_rgb[self.stage](x)
        if self.stage > 0:
            h = self.blocks[self.stage](h)
            if self.alpha < 1.0:
                skip = self.from_rgb[self.stage - 1](F.avg_pool3d(x, 2))
                h = self.alpha * h + (1.0 - self.alpha) * skip
            for s in range(self.stage - 1, 0, -1):
                h = self.blocks[s](h)
        return self.blocks[0](h).view(-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.logits(x)
        return torch.sigmoid(out) if self.sigmoid_head else out


def build_generator(stage, widths=DEFAULT_WIDTHS, seed=None, max_stage=MAX_STAGE) -> Generator:
    stage = stage.stage if isinstance(stage, StageConfig) else stage
    return Generator(stage, widths, max_stage=max_stage, seed=seed)


def build_critic(stage, widths=DEFAULT_WIDTHS, seed=None, max_stage=MAX_STAGE, **kw) -> Critic:
    stage = stage.stage if isinstance(stage, StageConfig) else stage
    return Critic(stage, widths, max_stage=max_stage, seed=seed, **kw)


def grow(network, next_stage: int, seed: Optional[int] = None):
    if next_stage != network.stage + 1:
        raise ValueError(f"can only grow from stage {network.stage} to {network.stage + 1}, not {next_stage}")
    return network.grow(seed)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters() if p.requires_grad)


@dataclass
class Checkpoint:
    generator: dict
    critic: dict
    ema: dict
    stage: int
    alpha: float = 1.0
    widths: tuple = DEFAULT_WIDTHS
    max_stage: int = MAX_STAGE
    latent_dim: int = LATENT_DIM
    variant: str = "pwgan_gp"
    minibatch_std: bool = True
    epoch: int = 0
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    opt_g: Optional[dict] = None
    opt_d: Optional[dict] = None
    param_counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def resolution(self) -> int:
        return resolution(self.stage)

    def make_generator(self, use_ema: bool = True) -> Generator:
        g = Generator(self.stage, self.widths, self.latent_dim, self.max_stage)
        try:
            g.load_state_dict(self.ema if use_ema else self.generator)
        except RuntimeError as exc:
            raise ValueError(f"checkpoint weights do not match stage {self.stage}: {exc}") from None
        g.alpha = self.alpha
        return g.eval()

    def make_critic(self) -> Critic:
        c = Critic(self.stage, self.widths, self.max_stage, minibatch_std=self.minibatch_std,
                   sigmoid_head=self.variant == "gan")
        try:
            c.load_state_dict(self.critic)
        except RuntimeError as exc:
            raise ValueError(f"checkpoint weights do not match stage {self.stage}: {exc}") from None
        c.alpha = self.alpha
        return c


def generate(checkpoint: Checkpoint, z, use_ema: bool = True, stage: Optional[int] = None,
             batch_size: int = 64) -> np.ndarray:
    """Deterministic normalized volumes ``(n, r, r, r)`` for latents ``z`` of shape ``(n, 32)`` or ``(32,)``."""
    if stage is not None and stage != checkpoint.stage:
        raise ValueError(f"checkpoint is at stage {checkpoint.stage}, requested stage {stage}")
    z = np.asarray(z, dtype=np.float32)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != checkpoint.latent_dim:
        raise ValueError(f"latent must have {checkpoint.latent_dim} components")
    norms = np.linalg.norm(z.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise ValueError("latent vectors must have unit norm")
    g = checkpoint.make_generator(use_ema)
    out = []
    with torch.no_grad():
        for i in range(0, len(z), batch_size):
            out.append(g(torch.from_numpy(z[i:i + batch_size]))[:, 0].numpy())
    vols = np.concatenate(out)
    return vols[0] if single else vols


def _flatten_optimizer(prefix, state):
    tensors, groups = {}, None
    if state is None:
        return tensors, groups
    for idx, entry in state["state"].items():
        for key, value in entry.items():
            t = value if torch.is_tensor(value) else torch.tensor(value)
            tensors[f"{prefix}.state.{idx}.{key}"] = t
    groups = state["param_groups"]
    return tensors, groups


def _unflatten_optimizer(prefix, tensors, groups):
    if groups is None:
        return None
    state = {}
    for name, t in tensors.items():
        if name.startswith(prefix + ".state."):
            idx, key = name[len(prefix) + 7:].split(".", 1)
            state.setdefault(int(idx), {})[key] = t
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    return {"state": state, "param_groups": groups}


def write_tensor_table(tensors: dict) -> bytes:
    head = io.BytesIO()
    data = io.BytesIO()
    head.write(_TENSOR_MAGIC)
    head.write(struct.pack("<II", 1, len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_CODES:
            t = t.to(torch.float32) if t.is_floating_point() else t.to(torch.int64)
        np_dtype = _CODE_DTYPES[_DTYPE_CODES[t.dtype]][0]
        raw = t.numpy().astype(np_dtype).tobytes()
        encoded = name.encode()
        head.write(struct.pack("<H", len(encoded)))
        head.write(encoded)
        head.write(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim()))
        head.write(struct.pack(f"<{t.dim()}I", *t.shape))
        head.write(struct.pack("<QQ", data.tell(), len(raw)))
        data.write(raw)
    return head.getvalue() + data.getvalue()


def read_tensor_table(blob: bytes) -> dict:
    if blob[:4] != _TENSOR_MAGIC:
        raise ValueError("bad tensor table magic")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != 1:
        raise ValueError(f"unsupported tensor table version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + n].decode()
        pos += n
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, code, dims, offset, nbytes))
    out = {}
    for name, code, dims, offset, nbytes in entries:
        np_dtype, torch_dtype = _CODE_DTYPES[code]
        raw = blob[pos + offset:pos + offset + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"tensor {name} is truncated")
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(dims)
        out[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomically write a checkpoint archive (temp file, then rename)."""
    tensors = {}
    for prefix, sd in (("generator", ckpt.generator), ("critic", ckpt.critic), ("ema", ckpt.ema)):
        tensors.update({f"{prefix}.{k}": v for k, v in sd.items()})
    opt_g, groups_g = _flatten_optimizer("opt_g", ckpt.opt_g)
    opt_d, groups_d = _flatten_optimizer("opt_d", ckpt.opt_d)
    tensors.update(opt_g)
    tensors.update(opt_d)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": ckpt.stage, "alpha": ckpt.alpha, "widths": list(ckpt.widths),
        "max_stage": ckpt.max_stage, "latent_dim": ckpt.latent_dim, "variant": ckpt.variant,
        "minibatch_std": ckpt.minibatch_std,
        "epoch": ckpt.epoch, "config": ckpt.config, "config_hash": ckpt.config_hash,
        "param_counts": ckpt.param_counts, "extra": ckpt.extra,
        "opt_g_param_groups": groups_g, "opt_d_param_groups": groups_d,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("metadata.json", json.dumps(meta, indent=1, sort_keys=True))
        zf.writestr("tensors.bin", write_tensor_table(tensors))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("metadata.json"))
        tensors = read_tensor_table(zf.read("tensors.bin"))
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")

    def part(prefix):
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    return Checkpoint(
        generator=part("generator"), critic=part("critic"), ema=part("ema"),
        stage=meta["stage"], alpha=meta["alpha"], widths=tuple(meta["widths"]),
        max_stage=meta["max_stage"], latent_dim=meta["latent_dim"], variant=meta["variant"],
        minibatch_std=meta["minibatch_std"], epoch=meta["epoch"], config=meta["config"], config_hash=meta["config_hash"],
        opt_g=_unflatten_optimizer("opt_g", part("opt_g"), meta["opt_g_param_groups"]),
        opt_d=_unflatten_optimizer("opt_d", part("opt_d"), meta["opt_d_param_groups"]),
        param_counts=meta["param_counts"], extra=meta.get("extra", {}),
    )
