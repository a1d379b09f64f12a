"""The cascaded two-stage counting network.

Three parts share gradients end to end:

* shared stem: 2 conv+PReLU layers feeding both stages;
* count-group prior stage: 4 conv+PReLU layers (max-pools after the first
  two), spatial pyramid pooling to a fixed-length vector, then three FC
  layers scoring the 10 count groups;
* density stage: 4 conv+PReLU layers (pools after the first two, so 1/4
  resolution), channel-concatenated with the prior stage's last conv features
  and refined by 2 conv layers, two stride-2 transposed convolutions that
  restore full resolution, and a linear 1x1 projection to the density map.

All convs use zero "same" padding, so only the pools change spatial dims and
the x4 up/down arithmetic is exact. Inputs must have dims divisible by 4
(see :func:`pad_input`).
"""

import copy
import math
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InputError, NumericError
from .objectives import LossConfig, classification_loss, density_loss, unified_loss

PRELU_SLOPE = 0.25


@dataclass
class NetworkConfig:
    """Layer inventory; (maps, kernel) pairs. Pools sit after the first two
    convs of each stage. ``width_multiplier`` rescales every map count and FC
    width (rounded up) except the class-score and density outputs."""

    shared_convs: tuple = ((16, 9), (32, 7))
    prior_convs: tuple = ((32, 7), (32, 5), (64, 5), (64, 5))
    prior_fc: tuple = (512, 256, 10)
    spp_levels: tuple = (1, 2, 4)
    density_convs: tuple = ((20, 7), (40, 5), (20, 5), (10, 5))
    fusion_convs: tuple = ((24, 3), (32, 3))
    upsample_maps: tuple = (16, 18)
    width_multiplier: float = 1.0
    single_stage: bool = False

    def validate(self):
        for name in ("shared_convs", "prior_convs", "density_convs", "fusion_convs"):
            specs = getattr(self, name)
            if not specs:
                raise ConfigError(f"{name} must not be empty")
            for maps, kernel in specs:
                if maps < 1 or kernel < 1:
                    raise ConfigError(f"{name}: maps and kernel sizes must be positive")
                if kernel % 2 == 0:
                    raise ConfigError(f"{name}: kernel {kernel} is even; same-padding needs odd kernels")
        if len(self.prior_fc) < 2 or any(n < 1 for n in self.prior_fc):
            raise ConfigError(f"prior_fc needs >= 2 positive widths, got {self.prior_fc}")
        if not self.spp_levels or list(self.spp_levels) != sorted(set(self.spp_levels)):
            raise ConfigError(f"spp_levels must be non-empty ascending, got {self.spp_levels}")
        if any(n < 1 for n in self.spp_levels):
            raise ConfigError("spp_levels must be positive")
        if not self.upsample_maps or any(n < 1 for n in self.upsample_maps):
            raise ConfigError(f"upsample_maps must be positive, got {self.upsample_maps}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be > 0, got {self.width_multiplier}")

    def scaled(self, n: int) -> int:
        return max(1, math.ceil(n * self.width_multiplier))

    @property
    def n_groups(self) -> int:
        return self.prior_fc[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        def tup(v):
            return tuple(tuple(x) if isinstance(x, (list, tuple)) else x for x in v)
        kwargs = dict(d)
        for key in ("shared_convs", "prior_convs", "prior_fc", "spp_levels",
                    "density_convs", "fusion_convs", "upsample_maps"):
            if key in kwargs:
                kwargs[key] = tup(kwargs[key])
        return cls(**kwargs)


@dataclass
class ForwardOutputs:
    """Per-batch network outputs; class fields are None for single-stage models."""

    class_scores: torch.Tensor | None
    class_probs: torch.Tensor | None
    density: torch.Tensor
    prior_features: torch.Tensor | None = field(default=None)


def spp_length(channels: int, levels) -> int:
    return channels * sum(n * n for n in levels)


def spp(features, levels) -> torch.Tensor:
    """Spatial pyramid pooling: per level n, max-pool an n x n grid of
    near-equal cells and concatenate. Output length = C * sum(n^2),
    independent of the input's spatial size."""
    t = features if isinstance(features, torch.Tensor) else torch.as_tensor(np.asarray(features))
    squeeze = t.dim() == 3
    if squeeze:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise InputError(f"spp expects (C,H,W) or (B,C,H,W), got shape {tuple(t.shape)}")
    h, w = t.shape[-2:]
    finest = max(levels)
    if h < finest or w < finest:
        raise InputError(f"feature map {h}x{w} smaller than the finest {finest}x{finest} grid")
    parts = [F.adaptive_max_pool2d(t, n).flatten(start_dim=1) for n in levels]
    out = torch.cat(parts, dim=1)
    return out.squeeze(0) if squeeze else out


def pad_input(image: np.ndarray):
    """Zero-pad right/bottom to the next multiple of 4; returns (padded, (h, w)).

    Crop the network's density output back to (h, w) afterwards.
    """
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if h < 16 or w < 16:
        raise InputError(f"input must be at least 16x16, got {h}x{w}")
    nh, nw = -(-h // 4) * 4, -(-w // 4) * 4
    if (nh, nw) == (h, w):
        return image, (h, w)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, nh - h), (0, nw - w)]
    return np.pad(image, pad, mode="constant"), (h, w)


def crop_density(density, dims):
    """Undo pad_input on a density map (trailing two axes)."""
    h, w = dims
    return density[..., :h, :w]


class _ConvStack(nn.Module):
    """Conv+PReLU blocks with 2x2/2 max-pools after selected layers."""

    def __init__(self, in_channels, specs, pool_after=()):
        super().__init__()
        self.convs = nn.ModuleList()
        self.acts = nn.ModuleList()
        self.pool_after = set(pool_after)
        for maps, kernel in specs:
            self.convs.append(nn.Conv2d(in_channels, maps, kernel, padding=kernel // 2))
            self.acts.append(nn.PReLU(init=PRELU_SLOPE))
            in_channels = maps
        self.out_channels = in_channels

    def forward(self, x):
        for i, (conv, act) in enumerate(zip(self.convs, self.acts)):
            x = act(conv(x))
            if i in self.pool_after:
                x = F.max_pool2d(x, 2)
        return x


class CascadedCountingNet(nn.Module):
    """Shared stem + count-group prior stage + density stage with fusion."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        s = cfg.scaled

        shared = [(s(m), k) for m, k in cfg.shared_convs]
        self.shared = _ConvStack(1, shared)

        density = [(s(m), k) for m, k in cfg.density_convs]
        self.density_stage = _ConvStack(self.shared.out_channels, density, pool_after=(0, 1))

        fusion_in = self.density_stage.out_channels
        if not cfg.single_stage:
            prior = [(s(m), k) for m, k in cfg.prior_convs]
            self.prior_stage = _ConvStack(self.shared.out_channels, prior, pool_after=(0, 1))
            fusion_in += self.prior_stage.out_channels

            fc_in = spp_length(self.prior_stage.out_channels, cfg.spp_levels)
            widths = [s(n) for n in cfg.prior_fc[:-1]] + [cfg.n_groups]
            self.prior_fc = nn.ModuleList()
            self.prior_fc_acts = nn.ModuleList()
            for i, width in enumerate(widths):
                self.prior_fc.append(nn.Linear(fc_in, width))
                # final layer emits raw class scores, no activation
                self.prior_fc_acts.append(nn.PReLU(init=PRELU_SLOPE) if i < len(widths) - 1 else nn.Identity())
                fc_in = width

        fusion = [(s(m), k) for m, k in cfg.fusion_convs]
        self.fusion = _ConvStack(fusion_in, fusion)
        if self.fusion.convs[0].in_channels != fusion_in:
            raise ConfigError(
                f"fusion expects {fusion_in} input channels, got {self.fusion.convs[0].in_channels}")

        self.upsample = nn.ModuleList()
        self.upsample_acts = nn.ModuleList()
        up_in = self.fusion.out_channels
        for maps in cfg.upsample_maps:
            self.upsample.append(nn.ConvTranspose2d(up_in, s(maps), 4, stride=2, padding=1))
            self.upsample_acts.append(nn.PReLU(init=PRELU_SLOPE))
            up_in = s(maps)
        self.project = nn.Conv2d(up_in, 1, 1)

    @property
    def spp_dim(self) -> int:
        if self.cfg.single_stage:
            return 0
        return spp_length(self.prior_stage.out_channels, self.cfg.spp_levels)

    def forward(self, x: torch.Tensor) -> ForwardOutputs:
        if x.dim() != 4 or x.shape[1] != 1:
            raise InputError(f"expected a (B,1,H,W) batch, got shape {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise InputError(f"input dims {h}x{w} not divisible by 4; use pad_input first")
        x = x.to(self.project.weight.dtype)

        stem = self.shared(x)
        dens = self.density_stage(stem)

        scores = probs = prior = None
        if not self.cfg.single_stage:
            prior = self.prior_stage(stem)
            vec = spp(prior, self.cfg.spp_levels)
            for fc, act in zip(self.prior_fc, self.prior_fc_acts):
                vec = act(fc(vec))
            scores = vec
            probs = torch.softmax(scores, dim=1)
            fused = torch.cat([dens, prior], dim=1)
        else:
            fused = dens

        fused = self.fusion(fused)
        for up, act in zip(self.upsample, self.upsample_acts):
            fused = act(up(fused))
        density = self.project(fused)
        return ForwardOutputs(class_scores=scores, class_probs=probs,
                              density=density, prior_features=prior)


def _init_tensor(weight: torch.Tensor, fan_in: float, gen: torch.Generator, linear_out: bool):
    # He init adapted to PReLU(0.25); plain 1/sqrt(fan_in) for the linear head
    if linear_out:
        std = 1.0 / math.sqrt(fan_in)
    else:
        std = math.sqrt(2.0 / ((1.0 + PRELU_SLOPE ** 2) * fan_in))
    with torch.no_grad():
        weight.normal_(0.0, std, generator=gen)


def build_model(cfg: NetworkConfig, rng_seed: int = 0) -> CascadedCountingNet:
    """Allocate and deterministically initialize the network.

    Weights are zero-mean Gaussians with std scaled by fan-in, biases zero,
    PReLU slopes 0.25. Identical (cfg, seed) gives bit-identical parameters.
    """
    model = CascadedCountingNet(cfg)
    gen = torch.Generator().manual_seed(rng_seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            _init_tensor(module.weight, fan_in, gen, linear_out=module is model.project)
            with torch.no_grad():
                module.bias.zero_()
        elif isinstance(module, nn.ConvTranspose2d):
            k, s = module.kernel_size[0], module.stride[0]
            fan_in = module.in_channels * k * k / (s * s)
            _init_tensor(module.weight, fan_in, gen, linear_out=False)
            with torch.no_grad():
                module.bias.zero_()
        elif isinstance(module, nn.Linear):
            _init_tensor(module.weight, module.in_features, gen, linear_out=False)
            with torch.no_grad():
                module.bias.zero_()
    return model


def forward(model: CascadedCountingNet, image) -> ForwardOutputs:
    """Run one image (2-D array) or a prepared (B,1,H,W) batch through the net."""
    if isinstance(image, torch.Tensor):
        t = image
    else:
        t = torch.as_tensor(np.asarray(image))
    if t.dim() == 2:
        t = t.unsqueeze(0).unsqueeze(0)
    return model(t)


def check_gradients(model: CascadedCountingNet, image, target_density, target_class,
                    losses: LossConfig | None = None, step: float = 1e-5,
                    samples_per_group: int = 8, seed: int = 0) -> float:
    """Compare autograd gradients of the unified loss against central finite
    differences, in double precision; returns the max relative error over
    parameter groups (weights, biases, and PReLU slopes alike).

    Per group the error is ||g_analytic - g_fd|| / (||g_analytic|| + ||g_fd||)
    over a seeded sample of entries (all entries for small tensors).
    """
    losses = losses or LossConfig()
    losses.validate()
    model = copy.deepcopy(model).double()
    x = torch.as_tensor(np.asarray(image), dtype=torch.float64)
    if x.dim() == 2:
        x = x.unsqueeze(0).unsqueeze(0)
    td = torch.as_tensor(np.asarray(target_density), dtype=torch.float64)
    if td.dim() == 2:
        td = td.unsqueeze(0).unsqueeze(0)
    tc = torch.atleast_1d(torch.as_tensor(target_class, dtype=torch.long))

    def loss_value() -> torch.Tensor:
        out = model(x)
        ld = density_loss(out.density, td, losses.density_loss_normalization)
        if model.cfg.single_stage:
            return ld
        lc = classification_loss(out.class_probs, tc, losses.class_weights)
        return unified_loss(lc, ld, losses.lam)

    model.zero_grad()
    loss_value().backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, param in model.named_parameters():
        grad = param.grad
        if grad is None or not torch.isfinite(grad).all():
            raise NumericError(f"non-finite analytic gradient in parameter group {name}")
        numel = param.numel()
        if numel <= samples_per_group:
            idxs = np.arange(numel)
        else:
            idxs = rng.choice(numel, size=samples_per_group, replace=False)
        flat = param.data.view(-1)
        analytic = np.array([grad.view(-1)[i].item() for i in idxs])
        fd = np.zeros(len(idxs))
        with torch.no_grad():
            for j, i in enumerate(idxs):
                orig = flat[i].item()
                flat[i] = orig + step
                plus = loss_value().item()
                flat[i] = orig - step
                minus = loss_value().item()
                flat[i] = orig
                fd[j] = (plus - minus) / (2.0 * step)
        if not np.all(np.isfinite(fd)):
            raise NumericError(f"non-finite finite-difference gradient in parameter group {name}")
        denom = np.linalg.norm(analytic) + np.linalg.norm(fd)
        if denom > 1e-12:
            worst = max(worst, float(np.linalg.norm(analytic - fd) / denom))
    return worst
