"""Conditional denoising network and its training loop.

A two-level U-Net over latents: one residual block at the trained
resolution, a stride-2 downsample, and a middle stack of residual block +
transformer block + residual block at half resolution.  The transformer
block carries the full adapter attachment surface: self-attention and
cross-attention projections (query/key/value/output) plus the two
feed-forward layers, all square ``d x d`` linear maps (d = ``mid_width``).
Prompt tokens are first mapped from the 96-dimensional concatenated
embedding space to ``d`` by a plain (non-adapter) context projection, so
every attachment target stays square.

Training minimizes the noise-prediction MSE weighted by
min(SNR(t), gamma)/SNR(t), with conditioning replaced by the all-zeros
null embedding at the guidance-dropout rate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import ConvCodec, TrainingDivergedError
from .conditioning import COND_DIM, COND_TOKENS, PromptEmbedding, embed_labels
from .phantom import LabeledImage
from .rng import generator, torch_seed
from .schedule import DenoiseFn, NoiseSchedule


@dataclass(frozen=True)
class DenoiserTrainConfig:
    """Hyperparameters of denoiser (and adapter) training."""

    iterations: int = 4000
    batch_size: int = 64
    learning_rate: float = 2e-3
    gamma: float = 5.0  # Min-SNR clamp
    guidance_dropout: float = 0.1
    seed: int = 0
    val_every: int = 200
    val_count: int = 64

    def __post_init__(self) -> None:
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if not 0.0 <= self.guidance_dropout < 1.0:
            raise ValueError("guidance_dropout must be in [0, 1)")


@dataclass
class TrainReport:
    """Bookkeeping returned by the training loops."""

    final_loss: float = math.nan
    val_losses: list[tuple[int, float]] = field(default_factory=list)
    null_cond_uses: int = 0
    trainable_parameters: int = 0
    total_parameters: int = 0


class LoraLinear(nn.Module):
    """Square linear layer with an optional low-rank additive update.

    Holds the frozen-able base map ``y = x W^T + b`` plus, when an adapter
    is attached, the update ``(alpha/r) * x B^T A^T`` with A (d, r) and
    B (r, d).  With B = 0 the forward pass is bit-identical to the base
    layer (the update term is exactly zero).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.base = nn.Linear(dim, dim)
        self.lora_a: nn.Parameter | None = None
        self.lora_b: nn.Parameter | None = None
        self.lora_scale = 1.0

    def attach(self, a: np.ndarray, b: np.ndarray, scale: float) -> None:
        if a.shape[0] != self.dim or b.shape[1] != self.dim or a.shape[1] != b.shape[0]:
            raise ValueError(f"adapter shapes {a.shape}, {b.shape} do not fit dim {self.dim}")
        self.lora_a = nn.Parameter(torch.from_numpy(np.asarray(a, dtype=np.float64)).float())
        self.lora_b = nn.Parameter(torch.from_numpy(np.asarray(b, dtype=np.float64)).float())
        self.lora_scale = float(scale)

    def detach_adapter(self) -> None:
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 1.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.lora_a is not None:
            y = y + self.lora_scale * ((x @ self.lora_b.t()) @ self.lora_a.t())
        return y


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int, max_period: float = 10000.0):
        super().__init__()
        self.dim = dim
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half) / half)
        self.register_buffer("freqs", freqs)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        args = t.float()[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(torch.nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention, and feed-forward over spatial tokens."""

    def __init__(self, dim: int, cond_dim: int = COND_DIM):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.self_q = LoraLinear(dim)
        self.self_k = LoraLinear(dim)
        self.self_v = LoraLinear(dim)
        self.self_out = LoraLinear(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ctx_proj = nn.Linear(cond_dim, dim)  # embedding adapter, not an attachment target
        self.cross_q = LoraLinear(dim)
        self.cross_k = LoraLinear(dim)
        self.cross_v = LoraLinear(dim)
        self.cross_out = LoraLinear(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff1 = LoraLinear(dim)
        self.ff2 = LoraLinear(dim)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        seq = x.reshape(b, c, h * w).transpose(1, 2)
        s = self.norm1(seq)
        seq = seq + self.self_out(_attention(self.self_q(s), self.self_k(s), self.self_v(s)))
        s = self.norm2(seq)
        kv = self.ctx_proj(ctx)
        seq = seq + self.cross_out(_attention(self.cross_q(s), self.cross_k(kv), self.cross_v(kv)))
        s = self.norm3(seq)
        seq = seq + self.ff2(torch.nn.functional.silu(self.ff1(s)))
        return seq.transpose(1, 2).reshape(b, c, h, w)


class CondUNet(nn.Module):
    """Noise predictor eps(z_t, t, cond) over (latent_channels, h, w) latents."""

    def __init__(self, latent_channels: int = 4, base_width: int = 32, time_dim: int = 128):
        super().__init__()
        self.latent_channels = latent_channels
        self.base_width = base_width
        mid = base_width * 2
        self.mid_width = mid
        self.time_embed = SinusoidalTimeEmbedding(64)
        self.time_mlp = nn.Sequential(nn.Linear(64, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.in_conv = nn.Conv2d(latent_channels, base_width, 3, padding=1)
        self.down_block = ResBlock(base_width, base_width, time_dim)
        self.downsample = nn.Conv2d(base_width, mid, 4, stride=2, padding=1)
        self.mid_block1 = ResBlock(mid, mid, time_dim)
        self.mid_attn = TransformerBlock(mid)
        self.mid_block2 = ResBlock(mid, mid, time_dim)
        self.upsample = nn.ConvTranspose2d(mid, base_width, 4, stride=2, padding=1)
        self.up_block = ResBlock(2 * base_width, base_width, time_dim)
        self.out_norm = nn.GroupNorm(8, base_width)
        self.out_conv = nn.Conv2d(base_width, latent_channels, 3, padding=1)

    def forward(self, z: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(self.time_embed(t))
        h1 = self.down_block(self.in_conv(z), temb)
        h2 = self.downsample(h1)
        h2 = self.mid_block1(h2, temb)
        h2 = self.mid_attn(h2, ctx)
        h2 = self.mid_block2(h2, temb)
        h3 = self.upsample(h2)
        h3 = self.up_block(torch.cat([h3, h1], dim=1), temb)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h3)))

    def attachment_registry(self) -> dict[str, int]:
        """Adapter targets: layer name -> square dimension."""
        return {name: mod.dim for name, mod in self.named_modules() if isinstance(mod, LoraLinear)}

    def adapter_targets(self) -> dict[str, LoraLinear]:
        return {name: mod for name, mod in self.named_modules() if isinstance(mod, LoraLinear)}

    def base_parameters(self) -> list[tuple[str, nn.Parameter]]:
        """All parameters except adapter factors."""
        return [(n, p) for n, p in self.named_parameters() if "lora_" not in n]

    def base_checksum(self) -> str:
        """SHA-256 over the base parameter bytes, in name order."""
        digest = hashlib.sha256()
        for name, param in sorted(self.base_parameters()):
            digest.update(name.encode())
            digest.update(param.detach().numpy().tobytes())
        return digest.hexdigest()

    def parameter_count(self) -> int:
        return sum(p.numel() for _, p in self.base_parameters())

    def save(self, file: str | Path) -> None:
        arrays = {
            k: v.detach().numpy() for k, v in self.state_dict().items() if "lora_" not in k
        }
        meta = {
            "component": "denoiser",
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
            "layer_names": sorted(arrays),
        }
        save_checkpoint(file, arrays, meta)

    @staticmethod
    def load(file: str | Path) -> "CondUNet":
        arrays, meta = load_checkpoint(file)
        if meta.get("component") != "denoiser":
            raise ValueError(f"{file}: not a denoiser checkpoint")
        model = CondUNet(meta["latent_channels"], meta["base_width"])
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        return model


def _cond_array(cond: np.ndarray | PromptEmbedding | None, batch: int) -> np.ndarray:
    """Normalize conditioning to a (batch, tokens, dim) float64 array."""
    if cond is None:
        return np.zeros((batch, COND_TOKENS, COND_DIM))
    if isinstance(cond, PromptEmbedding):
        cond = cond.tokens()
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape[-2:] != (COND_TOKENS, COND_DIM):
        raise ValueError(
            f"conditioning must end in shape ({COND_TOKENS}, {COND_DIM}), got {cond.shape}"
        )
    if cond.ndim == 2:
        cond = np.broadcast_to(cond, (batch, COND_TOKENS, COND_DIM))
    elif cond.shape[0] != batch:
        raise ValueError(f"conditioning batch {cond.shape[0]} does not match latent batch {batch}")
    return cond


def predict_noise(
    model: CondUNet, z_t: np.ndarray, t: int, cond: np.ndarray | PromptEmbedding | None
) -> np.ndarray:
    """Deterministic noise prediction; accepts (c, h, w) or (b, c, h, w)."""
    z = np.asarray(z_t, dtype=np.float64)
    batched = z.ndim == 4
    zb = z if batched else z[None]
    cond_arr = _cond_array(cond, zb.shape[0])
    with torch.no_grad():
        out = model(
            torch.from_numpy(zb).float(),
            torch.full((zb.shape[0],), int(t), dtype=torch.int64),
            torch.from_numpy(cond_arr.copy()).float(),
        )
    eps = out.double().numpy()
    return eps if batched else eps[0]


def guided_predict(
    model: CondUNet,
    z_t: np.ndarray,
    t: int,
    cond: np.ndarray | PromptEmbedding,
    guidance_scale: float,
) -> np.ndarray:
    """Classifier-free guidance: eps_u + s * (eps_c - eps_u).

    ``guidance_scale == 1`` short-circuits to the conditional prediction (no
    unconditional evaluation, exact equality).
    """
    if guidance_scale < 1.0:
        raise ValueError(f"guidance_scale must be >= 1, got {guidance_scale}")
    eps_cond = predict_noise(model, z_t, t, cond)
    if guidance_scale == 1.0:
        return eps_cond
    eps_uncond = predict_noise(model, z_t, t, None)
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond)


def make_denoise_fn(model: CondUNet, guidance_scale: float = 1.0) -> DenoiseFn:
    """Wrap a model as the (z, t, cond) -> eps callable used by samplers."""

    def fn(z: np.ndarray, t: int, cond: np.ndarray | None) -> np.ndarray:
        if cond is None or guidance_scale == 1.0:
            return predict_noise(model, z, t, cond)
        return guided_predict(model, z, t, cond, guidance_scale)

    return fn


def weighted_noise_loss(
    model: CondUNet,
    z_t: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    ctx: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    """Per-sample-weighted noise MSE; differentiable for gradient checks."""
    pred = model(z_t, t, ctx)
    per_sample = torch.mean((pred - eps) ** 2, dim=(1, 2, 3))
    return torch.mean(weights * per_sample)


def _minsnr_weights(t: np.ndarray, gamma: float, schedule: NoiseSchedule) -> np.ndarray:
    abar = schedule.alphas_cum[t]
    snr = abar / (1.0 - abar)
    return np.minimum(snr, gamma) / snr


class _TrainingData:
    """Latents and conditioning tokens cached for a training run."""

    def __init__(self, codec: ConvCodec, images: list[LabeledImage]):
        if not images:
            raise ValueError("dataset must be non-empty")
        self.latents = codec.encode(np.stack([im.pixels for im in images]))
        self.cond = np.stack([embed_labels(im.labels).tokens() for im in images])


def run_training(
    model: CondUNet,
    data: _TrainingData,
    schedule: NoiseSchedule,
    config: DenoiserTrainConfig,
    parameters: list[torch.nn.Parameter],
    rng_label: str,
) -> TrainReport:
    """Shared optimization loop for base training and adapter fine-tuning.

    Deterministic under (config.seed, data order): all batch indices,
    timesteps, noise draws, and dropout masks come from one numpy stream,
    and gradient accumulation order is fixed by the batch layout.
    """
    rng = generator(config.seed, rng_label)
    optimizer = torch.optim.Adam(parameters, lr=config.learning_rate)
    n = len(data.latents)
    report = TrainReport(
        trainable_parameters=sum(p.numel() for p in parameters),
        total_parameters=model.parameter_count(),
    )

    # Frozen validation pack: fixed (z0, t, eps, cond), no guidance dropout.
    vrng = generator(config.seed, rng_label, "val")
    vidx = vrng.integers(0, n, size=min(config.val_count, n))
    vt = vrng.integers(1, schedule.n_steps + 1, size=len(vidx))
    veps = vrng.standard_normal((len(vidx), *data.latents.shape[1:]))
    vabar = schedule.alphas_cum[vt][:, None, None, None]
    v_zt = torch.from_numpy(np.sqrt(vabar) * data.latents[vidx] + np.sqrt(1 - vabar) * veps).float()
    v_t = torch.from_numpy(vt)
    v_eps = torch.from_numpy(veps).float()
    v_ctx = torch.from_numpy(data.cond[vidx]).float()
    v_w = torch.from_numpy(_minsnr_weights(vt, config.gamma, schedule)).float()

    def val_loss() -> float:
        with torch.no_grad():
            return float(weighted_noise_loss(model, v_zt, v_t, v_eps, v_ctx, v_w))

    report.val_losses.append((0, val_loss()))
    for iteration in range(config.iterations):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        t = rng.integers(1, schedule.n_steps + 1, size=len(idx))
        eps = rng.standard_normal((len(idx), *data.latents.shape[1:]))
        drop = rng.random(len(idx)) < config.guidance_dropout
        abar = schedule.alphas_cum[t][:, None, None, None]
        z_t = np.sqrt(abar) * data.latents[idx] + np.sqrt(1 - abar) * eps
        cond = data.cond[idx].copy()
        cond[drop] = 0.0
        report.null_cond_uses += int(drop.sum())
        weights = _minsnr_weights(t, config.gamma, schedule)

        loss = weighted_noise_loss(
            model,
            torch.from_numpy(z_t).float(),
            torch.from_numpy(t),
            torch.from_numpy(eps).float(),
            torch.from_numpy(cond).float(),
            torch.from_numpy(weights).float(),
        )
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"denoiser loss non-finite at iteration {iteration}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        report.final_loss = float(loss)
        if (iteration + 1) % config.val_every == 0 or iteration == config.iterations - 1:
            report.val_losses.append((iteration + 1, val_loss()))
    return report


def train_denoiser(
    model: CondUNet,
    codec: ConvCodec,
    images: list[LabeledImage],
    schedule: NoiseSchedule,
    config: DenoiserTrainConfig | None = None,
) -> TrainReport:
    """Train all base parameters of the denoiser on encoded phantoms."""
    config = config or DenoiserTrainConfig()
    data = _TrainingData(codec, images)
    params = [p for _, p in model.base_parameters()]
    return run_training(model, data, schedule, config, params, "denoiser-train")


def new_denoiser(seed: int, latent_channels: int = 4, base_width: int = 32) -> CondUNet:
    """Construct a denoiser with seed-deterministic initialization."""
    torch.manual_seed(torch_seed(seed, "denoiser-init"))
    return CondUNet(latent_channels=latent_channels, base_width=base_width)
