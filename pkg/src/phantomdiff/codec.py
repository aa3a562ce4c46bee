"""Convolutional autoencoder providing the learned latent space.

The encoder downsamples by ``f`` (three stride-2 convolutions for the
default f=8) to ``c`` latent channels; the decoder mirrors it.  After
training, encoded train-set latents are rescaled by a single stored
scalar so their global standard deviation is 1; diffusion operates on the
scaled latents and :meth:`ConvCodec.decode` inverts the scale before
decoding.

The reconstruction objective is plain MSE plus a small pull of each
latent dimension's batch standard deviation toward 1, which keeps every
latent dimension active and within the documented [0.5, 2.0] band after
global scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .phantom import LabeledImage
from .rng import generator, torch_seed


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class CodecTrainConfig:
    iterations: int = 1200
    batch_size: int = 32
    learning_rate: float = 2e-3
    val_every: int = 100
    variance_weight: float = 0.05


class ConvCodec(nn.Module):
    """Small strided conv encoder/decoder pair with a stored latent scale."""

    def __init__(self, spatial_factor: int = 8, latent_channels: int = 4, base_width: int = 32):
        super().__init__()
        if spatial_factor not in (4, 8):
            raise ValueError(f"spatial_factor must be 4 or 8, got {spatial_factor}")
        self.spatial_factor = spatial_factor
        self.latent_channels = latent_channels
        self.base_width = base_width
        self.latent_scale = 1.0

        n_down = int(math.log2(spatial_factor))
        widths = [base_width * (i + 1) for i in range(n_down)]
        enc: list[nn.Module] = [nn.Conv2d(1, widths[0], 3, padding=1), nn.SiLU()]
        for i in range(n_down):
            cin = widths[i]
            cout = widths[min(i + 1, n_down - 1)]
            enc += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(widths[-1], latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1), nn.SiLU()]
        for i in reversed(range(n_down)):
            cin = widths[min(i + 1, n_down - 1)]
            cout = widths[i]
            dec += [nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(widths[0], 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Image(s) in [0, 1] -> scaled latent(s) (c, H/f, W/f)."""
        batched, x = _as_image_batch(image)
        h, w = x.shape[-2], x.shape[-1]
        if h % self.spatial_factor or w % self.spatial_factor:
            raise ValueError(f"image size {h}x{w} not divisible by f={self.spatial_factor}")
        with torch.no_grad():
            z = self.encoder(torch.from_numpy(x).float().unsqueeze(1))
        out = z.double().numpy() * self.latent_scale
        return out if batched else out[0]

    def decode(self, latent: np.ndarray) -> np.ndarray:
        """Scaled latent(s) -> image(s) clamped to [0, 1]."""
        latent = np.asarray(latent, dtype=np.float64)
        batched = latent.ndim == 4
        z = latent if batched else latent[None]
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(
                f"latent must have {self.latent_channels} channels, got shape {latent.shape}"
            )
        with torch.no_grad():
            x = self.decoder(torch.from_numpy(z / self.latent_scale).float())
        out = np.clip(x.double().numpy()[:, 0], 0.0, 1.0)
        return out if batched else out[0]

    def save(self, file: str | Path) -> None:
        arrays = {k: v.detach().numpy() for k, v in self.state_dict().items()}
        arrays["__latent_scale__"] = np.array([self.latent_scale])
        meta = {
            "component": "codec",
            "spatial_factor": self.spatial_factor,
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
        }
        save_checkpoint(file, arrays, meta)

    @staticmethod
    def load(file: str | Path) -> "ConvCodec":
        arrays, meta = load_checkpoint(file)
        if meta.get("component") != "codec":
            raise ValueError(f"{file}: not a codec checkpoint")
        codec = ConvCodec(meta["spatial_factor"], meta["latent_channels"], meta["base_width"])
        scale = float(arrays.pop("__latent_scale__")[0])
        codec.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
        codec.latent_scale = scale
        return codec


def _as_image_batch(image: np.ndarray) -> tuple[bool, np.ndarray]:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return False, arr[None]
    if arr.ndim == 3:
        return True, arr
    raise ValueError(f"expected (H, W) or (B, H, W) image array, got shape {arr.shape}")


def _image_stack(images: list[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])


def train_codec(
    train_images: list[LabeledImage],
    config: CodecTrainConfig | None = None,
    seed: int = 0,
    val_images: list[LabeledImage] | None = None,
    spatial_factor: int = 8,
    latent_channels: int = 4,
    base_width: int = 32,
) -> tuple[ConvCodec, dict]:
    """Train a codec on phantom images; returns (best codec, report).

    Deterministic under (seed, data order).  The returned codec is the
    best-validation checkpoint with the latent scale already calibrated on
    the training set.  The report records the strictly improving
    best-validation MSE sequence.
    """
    if len(train_images) < 64:
        raise ValueError(f"need at least 64 training images, got {len(train_images)}")
    config = config or CodecTrainConfig()
    if val_images is None:
        val_images = train_images[-max(8, len(train_images) // 10) :]

    torch.manual_seed(torch_seed(seed, "codec-init"))
    codec = ConvCodec(spatial_factor, latent_channels, base_width)
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    rng = generator(seed, "codec-train")

    train = torch.from_numpy(_image_stack(train_images)).float().unsqueeze(1)
    val = torch.from_numpy(_image_stack(val_images)).float().unsqueeze(1)

    best_state = None
    best_val = math.inf
    val_curve: list[float] = []
    for iteration in range(config.iterations):
        idx = rng.integers(0, len(train), size=min(config.batch_size, len(train)))
        batch = train[torch.from_numpy(idx)]
        z = codec.encoder(batch)
        recon = codec.decoder(z)
        mse = torch.mean((recon - batch) ** 2)
        dim_std = z.reshape(z.shape[0], -1).std(dim=0, unbiased=False)
        loss = mse + config.variance_weight * torch.mean((dim_std - 1.0) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"codec loss non-finite at iteration {iteration}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if (iteration + 1) % config.val_every == 0 or iteration == config.iterations - 1:
            with torch.no_grad():
                val_mse = float(torch.mean((codec.decoder(codec.encoder(val)) - val) ** 2))
            if val_mse < best_val:
                best_val = val_mse
                best_state = {k: v.detach().clone() for k, v in codec.state_dict().items()}
                val_curve.append(val_mse)

    assert best_state is not None
    codec.load_state_dict(best_state)

    with torch.no_grad():
        latents = codec.encoder(train).double().numpy()
    raw_std = float(latents.std())
    codec.latent_scale = 1.0 / raw_std

    report = {
        "best_val_mse": best_val,
        "best_val_curve": val_curve,
        "raw_latent_std": raw_std,
        "latent_scale": codec.latent_scale,
        "parameter_count": codec.parameter_count(),
    }
    return codec, report
