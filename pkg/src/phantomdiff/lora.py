"""Low-rank adapters: M' = M + (alpha/r) * A B with only A, B trainable.

The adapter math (initialization, lazy forward, merge/unmerge) operates on
float64 numpy matrices; :func:`attach_adapters` mirrors an adapter set
into a denoiser's ``LoraLinear`` layers for training and sampling, and
:func:`extract_adapters` reads it back.  A is Gaussian-initialized and B
starts at zero, so a freshly attached adapter set leaves every forward
pass exactly equal to the base model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codec import ConvCodec
from .denoiser import CondUNet, DenoiserTrainConfig, TrainReport, _TrainingData, run_training
from .phantom import LabeledImage
from .rng import generator
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class LoraAdapter:
    """One low-rank factor pair targeting a named square layer."""

    a: np.ndarray  # (d, r)
    b: np.ndarray  # (r, d)
    rank: int
    alpha: float
    target: str

    def __post_init__(self) -> None:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        d, r = a.shape
        if b.shape != (r, d):
            raise ValueError(f"A is {a.shape} but B is {b.shape}; need (d, r) and (r, d)")
        if r != self.rank:
            raise ValueError(f"rank field {self.rank} does not match factor rank {r}")
        if not 1 <= r <= d // 2:
            raise ValueError(f"rank must satisfy 1 <= r <= d/2, got r={r}, d={d}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_count(self) -> int:
        return 2 * self.dim * self.rank

    def delta(self) -> np.ndarray:
        """The materialized update (alpha/r) * A B."""
        return self.scale * (self.a @ self.b)


AdapterSet = dict[str, LoraAdapter]


def init_adapters(registry: dict[str, int], rank: int, alpha: float, seed: int) -> AdapterSet:
    """Fresh adapters for every registry target: A ~ N(0, 1/sqrt(d)), B = 0."""
    for name, dim in registry.items():
        if not 1 <= rank <= dim // 2:
            raise ValueError(f"rank {rank} too large for layer {name!r} (d={dim})")
    adapters: AdapterSet = {}
    for name in sorted(registry):
        dim = registry[name]
        rng = generator(seed, "lora-init", name)
        a = rng.standard_normal((dim, rank)) / np.sqrt(dim)
        adapters[name] = LoraAdapter(a=a, b=np.zeros((rank, dim)), rank=rank, alpha=alpha, target=name)
    return adapters


def validate_adapter_set(adapters: AdapterSet, registry: dict[str, int]) -> None:
    """Every adapter key must exist in the registry with a matching dimension."""
    for name, adapter in adapters.items():
        if name not in registry:
            raise ValueError(f"adapter targets unknown layer {name!r}")
        if adapter.dim != registry[name]:
            raise ValueError(
                f"adapter for {name!r} has d={adapter.dim}, registry says {registry[name]}"
            )


def trainable_count(adapters: AdapterSet) -> int:
    """Total trainable values: sum over layers of 2 * d * r."""
    return sum(a.trainable_count for a in adapters.values())


def adapted_forward(m: np.ndarray, adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """(M + (alpha/r) A B) x without materializing the merged matrix."""
    m = np.asarray(m, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if m.shape != (adapter.dim, adapter.dim):
        raise ValueError(f"base matrix shape {m.shape} does not match adapter d={adapter.dim}")
    if x.shape[0] != adapter.dim:
        raise ValueError(f"input of length {x.shape[0]} does not match d={adapter.dim}")
    return m @ x + adapter.scale * (adapter.a @ (adapter.b @ x))


def merge(m: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Materialize M' = M + (alpha/r) A B."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (adapter.dim, adapter.dim):
        raise ValueError(f"base matrix shape {m.shape} does not match adapter d={adapter.dim}")
    return m + adapter.delta()


def unmerge(m_prime: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Invert :func:`merge`."""
    m_prime = np.asarray(m_prime, dtype=np.float64)
    if m_prime.shape != (adapter.dim, adapter.dim):
        raise ValueError(f"matrix shape {m_prime.shape} does not match adapter d={adapter.dim}")
    return m_prime - adapter.delta()


def attach_adapters(model: CondUNet, adapters: AdapterSet) -> None:
    """Mirror an adapter set into the model's LoraLinear layers."""
    registry = model.attachment_registry()
    validate_adapter_set(adapters, registry)
    targets = model.adapter_targets()
    for name, adapter in adapters.items():
        targets[name].attach(adapter.a, adapter.b, adapter.scale)


def detach_adapters(model: CondUNet) -> None:
    for layer in model.adapter_targets().values():
        layer.detach_adapter()


def extract_adapters(model: CondUNet, adapters: AdapterSet) -> AdapterSet:
    """Read current adapter factors back out of the model (float64 copies)."""
    targets = model.adapter_targets()
    out: AdapterSet = {}
    for name, adapter in adapters.items():
        layer = targets[name]
        if layer.lora_a is None:
            raise ValueError(f"layer {name!r} has no attached adapter")
        out[name] = LoraAdapter(
            a=layer.lora_a.detach().double().numpy(),
            b=layer.lora_b.detach().double().numpy(),
            rank=adapter.rank,
            alpha=adapter.alpha,
            target=name,
        )
    return out


def finetune_lora(
    model: CondUNet,
    adapters: AdapterSet,
    codec: ConvCodec,
    images: list[LabeledImage],
    schedule: NoiseSchedule,
    config: DenoiserTrainConfig | None = None,
) -> tuple[AdapterSet, TrainReport]:
    """Optimize only the adapter factors; the base model stays frozen.

    The base parameter checksum is taken before and after training; any
    mutation aborts with RuntimeError.  Returns the trained adapters and a
    report whose ``trainable_parameters`` follows the 2*d*r law.
    """
    config = config or DenoiserTrainConfig()
    attach_adapters(model, adapters)
    checksum_before = model.base_checksum()
    for _, p in model.base_parameters():
        p.requires_grad_(False)
    try:
        data = _TrainingData(codec, images)
        params = [
            p for name, p in model.named_parameters() if "lora_" in name and p.requires_grad
        ]
        report = run_training(model, data, schedule, config, params, "lora-train")
        if model.base_checksum() != checksum_before:
            raise RuntimeError("base parameters mutated during adapter fine-tuning")
        report.trainable_parameters = trainable_count(adapters)
        return extract_adapters(model, adapters), report
    finally:
        for _, p in model.base_parameters():
            p.requires_grad_(True)


def save_adapters(file: str | Path, adapters: AdapterSet) -> None:
    """Adapter checkpoint: only A/B pairs plus rank/alpha/target metadata."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"component": "lora", "targets": {}}
    for name in sorted(adapters):
        adapter = adapters[name]
        arrays[f"{name}.a"] = adapter.a
        arrays[f"{name}.b"] = adapter.b
        meta["targets"][name] = {"rank": adapter.rank, "alpha": adapter.alpha}
    save_checkpoint(file, arrays, meta)


def load_adapters(file: str | Path) -> AdapterSet:
    arrays, meta = load_checkpoint(file)
    if meta.get("component") != "lora":
        raise ValueError(f"{file}: not an adapter checkpoint")
    adapters: AdapterSet = {}
    for name, info in meta["targets"].items():
        adapters[name] = LoraAdapter(
            a=arrays[f"{name}.a"].astype(np.float64),
            b=arrays[f"{name}.b"].astype(np.float64),
            rank=info["rank"],
            alpha=info["alpha"],
            target=name,
        )
    return adapters
