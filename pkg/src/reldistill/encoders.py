"""Feature extractors, classifier heads, checkpoint archive, parameter hashing.

Three encoder families share one contract: forward a (B, C, H, W) float
tensor, get (B, embed_dim) finite embeddings. The embedding is the global
average of the final feature map by default ("gap"), which keeps cosine
relatedness scale-stable across architectures; "flatten" is available for
the classic flattened variant.

All initialization is fan-in-scaled uniform from an explicit seed, so the
same (architecture, input shape, seed) always yields bit-identical
parameters regardless of ambient RNG state.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError

ARCHITECTURES = ("tiny", "convnet4", "resnet12")
POOLINGS = ("gap", "flatten")

CHECKPOINT_FORMAT_VERSION = 1


def _pooled_size(size: int, n_pools: int) -> int:
    for _ in range(n_pools):
        size //= 2
        if size == 0:
            raise ConfigError(
                f"input too small for the pooling pyramid ({n_pools} 2x2 max-pools)"
            )
    return size


class TinyNet(nn.Module):
    """Two conv/relu/pool blocks; no batch norm, so train and eval forward agree."""

    n_pools = 2

    def __init__(self, input_shape: tuple[int, int, int], pooling: str = "gap"):
        super().__init__()
        h, w, in_ch = input_shape
        self.architecture = "tiny"
        self.input_shape = tuple(input_shape)
        self.pooling = pooling
        self.conv1 = nn.Conv2d(in_ch, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1)
        self.pool = nn.MaxPool2d(2)
        self.act = nn.ReLU()
        fh, fw = _pooled_size(h, self.n_pools), _pooled_size(w, self.n_pools)
        self.embed_dim = 32 if pooling == "gap" else 32 * fh * fw

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.act(self.conv1(x)))
        x = self.pool(self.act(self.conv2(x)))
        return x.mean(dim=(2, 3)) if self.pooling == "gap" else x.flatten(1)


class ConvNet4(nn.Module):
    """Four blocks of 3x3 conv (64 channels), batch norm, ReLU, 2x2 max-pool."""

    n_pools = 4
    width = 64

    def __init__(self, input_shape: tuple[int, int, int], pooling: str = "gap"):
        super().__init__()
        h, w, in_ch = input_shape
        self.architecture = "convnet4"
        self.input_shape = tuple(input_shape)
        self.pooling = pooling
        chans = [in_ch, self.width, self.width, self.width, self.width]
        self.blocks = nn.Sequential(
            *(
                nn.Sequential(
                    nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False),
                    nn.BatchNorm2d(chans[i + 1]),
                    nn.ReLU(),
                    nn.MaxPool2d(2),
                )
                for i in range(4)
            )
        )
        fh, fw = _pooled_size(h, self.n_pools), _pooled_size(w, self.n_pools)
        self.embed_dim = self.width if pooling == "gap" else self.width * fh * fw

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.blocks(x)
        return x.mean(dim=(2, 3)) if self.pooling == "gap" else x.flatten(1)


class _ResidualStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv3 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch)
        )
        self.act = nn.LeakyReLU(0.1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.act(self.bn1(self.conv1(x)))
        out = self.act(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        out = self.act(out + self.shortcut(x))
        return self.pool(out)


class ResNet12(nn.Module):
    """Four residual stages (3 convs each), widths 64/160/320/640, stage-end pooling."""

    n_pools = 4
    widths = (64, 160, 320, 640)

    def __init__(self, input_shape: tuple[int, int, int], pooling: str = "gap"):
        super().__init__()
        h, w, in_ch = input_shape
        self.architecture = "resnet12"
        self.input_shape = tuple(input_shape)
        self.pooling = pooling
        chans = [in_ch, *self.widths]
        self.stages = nn.Sequential(
            *(_ResidualStage(chans[i], chans[i + 1]) for i in range(4))
        )
        fh, fw = _pooled_size(h, self.n_pools), _pooled_size(w, self.n_pools)
        self.embed_dim = self.widths[-1] if pooling == "gap" else self.widths[-1] * fh * fw

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stages(x)
        return x.mean(dim=(2, 3)) if self.pooling == "gap" else x.flatten(1)


_ARCH_CLASSES = {"tiny": TinyNet, "convnet4": ConvNet4, "resnet12": ResNet12}


def init_parameters(module: nn.Module, seed: int) -> None:
    """Reinitialize all parameters deterministically: fan-in-scaled uniform
    for conv/linear weights and biases, ones/zeros for batch-norm affines."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight.shape[1:].numel() if m.weight.dim() > 1 else m.weight.shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
                m.reset_running_stats()


def build_encoder(
    architecture: str,
    input_shape: tuple[int, int, int],
    seed: int,
    pooling: str = "gap",
) -> nn.Module:
    if architecture not in _ARCH_CLASSES:
        raise ConfigError(
            f"unknown architecture {architecture!r}, expected one of {ARCHITECTURES}"
        )
    if pooling not in POOLINGS:
        raise ConfigError(f"unknown pooling {pooling!r}, expected one of {POOLINGS}")
    if len(input_shape) != 3:
        raise ConfigError(f"input_shape must be (H, W, channels), got {input_shape!r}")
    model = _ARCH_CLASSES[architecture](tuple(int(v) for v in input_shape), pooling)
    model.init_seed = int(seed)
    init_parameters(model, seed)
    return model


def build_heads(embed_dim: int, n_categories: int, seed: int) -> tuple[nn.Linear, nn.Linear]:
    """Category head over embeddings, rotation head over the category logits.

    The rotation head deliberately consumes the C_base-dim category logits
    rather than the raw features.
    """
    category_head = nn.Linear(embed_dim, n_categories)
    rotation_head = nn.Linear(n_categories, 4)
    init_parameters(category_head, seed)
    init_parameters(rotation_head, seed + 1)
    return category_head, rotation_head


def image_batch(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Channels-last numpy batch -> channels-first torch tensor."""
    if images.ndim == 3:
        images = images[None]
    tensor = torch.from_numpy(np.ascontiguousarray(images)).to(dtype)
    return tensor.permute(0, 3, 1, 2).contiguous()


def embed_images(
    model: nn.Module,
    images: np.ndarray | torch.Tensor,
    per_sample: bool = False,
) -> torch.Tensor:
    """Inference-only embedding helper (eval mode, no gradients).

    With per_sample=True each image goes through its own forward pass, which
    makes the embedding of one sample independent of what else is in the
    batch (CPU conv kernels are not bitwise batch-size-invariant).
    """
    if isinstance(images, np.ndarray):
        dtype = next(model.parameters()).dtype
        images = image_batch(images, dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if per_sample:
                out = torch.cat([model(images[i : i + 1]) for i in range(len(images))])
            else:
                out = model(images)
    finally:
        model.train(was_training)
    return out


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_hash(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers (names, shapes, raw bytes)."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: str | Path,
    encoder: nn.Module,
    heads: dict[str, nn.Linear] | None = None,
    stage: int = 0,
    extra: dict | None = None,
) -> Path:
    """Write a named-array archive: keys ``encoder.<layer>.<param>`` plus one
    ``<head>.<param>`` group per head, and a JSON header with the build info
    needed to reconstruct the modules."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": encoder.architecture,
        "input_shape": list(encoder.input_shape),
        "pooling": encoder.pooling,
        "embed_dim": int(encoder.embed_dim),
        "seed": int(getattr(encoder, "init_seed", 0)),
        "stage": int(stage),
        "heads": sorted(heads) if heads else [],
    }
    if extra:
        header.update(extra)
    arrays: dict[str, np.ndarray] = {
        f"encoder.{k}": v.detach().cpu().numpy() for k, v in encoder.state_dict().items()
    }
    for head_name, head in (heads or {}).items():
        for k, v in head.state_dict().items():
            arrays[f"{head_name}.{k}"] = v.detach().cpu().numpy()
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    np.savez(buffer, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    path.write_bytes(buffer.getvalue())
    return path


class CheckpointBundle:
    def __init__(self, header: dict, encoder: nn.Module, heads: dict[str, nn.Linear]):
        self.header = header
        self.encoder = encoder
        self.heads = heads


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint does not exist: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "__header__" not in arrays:
        raise CheckpointError(f"checkpoint {path} has no header entry")
    header = json.loads(str(arrays.pop("__header__")))

    encoder = build_encoder(
        header["architecture"],
        tuple(header["input_shape"]),
        header.get("seed", 0),
        header.get("pooling", "gap"),
    )
    enc_state = {
        k[len("encoder.") :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith("encoder.")
    }
    try:
        encoder.load_state_dict(enc_state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"incompatible encoder state in {path}: {exc}") from exc

    heads: dict[str, nn.Linear] = {}
    for head_name in header.get("heads", []):
        weight = arrays.get(f"{head_name}.weight")
        bias = arrays.get(f"{head_name}.bias")
        if weight is None or bias is None:
            raise CheckpointError(f"checkpoint {path} missing arrays for head {head_name!r}")
        head = nn.Linear(weight.shape[1], weight.shape[0])
        head.load_state_dict(
            {"weight": torch.from_numpy(weight), "bias": torch.from_numpy(bias)}
        )
        heads[head_name] = head
    return CheckpointBundle(header, encoder, heads)
