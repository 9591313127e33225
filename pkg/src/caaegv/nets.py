"""Network definitions, seeded initialisation and the checkpoint format.

Images are H x W x C arrays at the public boundary and NCHW tensors inside
the modules. Every network ends in a plain linear layer, discriminators
return logits and the ``*_score`` helpers apply the sigmoid.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import N_GROUPS
from .exceptions import BadConfig, CorruptCheckpoint, ShapeMismatch

CHECKPOINT_FORMAT = "caaegv-checkpoint"
CHECKPOINT_VERSION = 1
NETWORK_NAMES = ("encoder", "generator", "dz", "dimg", "fm")


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 64
    n_z: int = 50
    kernel_size: int = 4
    enc_channels: tuple = (16, 32, 64, 128)
    gen_channels: tuple = (128, 64, 32, 16)
    dz_hidden: tuple = (64, 32, 16)
    dimg_channels: tuple = (16, 32, 64, 128)
    fm_channels: tuple = (16, 32, 64, 64)
    tile_l: int = 1
    tile_s: int = 1
    leak: float = 0.2
    fm_seed: int = 0

    def __post_init__(self):
        for name in ("enc_channels", "gen_channels", "dz_hidden", "dimg_channels", "fm_channels"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        self.validate()

    @property
    def n_blocks(self) -> int:
        return len(self.enc_channels)

    @property
    def condition_dim(self) -> int:
        return self.n_z + N_GROUPS * self.tile_l + 2 * self.tile_s

    @property
    def label_channels(self) -> int:
        return N_GROUPS * self.tile_l + 2 * self.tile_s

    def validate(self):
        if self.image_size < 2 or self.n_z < 1:
            raise BadConfig("image_size and n_z must be positive")
        if not self.enc_channels or len(self.gen_channels) != self.n_blocks:
            raise BadConfig("enc_channels and gen_channels must have the same non-zero length")
        if len(self.dimg_channels) < 2 or not self.fm_channels:
            raise BadConfig("dimg_channels needs >= 2 entries and fm_channels >= 1")
        for name, n in (("encoder", self.n_blocks), ("dimg", len(self.dimg_channels)),
                        ("fm", len(self.fm_channels))):
            if self.image_size % (2 ** n):
                raise BadConfig(f"image_size {self.image_size} not divisible by 2**{n} ({name} blocks)")
        if self.kernel_size < 2 or self.kernel_size % 2:
            raise BadConfig("kernel_size must be an even number >= 2")
        if self.tile_l < 1 or self.tile_s < 0:
            raise BadConfig("tile_l must be >= 1 and tile_s >= 0")
        if any(c < 1 for c in (*self.enc_channels, *self.gen_channels, *self.dz_hidden,
                               *self.dimg_channels, *self.fm_channels)):
            raise BadConfig("channel counts must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise BadConfig(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, stride=2, padding=(k - 2) // 2)


def _deconv(cin, cout, k):
    return nn.ConvTranspose2d(cin, cout, k, stride=2, padding=(k - 2) // 2)


class Encoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = (3, *arch.enc_channels)
        self.convs = nn.ModuleList(_conv(a, b, arch.kernel_size) for a, b in zip(chans, chans[1:]))
        side = arch.image_size // 2 ** arch.n_blocks
        self.fc = nn.Linear(chans[-1] * side * side, arch.n_z)
        self.leak = arch.leak

    def forward(self, x):
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), self.leak)
        return torch.tanh(self.fc(x.flatten(1)))


class Generator(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.side = arch.image_size // 2 ** arch.n_blocks
        self.c0 = arch.gen_channels[0]
        self.fc = nn.Linear(arch.condition_dim, self.c0 * self.side * self.side)
        chans = (*arch.gen_channels, 3)
        self.deconvs = nn.ModuleList(_deconv(a, b, arch.kernel_size) for a, b in zip(chans, chans[1:]))
        self.leak = arch.leak

    def forward(self, c):
        h = nn.functional.leaky_relu(self.fc(c), self.leak)
        h = h.view(-1, self.c0, self.side, self.side)
        for i, deconv in enumerate(self.deconvs):
            h = deconv(h)
            if i < len(self.deconvs) - 1:
                h = nn.functional.leaky_relu(h, self.leak)
        return torch.tanh(h)


class DiscriminatorZ(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        dims = (arch.n_z, *arch.dz_hidden)
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))
        self.out = nn.Linear(dims[-1], 1)
        self.leak = arch.leak

    def forward(self, z):
        for layer in self.hidden:
            z = nn.functional.leaky_relu(layer(z), self.leak)
        return self.out(z).squeeze(-1)


class DiscriminatorImg(nn.Module):
    """Image discriminator; age and gender labels enter as constant feature
    planes concatenated after the first convolution."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        k = arch.kernel_size
        chans = arch.dimg_channels
        self.first = _conv(3, chans[0], k)
        ins = (chans[0] + arch.label_channels, *chans[1:-1])
        self.convs = nn.ModuleList(_conv(a, b, k) for a, b in zip(ins, chans[1:]))
        side = arch.image_size // 2 ** len(chans)
        self.fc = nn.Linear(chans[-1] * side * side, 1)
        self.leak = arch.leak

    def forward(self, x, labels):
        h = nn.functional.leaky_relu(self.first(x), self.leak)
        planes = labels[:, :, None, None].expand(-1, -1, h.shape[2], h.shape[3])
        h = torch.cat([h, planes.to(h.dtype)], dim=1)
        for conv in self.convs:
            h = nn.functional.leaky_relu(conv(h), self.leak)
        return self.fc(h.flatten(1)).squeeze(-1)


class FeatureExtractor(nn.Module):
    """Frozen strided conv stack; its last activation is the feature map."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        chans = (3, *arch.fm_channels)
        self.convs = nn.ModuleList(_conv(a, b, arch.kernel_size) for a, b in zip(chans, chans[1:]))
        self.leak = arch.leak

    def forward(self, x):
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), self.leak)
        return x.flatten(1)


class ConvHead(nn.Module):
    """Strided conv stack followed by one linear layer (classifier/embedding)."""

    def __init__(self, image_size: int, channels=(8, 16, 32), out_dim: int = 2, leak: float = 0.2):
        super().__init__()
        if image_size % 2 ** len(channels):
            raise BadConfig(f"image_size {image_size} not divisible by 2**{len(channels)}")
        chans = (3, *channels)
        self.convs = nn.ModuleList(_conv(a, b, 4) for a, b in zip(chans, chans[1:]))
        side = image_size // 2 ** len(channels)
        self.fc = nn.Linear(chans[-1] * side * side, out_dim)
        self.leak = leak

    def forward(self, x):
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), self.leak)
        return self.fc(x.flatten(1))


# ---------------------------------------------------------------------------
# Initialisation


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        # each output pixel receives in_channels * k^2 / stride^2 contributions
        return max(1, w.shape[0] * w.shape[2] * w.shape[3] // (module.stride[0] * module.stride[1]))
    if isinstance(module, nn.Conv2d):
        return w.shape[1] * w.shape[2] * w.shape[3]
    return w.shape[1]


def init_module(module: nn.Module, seed: int, leak: float = 0.2) -> nn.Module:
    """Zero biases and draw weights from N(0, gain^2 / fan_in), seeded."""
    gen = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    gain = math.sqrt(2.0 / (1.0 + leak ** 2))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                std = gain / math.sqrt(_fan_in(m))
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=torch.float64) * std)
                if m.bias is not None:
                    m.bias.zero_()
    return module


class CAAENetworks(nn.Module):
    """The five networks of one model plus its architecture config."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.generator = Generator(arch)
        self.dz = DiscriminatorZ(arch)
        self.dimg = DiscriminatorImg(arch)
        self.fm = FeatureExtractor(arch)
        self.fm.requires_grad_(False)

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in self.state_dict().items())

    def load_arrays(self, arrays) -> "CAAENetworks":
        expected = self.state_dict()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise CorruptCheckpoint(f"array names differ: missing={missing[:3]} extra={extra[:3]}")
        for k, t in expected.items():
            if tuple(arrays[k].shape) != tuple(t.shape):
                raise CorruptCheckpoint(f"{k}: shape {arrays[k].shape} != expected {tuple(t.shape)}")
        self.load_state_dict({k: torch.as_tensor(np.asarray(v)).to(expected[k].dtype)
                              for k, v in arrays.items()})
        return self

    def load_fm_weights(self, arrays) -> None:
        """Replace the feature extractor weights with externally supplied ones."""
        prefixed = {f"fm.{k}" if not k.startswith("fm.") else k: v for k, v in arrays.items()}
        current = self.state_arrays()
        current.update(prefixed)
        self.load_arrays(current)

    def fm_hash(self) -> str:
        return params_hash(self.fm)


def params_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def init_params(arch: ArchConfig, seed: int, dtype=torch.float32) -> CAAENetworks:
    if not isinstance(arch, ArchConfig):
        raise BadConfig(f"expected ArchConfig, got {type(arch).__name__}")
    nets = CAAENetworks(arch).to(torch.float64)
    seeds = np.random.SeedSequence(int(seed)).generate_state(4, dtype=np.uint64)
    for module, s in zip((nets.encoder, nets.generator, nets.dz, nets.dimg), seeds):
        init_module(module, int(s), arch.leak)
    init_module(nets.fm, int(np.random.SeedSequence([int(arch.fm_seed), 0xF3]).generate_state(1)[0]), arch.leak)
    return nets.to(dtype)


# ---------------------------------------------------------------------------
# Array-level forward passes


def _param_dtype(module: nn.Module):
    return next(module.parameters()).dtype


def to_nchw(images, dtype=torch.float32, image_size: int | None = None) -> torch.Tensor:
    """Convert HWC or NHWC images to an NCHW tensor, validating shape."""
    t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeMismatch(f"expected (N,) H x W x 3 images, got shape {tuple(t.shape)}")
    if image_size is not None and tuple(t.shape[1:3]) != (image_size, image_size):
        raise ShapeMismatch(f"expected {image_size}x{image_size} images, got {tuple(t.shape[1:3])}")
    return t.permute(0, 3, 1, 2).to(dtype).contiguous()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


def label_block(groups, sexes, tile_l: int, tile_s: int, dtype=torch.float32) -> torch.Tensor:
    """One-hot age group tiled ``tile_l`` times followed by one-hot sex tiled ``tile_s`` times."""
    groups = torch.as_tensor(np.asarray(groups), dtype=torch.long).reshape(-1)
    sexes = torch.as_tensor(np.asarray(sexes), dtype=torch.long).reshape(-1)
    if groups.shape != sexes.shape:
        raise ShapeMismatch("groups and sexes must have the same length")
    if groups.numel() and (groups.min() < 0 or groups.max() >= N_GROUPS):
        raise ShapeMismatch(f"age group outside [0, {N_GROUPS - 1}]")
    if sexes.numel() and (sexes.min() < 0 or sexes.max() > 1):
        raise ShapeMismatch("sex index must be 0 or 1")
    l = nn.functional.one_hot(groups, N_GROUPS).to(dtype).repeat(1, tile_l)
    s = nn.functional.one_hot(sexes, 2).to(dtype).repeat(1, tile_s)
    return torch.cat([l, s], dim=1)


def build_condition(z, groups, sexes, arch: ArchConfig, dtype=torch.float32) -> torch.Tensor:
    z = torch.as_tensor(np.asarray(z) if not torch.is_tensor(z) else z).to(dtype)
    if z.ndim == 1:
        z = z.unsqueeze(0)
    if z.shape[-1] != arch.n_z:
        raise ShapeMismatch(f"latent code has {z.shape[-1]} dims, expected {arch.n_z}")
    labels = label_block(groups, sexes, arch.tile_l, arch.tile_s, dtype)
    if labels.shape[0] != z.shape[0]:
        raise ShapeMismatch("one (group, sex) pair is needed per latent code")
    return torch.cat([z, labels], dim=1)


def _squeeze_single(arr, single):
    return arr[0] if single else arr


@torch.no_grad()
def encode(nets: CAAENetworks, x) -> np.ndarray:
    single = np.ndim(x) == 3
    t = to_nchw(x, _param_dtype(nets.encoder), nets.arch.image_size)
    return _squeeze_single(nets.encoder(t).cpu().numpy(), single)


@torch.no_grad()
def generate(nets: CAAENetworks, c) -> np.ndarray:
    c = torch.as_tensor(np.asarray(c) if not torch.is_tensor(c) else c)
    single = c.ndim == 1
    c = c.reshape(-1, c.shape[-1]).to(_param_dtype(nets.generator))
    if c.shape[-1] != nets.arch.condition_dim:
        raise ShapeMismatch(f"condition vector has {c.shape[-1]} dims, expected {nets.arch.condition_dim}")
    return _squeeze_single(to_nhwc(nets.generator(c)), single)


@torch.no_grad()
def dz_score(nets: CAAENetworks, z) -> np.ndarray:
    z = torch.as_tensor(np.asarray(z) if not torch.is_tensor(z) else z)
    single = z.ndim == 1
    z = z.reshape(-1, z.shape[-1]).to(_param_dtype(nets.dz))
    if z.shape[-1] != nets.arch.n_z:
        raise ShapeMismatch(f"z has {z.shape[-1]} dims, expected {nets.arch.n_z}")
    return _squeeze_single(torch.sigmoid(nets.dz(z)).cpu().numpy(), single)


@torch.no_grad()
def dimg_logit(nets: CAAENetworks, x, groups, sexes) -> np.ndarray:
    single = np.ndim(x) == 3
    dtype = _param_dtype(nets.dimg)
    t = to_nchw(x, dtype, nets.arch.image_size)
    labels = label_block(groups, sexes, nets.arch.tile_l, nets.arch.tile_s, dtype)
    if labels.shape[0] != t.shape[0]:
        raise ShapeMismatch("one (group, sex) pair is needed per image")
    return _squeeze_single(nets.dimg(t, labels).cpu().numpy(), single)


def dimg_score(nets: CAAENetworks, x, groups, sexes) -> np.ndarray:
    logits = dimg_logit(nets, x, groups, sexes)
    return 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))


@torch.no_grad()
def feature_map(nets: CAAENetworks, x) -> np.ndarray:
    single = np.ndim(x) == 3
    t = to_nchw(x, _param_dtype(nets.fm), nets.arch.image_size)
    return _squeeze_single(nets.fm(t).cpu().numpy(), single)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(nets, path, meta: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = nets.state_arrays() if isinstance(nets, CAAENetworks) else OrderedDict(nets)
    arch = nets.arch.to_dict() if isinstance(nets, CAAENetworks) else (meta or {}).get("arch")
    entries = OrderedDict()
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        entries[name] = {"shape": list(data.shape), "dtype": "f32", "byte_offset": offset}
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "arch": arch, "meta": meta or {}, "arrays": entries}
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_checkpoint(path, arch: ArchConfig | None = None):
    """Read a checkpoint directory; returns ``(arrays, manifest)``.

    When ``arch`` is given, array names and shapes must match what that
    architecture would produce.
    """
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, ValueError) as exc:
        raise CorruptCheckpoint(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT or not isinstance(manifest.get("arrays"), dict):
        raise CorruptCheckpoint(f"{path}: not a {CHECKPOINT_FORMAT} manifest")
    arrays = OrderedDict()
    expected_offset = 0
    for name, entry in manifest["arrays"].items():
        if entry.get("dtype") != "f32":
            raise CorruptCheckpoint(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = int(entry["byte_offset"])
        if start != expected_offset or start + 4 * n > len(blob):
            raise CorruptCheckpoint(f"{name}: byte range outside weights.bin (truncated?)")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(shape).copy()
        expected_offset = start + 4 * n
    if expected_offset != len(blob):
        raise CorruptCheckpoint(f"{path}: weights.bin has {len(blob) - expected_offset} trailing bytes")
    if arch is not None:
        if manifest.get("arch") is not None and manifest["arch"] != arch.to_dict():
            raise CorruptCheckpoint(f"{path}: architecture differs from the requested config")
        CAAENetworks(arch).load_arrays(arrays)
    return arrays, manifest


def load_networks(path, arch: ArchConfig | None = None) -> tuple[CAAENetworks, dict]:
    arrays, manifest = load_checkpoint(path, arch)
    if arch is None:
        if manifest.get("arch") is None:
            raise CorruptCheckpoint(f"{path}: manifest carries no architecture")
        try:
            arch = ArchConfig.from_dict(manifest["arch"])
        except (BadConfig, TypeError) as exc:
            raise CorruptCheckpoint(f"{path}: bad architecture block: {exc}") from exc
    nets = CAAENetworks(arch).load_arrays(arrays)
    return nets, manifest
