"""The five networks: encoder E, generator G, critic/classifier D, identity expert and shape regressor.

All modules consume NCHW float tensors in ``[-1, 1]``. None of them use
dropout or batch statistics, so inference is a pure function of the weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codes import N_ILLUM, AttributeCode, CodeLayout
from .face_model import ContractError, ShapeParams


class CheckpointError(RuntimeError):
    """A checkpoint is missing, malformed or was built for a different spec."""


@dataclass(frozen=True)
class NetworkSpec:
    image_size: int = 32
    base_channels: int = 16
    num_downsamples: int = 3
    num_residual_blocks: int = 2
    d_l: int = 32
    d_id: int = 64
    d_s: int = 16
    d_e: int = 8

    def __post_init__(self):
        if self.image_size not in (8, 16, 32, 64, 112):
            raise ContractError(f"unsupported image size {self.image_size}")
        if self.image_size % (2 ** self.num_downsamples) or \
                self.image_size // 2 ** self.num_downsamples < 4:
            raise ContractError("image_size / 2**num_downsamples must be an integer >= 4")

    @property
    def layout(self) -> CodeLayout:
        return CodeLayout(self.d_l, self.d_id, self.d_s, self.d_e)

    @property
    def bottleneck(self) -> int:
        return self.image_size // 2 ** self.num_downsamples

    @property
    def param_length(self) -> int:
        return 12 + self.d_s + self.d_e

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls(**json.loads(text))


def _check_image(x: torch.Tensor, spec: NetworkSpec):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != spec.image_size or x.shape[3] != spec.image_size:
        raise ContractError(
            f"expected images of shape (B, 3, {spec.image_size}, {spec.image_size}), got {tuple(x.shape)}")


def _conv_trunk(spec: NetworkSpec) -> tuple[nn.Sequential, int]:
    layers, c_in = [], 3
    for i in range(spec.num_downsamples):
        c_out = spec.base_channels * 2 ** i
        layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(0.2)]
        c_in = c_out
    return nn.Sequential(*layers), c_in


class Encoder(nn.Module):
    """Strided conv blocks, global average pool and a linear head producing the latent code."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.trunk, c = _conv_trunk(spec)
        self.head = nn.Linear(c, spec.d_l)

    def forward(self, x):
        _check_image(x, self.spec)
        return self.head(self.trunk(x).mean(dim=(2, 3)))


class FaceExpert(nn.Module):
    """Identity embedder: encoder-shaped trunk with an L2-normalised embedding head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.trunk, c = _conv_trunk(spec)
        self.head = nn.Linear(c, spec.d_id)

    def forward(self, x):
        _check_image(x, self.spec)
        return F.normalize(self.head(self.trunk(x).mean(dim=(2, 3))), dim=1, eps=1e-12)


class _SeparableBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.depthwise = nn.Conv2d(c_in, c_in, 3, stride, 1, groups=c_in)
        self.pointwise = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return F.leaky_relu(self.pointwise(F.leaky_relu(self.depthwise(x), 0.2)), 0.2)


class ShapeRegressor(nn.Module):
    """Light depthwise-separable CNN regressing the flat parameter vector [R, T, a_shape, a_exp]."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        c = max(8, spec.base_channels // 2)
        blocks = [nn.Conv2d(3, c, 3, 1, 1), nn.LeakyReLU(0.2)]
        for _ in range(spec.num_downsamples):
            blocks.append(_SeparableBlock(c, 2 * c, 2))
            c *= 2
        self.trunk = nn.Sequential(*blocks)
        # Pose lives in where features are, so keep the spatial layout.
        self.head = nn.Linear(c * spec.bottleneck ** 2, spec.param_length)

    def forward(self, x):
        _check_image(x, self.spec)
        return self.head(self.trunk(x).flatten(1))


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, 1, 1)
        self.conv2 = nn.Conv2d(c, c, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Generator(nn.Module):
    """Decoder from a flat attribute code to an image.

    The code is linearly projected onto the bottleneck grid and also
    broadcast over it as extra channels, mixed by a 1x1 convolution, refined
    by residual blocks and upsampled by nearest-neighbour doubling plus a 3x3
    convolution. That pairing trains several times faster here than strided
    transposed convolutions and avoids their checkerboard noise.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.code_len = spec.layout.length
        c = spec.base_channels * 2 ** (spec.num_downsamples - 1)
        self.channels = c
        g = spec.bottleneck
        self.project = nn.Linear(self.code_len, c * g * g)
        self.mix = nn.Conv2d(c + self.code_len, c, 1)
        self.res = nn.Sequential(*[_ResBlock(c) for _ in range(spec.num_residual_blocks)])
        ups = []
        for _ in range(spec.num_downsamples):
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(c, c // 2, 3, 1, 1), nn.ReLU()]
            c //= 2
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(c, 3, 3, 1, 1)

    def forward(self, code):
        if code.ndim != 2 or code.shape[1] != self.code_len:
            raise ContractError(f"expected codes of shape (B, {self.code_len}), got {tuple(code.shape)}")
        g = self.spec.bottleneck
        h = F.relu(self.project(code)).view(-1, self.channels, g, g)
        tiled = code[:, :, None, None].expand(-1, -1, g, g)
        h = F.relu(self.mix(torch.cat([h, tiled], dim=1)))
        h = self.up(self.res(h))
        return torch.tanh(self.out(h))


class Discriminator(nn.Module):
    """Unnormalised strided conv critic with a source score head and a 14-way lighting head."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.trunk, c = _conv_trunk(spec)
        flat = c * spec.bottleneck ** 2
        self.src = nn.Linear(flat, 1)
        self.cls = nn.Linear(flat, N_ILLUM)

    def forward(self, x):
        _check_image(x, self.spec)
        h = self.trunk(x).flatten(1)
        return self.src(h).squeeze(1), self.cls(h)


NETWORKS = {"E": Encoder, "G": Generator, "D": Discriminator, "FEM": FaceExpert, "FSR": ShapeRegressor}


def build(kind: str, spec: NetworkSpec, seed: int = 0) -> nn.Module:
    """Construct a network with seeded initial weights."""
    if kind not in NETWORKS:
        raise ContractError(f"unknown network kind {kind!r}")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = NETWORKS[kind](spec)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def save_checkpoint(net: nn.Module, path) -> None:
    """One ``.npz`` archive: named weight arrays plus the spec and kind as JSON."""
    kind = next(k for k, cls in NETWORKS.items() if type(net) is cls)
    arrays = {f"w/{k}": v.detach().cpu().numpy() for k, v in net.state_dict().items()}
    header = json.dumps({"kind": kind, "spec": json.loads(net.spec.to_json())}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(header), **arrays)


def load_checkpoint(path, expected_spec: NetworkSpec | None = None, kind: str | None = None) -> nn.Module:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            weights = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("w/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    spec = NetworkSpec(**header["spec"])
    if expected_spec is not None and spec.to_json() != expected_spec.to_json():
        raise CheckpointError(f"{path}: spec {spec} does not match expected {expected_spec}")
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: holds a {header['kind']} network, expected {kind}")
    net = NETWORKS[header["kind"]](spec)
    try:
        net.load_state_dict(weights)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit the spec: {exc}") from exc
    return net


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
        p.grad = None
    return net


def to_nchw(images) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays to a float32 (B, 3, H, W) tensor."""
    arr = torch.as_tensor(np.asarray(images, dtype=np.float32))
    if arr.ndim == 3:
        arr = arr[None]
    return arr.permute(0, 3, 1, 2).contiguous()


def to_hwc(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).cpu().numpy()


@torch.no_grad()
def encode(E: Encoder, x) -> np.ndarray:
    return E(to_nchw(x))[0].double().numpy()


@torch.no_grad()
def generate(G: Generator, f) -> np.ndarray:
    if isinstance(f, AttributeCode):
        f = f.flatten()
    code = torch.as_tensor(np.asarray(f, dtype=np.float32)).reshape(1, -1)
    return to_hwc(G(code))[0]


@torch.no_grad()
def discriminate(D: Discriminator, x) -> tuple[float, np.ndarray]:
    src, cls = D(to_nchw(x))
    return float(src[0]), cls[0].double().numpy()


@torch.no_grad()
def embed_identity(FEM: FaceExpert, x) -> np.ndarray:
    return FEM(to_nchw(x))[0].double().numpy()


@torch.no_grad()
def regress_shape(FSR: ShapeRegressor, x) -> ShapeParams:
    v = FSR(to_nchw(x))[0].double().numpy()
    return ShapeParams.from_vector(v, FSR.spec.d_s, FSR.spec.d_e)
