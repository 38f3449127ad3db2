"""DCGAN-style generator and critic, and the autoencoder built from their parts.

Every net is described by a ``NetSpec`` (named segments of ``LayerSpec``) and
materialized as torch modules whose parameter names follow the layer names, e.g.
``features.conv2.weight``. Tensors are NCHW inside the nets; patches arrive as
NHWC batches and are converted by ``to_tensor``.

Default widths are the DCGAN 64x64 stack (128, 256, 512, 1024), giving a
4x4x1024 interior map. Narrower widths keep the same layer kinds.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import InvalidParams, IoError, ManifestMismatch

DEFAULT_WIDTHS = (128, 256, 512, 1024)
LATENT_DIM = 100
KERNEL = 5
PATCH_SIZE = 64
LEAK = 0.2
LOSS_MODES = ("dcgan", "wgan_gp", "wgan_clip")
AE_SOURCES = ("transfer_shape", "scratch")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: str = "linear"
    target_shape: tuple = ()


@dataclass(frozen=True)
class NetSpec:
    kind: str
    input_shape: tuple
    segments: tuple  # ((segment_name, (LayerSpec, ...)), ...)
    meta: dict = field(default_factory=dict, compare=False)

    def segment(self, name) -> tuple:
        return dict(self.segments)[name]

    @property
    def layers(self) -> list[LayerSpec]:
        return [layer for _, seg in self.segments for layer in seg]


def _conv(name, cin, cout, stride=2):
    return LayerSpec(name, "conv", cin, cout, KERNEL, stride)


def _deconv(name, cin, cout):
    return LayerSpec(name, "transposed_conv", cin, cout, KERNEL, 2)


def _bn(name, c):
    return LayerSpec(name, "batch_norm", c, c)


def _act(name, fn):
    return LayerSpec(name, "activation", activation=fn)


def _check_widths(widths):
    widths = tuple(int(w) for w in widths)
    if len(widths) != 4 or min(widths) < 1:
        raise InvalidParams(f"widths must be four positive channel counts, got {widths}")
    return widths


def critic_features_layers(widths, batch_norm: bool, first_norm: bool = False) -> tuple:
    """Strided 5x5 conv stack 64x64x1 -> 4x4xwidths[-1], leaky ReLU throughout."""
    layers = []
    cin = 1
    for i, cout in enumerate(widths, start=1):
        layers.append(_conv(f"conv{i}", cin, cout))
        if batch_norm and (i > 1 or first_norm):
            layers.append(_bn(f"bn{i}", cout))
        layers.append(_act(f"act{i}", "leaky_relu"))
        cin = cout
    return tuple(layers)


def generator_body_layers(widths, output_activation="tanh") -> tuple:
    """Transposed-conv stack 4x4xwidths[-1] -> 64x64x1."""
    chans = list(reversed(widths)) + [1]
    layers = []
    for i in range(4):
        layers.append(_deconv(f"up{i + 1}", chans[i], chans[i + 1]))
        if i < 3:
            layers.append(_bn(f"bn{i + 1}", chans[i + 1]))
            layers.append(_act(f"act{i + 1}", "relu"))
    layers.append(_act("act4", output_activation))
    return tuple(layers)


def generator_spec(widths=DEFAULT_WIDTHS, latent_dim=LATENT_DIM) -> NetSpec:
    widths = _check_widths(widths)
    top = widths[-1]
    project = (
        LayerSpec("dense", "dense", latent_dim, 16 * top),
        LayerSpec("reshape", "reshape", target_shape=(top, 4, 4)),
        _bn("bn0", top),
        _act("act0", "relu"),
    )
    return NetSpec("generator", (latent_dim,), (("project", project), ("body", generator_body_layers(widths))),
                   meta={"widths": list(widths), "latent_dim": latent_dim})


def critic_spec(loss_mode="wgan_gp", widths=DEFAULT_WIDTHS) -> NetSpec:
    if loss_mode not in LOSS_MODES:
        raise InvalidParams(f"unknown loss mode {loss_mode!r}")
    widths = _check_widths(widths)
    head = [LayerSpec("flatten", "reshape", target_shape=(16 * widths[-1],)),
            LayerSpec("dense", "dense", 16 * widths[-1], 1)]
    head.append(_act("out", "sigmoid" if loss_mode == "dcgan" else "linear"))
    features = critic_features_layers(widths, batch_norm=loss_mode != "wgan_gp")
    return NetSpec("critic", (1, PATCH_SIZE, PATCH_SIZE), (("features", features), ("head", tuple(head))),
                   meta={"widths": list(widths), "loss_mode": loss_mode})


def autoencoder_spec(source="transfer_shape", loss_mode="wgan_gp", widths=DEFAULT_WIDTHS) -> NetSpec:
    if source not in AE_SOURCES:
        raise InvalidParams(f"unknown autoencoder source {source!r}")
    if loss_mode not in LOSS_MODES:
        raise InvalidParams(f"unknown loss mode {loss_mode!r}")
    widths = _check_widths(widths)
    top = widths[-1]
    bridge = (_conv("conv", top, top, stride=1), _bn("bn", top), _act("act", "leaky_relu"))
    if source == "transfer_shape":
        encoder = critic_features_layers(widths, batch_norm=loss_mode != "wgan_gp")
        decoder = generator_body_layers(widths, "tanh")
    else:
        encoder = critic_features_layers(widths, batch_norm=True, first_norm=True)
        decoder = generator_body_layers(widths, "sigmoid")
    return NetSpec("autoencoder", (1, PATCH_SIZE, PATCH_SIZE),
                   (("encoder", encoder), ("bridge", bridge), ("decoder", decoder)),
                   meta={"widths": list(widths), "source": source, "loss_mode": loss_mode})


def propagate(layers, shape) -> tuple:
    """Push a symbolic shape (C, H, W) or (F,) through a layer list."""
    shape = tuple(shape)
    for layer in layers:
        if layer.kind == "conv":
            c, h, w = shape
            if c != layer.in_channels:
                raise InvalidParams(f"{layer.name}: expected {layer.in_channels} channels, got {c}")
            shape = (layer.out_channels, math.ceil(h / layer.stride), math.ceil(w / layer.stride))
        elif layer.kind == "transposed_conv":
            c, h, w = shape
            if c != layer.in_channels:
                raise InvalidParams(f"{layer.name}: expected {layer.in_channels} channels, got {c}")
            shape = (layer.out_channels, h * layer.stride, w * layer.stride)
        elif layer.kind == "dense":
            if shape != (layer.in_channels,):
                raise InvalidParams(f"{layer.name}: expected ({layer.in_channels},), got {shape}")
            shape = (layer.out_channels,)
        elif layer.kind == "reshape":
            if math.prod(shape) != math.prod(layer.target_shape):
                raise InvalidParams(f"{layer.name}: cannot reshape {shape} to {layer.target_shape}")
            shape = tuple(layer.target_shape)
        elif layer.kind == "batch_norm":
            if shape[0] != layer.in_channels:
                raise InvalidParams(f"{layer.name}: expected {layer.in_channels} channels, got {shape[0]}")
    return shape


# --------------------------------------------------------------------------
# torch modules


class Reshape(nn.Module):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(LEAK),
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
    "linear": nn.Identity,
}


def build_stack(layers) -> nn.Sequential:
    modules = OrderedDict()
    for layer in layers:
        if layer.kind == "conv":
            m = nn.Conv2d(layer.in_channels, layer.out_channels, layer.kernel, layer.stride, padding=layer.kernel // 2)
        elif layer.kind == "transposed_conv":
            m = nn.ConvTranspose2d(layer.in_channels, layer.out_channels, layer.kernel, layer.stride,
                                   padding=layer.kernel // 2, output_padding=layer.stride - 1)
        elif layer.kind == "dense":
            m = nn.Linear(layer.in_channels, layer.out_channels)
        elif layer.kind == "reshape":
            m = Reshape(layer.target_shape)
        elif layer.kind == "batch_norm":
            m = nn.BatchNorm2d(layer.in_channels)
        elif layer.kind == "activation":
            m = _ACTIVATIONS[layer.activation]()
        else:
            raise InvalidParams(f"unknown layer kind {layer.kind!r}")
        modules[layer.name] = m
    return nn.Sequential(modules)


class _Net(nn.Module):
    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        for name, layers in spec.segments:
            self.add_module(name, build_stack(layers))

    @property
    def metadata(self) -> dict:
        return {"kind": self.spec.kind, **self.spec.meta}

    def has_batch_norm(self) -> bool:
        return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in self.modules())


class GeneratorNet(_Net):
    def forward(self, z):
        return self.body(self.project(z))

    def tail(self, features):
        """The transferable part: 4x4 feature map -> 64x64 patch."""
        return self.body(features)

    @property
    def latent_dim(self) -> int:
        return self.spec.meta["latent_dim"]


class CriticNet(_Net):
    def forward(self, x):
        return self.head(self.features(x)).reshape(-1)

    def truncated(self, x):
        """The transferable part: 64x64 patch -> 4x4 feature map."""
        return self.features(x)

    @property
    def loss_mode(self) -> str:
        return self.spec.meta["loss_mode"]


class AutoencoderNet(_Net):
    def forward(self, x):
        return self.decoder(self.bridge(self.encoder(x)))

    def encode(self, x):
        return self.encoder(x)

    @property
    def source(self) -> str:
        return self.spec.meta["source"]

    @property
    def native_range(self) -> tuple[float, float]:
        return (-1.0, 1.0) if self.source == "transfer_shape" else (0.0, 1.0)

    def prepare(self, patches: torch.Tensor) -> torch.Tensor:
        """Map [-1, 1] patches into this net's input/output range."""
        return patches if self.source == "transfer_shape" else (patches + 1.0) / 2.0


def to_tensor(batch, dtype=torch.float32) -> torch.Tensor:
    """NHWC (or NHW) patch batch -> NCHW tensor."""
    t = torch.as_tensor(np.ascontiguousarray(batch), dtype=dtype)
    if t.ndim == 3:
        return t.unsqueeze(1)
    if t.ndim == 4 and t.shape[-1] == 1:
        return t.permute(0, 3, 1, 2).contiguous()
    raise InvalidParams(f"cannot interpret batch of shape {tuple(t.shape)}")


def init_weights(net: nn.Module, seed: int = 0) -> nn.Module:
    """N(0, 0.02) conv/dense weights, zero biases, unit batch-norm scale."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, 0.02, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.reset_running_stats()
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def build_generator(widths=DEFAULT_WIDTHS, latent_dim=LATENT_DIM, seed=0) -> GeneratorNet:
    return init_weights(GeneratorNet(generator_spec(widths, latent_dim)), seed)


def build_critic(loss_mode="wgan_gp", widths=DEFAULT_WIDTHS, seed=0) -> CriticNet:
    return init_weights(CriticNet(critic_spec(loss_mode, widths)), seed)


def build_autoencoder(source="transfer_shape", loss_mode="wgan_gp", widths=DEFAULT_WIDTHS, seed=0) -> AutoencoderNet:
    return init_weights(AutoencoderNet(autoencoder_spec(source, loss_mode, widths)), seed)


def build_from_metadata(meta: dict) -> _Net:
    kind = meta.get("kind")
    widths = meta.get("widths", DEFAULT_WIDTHS)
    if kind == "generator":
        return build_generator(widths, meta.get("latent_dim", LATENT_DIM))
    if kind == "critic":
        return build_critic(meta["loss_mode"], widths)
    if kind == "autoencoder":
        return build_autoencoder(meta["source"], meta.get("loss_mode", "wgan_gp"), widths)
    raise ManifestMismatch(f"unknown net kind {kind!r} in checkpoint metadata")


# --------------------------------------------------------------------------
# checkpoints: manifest.json + one raw little-endian float32 file per tensor

MANIFEST = "manifest.json"
CHECKPOINT_FORMAT = "gan-pad-checkpoint/1"


def save_checkpoint(net: _Net, directory, **metadata) -> Path:
    directory = Path(directory)
    tensors = []
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, t in net.state_dict().items():
            arr = t.detach().cpu().numpy().astype("<f4")
            (directory / f"{name}.bin").write_bytes(np.ascontiguousarray(arr).tobytes(order="C"))
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        manifest = {"format": CHECKPOINT_FORMAT, "metadata": {**net.metadata, **metadata}, "tensors": tensors}
        (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {directory}: {exc}") from exc
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read checkpoint manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestMismatch(f"malformed manifest {path}: {exc}") from exc


def read_tensors(directory) -> OrderedDict:
    """Blobs of a checkpoint as float32 arrays, validated against the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    out = OrderedDict()
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if entry.get("dtype", "float32") != "float32":
            raise ManifestMismatch(f"tensor {name}: unsupported dtype {entry['dtype']}", name)
        try:
            raw = (directory / f"{name}.bin").read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read tensor {name} from {directory}: {exc}") from exc
        expected = 4 * math.prod(shape)
        if len(raw) != expected:
            raise ManifestMismatch(f"tensor {name}: blob holds {len(raw)} bytes, manifest needs {expected}", name)
        out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return out


def load_state(net: _Net, directory) -> _Net:
    """Load checkpoint values into an existing net of the same spec."""
    blobs = read_tensors(directory)
    state = net.state_dict()
    for name, target in state.items():
        if name not in blobs:
            raise ManifestMismatch(f"tensor {name} missing from checkpoint {directory}", name)
        if tuple(blobs[name].shape) != tuple(target.shape):
            raise ManifestMismatch(
                f"tensor {name}: checkpoint shape {tuple(blobs[name].shape)} != net shape {tuple(target.shape)}", name)
    extra = [n for n in blobs if n not in state]
    if extra:
        raise ManifestMismatch(f"tensor {extra[0]} in checkpoint has no counterpart in the net", extra[0])
    with torch.no_grad():
        for name, target in state.items():
            target.copy_(torch.from_numpy(blobs[name].copy()).to(target.dtype))
    return net


def load_checkpoint(directory) -> _Net:
    """Rebuild the net recorded in a checkpoint's metadata and load its tensors."""
    meta = read_manifest(directory)["metadata"]
    return load_state(build_from_metadata(meta), directory)
