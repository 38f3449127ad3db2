"""Weight transplant from a trained GAN into the autoencoder.

The critic's conv stack (``features.*``) becomes the encoder and the
generator's transposed-conv stack (``body.*``) becomes the decoder. The
critic's scalar head and the generator's dense projection are dropped; the
bridge layer is freshly initialized.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .errors import ShapeMismatch
from .models import AutoencoderNet, NetSpec, build_from_metadata, init_weights, read_manifest, read_tensors

SEGMENT_MAP = {
    "critic": ("features", "encoder"),
    "generator": ("body", "decoder"),
}
FRESH_SEGMENT = "bridge"


def spec_tensors(spec: NetSpec) -> OrderedDict:
    """Tensor names and shapes a spec materializes to, in state-dict order."""
    out = OrderedDict()
    for seg, layers in spec.segments:
        for layer in layers:
            prefix = f"{seg}.{layer.name}"
            k = layer.kernel
            if layer.kind == "conv":
                out[f"{prefix}.weight"] = (layer.out_channels, layer.in_channels, k, k)
                out[f"{prefix}.bias"] = (layer.out_channels,)
            elif layer.kind == "transposed_conv":
                out[f"{prefix}.weight"] = (layer.in_channels, layer.out_channels, k, k)
                out[f"{prefix}.bias"] = (layer.out_channels,)
            elif layer.kind == "dense":
                out[f"{prefix}.weight"] = (layer.out_channels, layer.in_channels)
                out[f"{prefix}.bias"] = (layer.out_channels,)
            elif layer.kind == "batch_norm":
                c = layer.in_channels
                for name in ("weight", "bias", "running_mean", "running_var"):
                    out[f"{prefix}.{name}"] = (c,)
                out[f"{prefix}.num_batches_tracked"] = ()
    return out


@dataclass
class TransplantMap:
    pairs: list[tuple[str, str, str]] = field(default_factory=list)  # (source net, source tensor, target tensor)
    fresh: list[str] = field(default_factory=list)
    excluded: list[tuple[str, str]] = field(default_factory=list)

    @property
    def targets(self) -> list[str]:
        return [t for _, _, t in self.pairs]


def build_transplant_map(critic_spec: NetSpec, generator_spec: NetSpec, ae_spec: NetSpec) -> TransplantMap:
    ae = spec_tensors(ae_spec)
    sources = {"critic": spec_tensors(critic_spec), "generator": spec_tensors(generator_spec)}
    tmap = TransplantMap()
    for net, tensors in sources.items():
        src_seg, dst_seg = SEGMENT_MAP[net]
        for name, shape in tensors.items():
            seg, rest = name.split(".", 1)
            if seg != src_seg:
                tmap.excluded.append((net, name))
                continue
            target = f"{dst_seg}.{rest}"
            if target not in ae:
                raise ShapeMismatch(f"{net} tensor {name} has no autoencoder counterpart {target}")
            if tuple(ae[target]) != tuple(shape):
                raise ShapeMismatch(f"{net} tensor {name} {tuple(shape)} does not fit {target} {tuple(ae[target])}")
            tmap.pairs.append((net, name, target))
    mapped = set(tmap.targets)
    for name in ae:
        seg = name.split(".", 1)[0]
        if seg == FRESH_SEGMENT:
            tmap.fresh.append(name)
        elif name not in mapped:
            raise ShapeMismatch(f"autoencoder tensor {name} has no source in the GAN")
    return tmap


def _source_state(source):
    """Tensor dict from a checkpoint directory or a live net."""
    if isinstance(source, (str, Path)):
        return {k: torch.from_numpy(v.copy()) for k, v in read_tensors(source).items()}, load_spec(source)
    return {k: v.detach().clone() for k, v in source.state_dict().items()}, source.spec


def load_spec(directory) -> NetSpec:
    return build_from_metadata(read_manifest(directory)["metadata"]).spec


def transplant(critic_ckpt, generator_ckpt, ae: AutoencoderNet, seed: int = 0) -> AutoencoderNet:
    """Copy GAN tensors into ``ae`` (batch-norm statistics included); re-init the bridge."""
    critic_state, critic_spec = _source_state(critic_ckpt)
    gen_state, gen_spec = _source_state(generator_ckpt)
    tmap = build_transplant_map(critic_spec, gen_spec, ae.spec)
    states = {"critic": critic_state, "generator": gen_state}
    init_weights(ae.bridge, seed)
    target = ae.state_dict()
    with torch.no_grad():
        for net, src, dst in tmap.pairs:
            value = states[net][src]
            if tuple(value.shape) != tuple(target[dst].shape):
                raise ShapeMismatch(f"{net} tensor {src} {tuple(value.shape)} does not fit {dst}")
            target[dst].copy_(value.to(target[dst].dtype))
    return ae


@dataclass
class VerificationReport:
    encoder_max_abs: float
    decoder_max_abs: float
    tolerance: float = 0.0
    probe_seed: int = 0
    mapped_tensors: int = 0
    fresh_tensors: int = 0

    @property
    def passed(self) -> bool:
        return self.encoder_max_abs <= self.tolerance and self.decoder_max_abs <= self.tolerance

    def to_json(self) -> dict:
        return {**asdict(self), "passed": self.passed}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


@torch.no_grad()
def verify_transplant(critic, generator, ae: AutoencoderNet, probe_seed: int = 0, batch: int = 8) -> VerificationReport:
    """Functional equivalence of the transplanted segments in inference mode."""
    g = torch.Generator().manual_seed(probe_seed)
    x = torch.rand(batch, 1, 64, 64, generator=g) * 2 - 1
    top = generator.spec.meta["widths"][-1]
    feats = torch.randn(batch, top, 4, 4, generator=g)
    for net in (critic, generator, ae):
        net.eval()
    enc = float((ae.encoder(x) - critic.truncated(x)).abs().max())
    dec = float((ae.decoder(feats) - generator.tail(feats)).abs().max())
    tmap = build_transplant_map(critic.spec, generator.spec, ae.spec)
    return VerificationReport(enc, dec, 0.0, probe_seed, len(tmap.pairs), len(tmap.fresh))
