"""Network architectures: dual-branch style generator, discriminators, encoder,
and the discriminative segmenters, all sized for desk-scale experiments."""

from dataclasses import dataclass

from .generator import MappingNetwork, DualBranchGenerator, GanBundle
from .discriminators import ImageDiscriminator, PatchPairDiscriminator
from .encoder import StyleEncoder
from .segmenters import build_segmenter, DilatedContextSegmenter, UNetSegmenter, ConvClassifier
from .checkpoint import ModelCheckpoint, save_checkpoint, load_checkpoint, state_dict_bytes


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    latent_dim: int = 64
    style_dim: int = 128
    base_channels: int = 32
    max_channels: int = 256
    mapping_layers: int = 3
    dm_scales: int = 2
    segmenter_channels: int = 32

    def __post_init__(self):
        r = self.resolution
        if r < 8 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")

    @property
    def n_stages(self) -> int:
        """Synthesis stages from 4x4 doubling up to the target resolution."""
        return self.resolution.bit_length() - 2


__all__ = [
    "ModelConfig", "MappingNetwork", "DualBranchGenerator", "GanBundle",
    "ImageDiscriminator", "PatchPairDiscriminator", "StyleEncoder",
    "build_segmenter", "DilatedContextSegmenter", "UNetSegmenter", "ConvClassifier",
    "ModelCheckpoint", "save_checkpoint", "load_checkpoint", "state_dict_bytes",
]
