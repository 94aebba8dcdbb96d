"""Mixture-of-experts conditional GAN for voxel shape generation and completion, on numpy."""

from .config import RunConfig, load_config
from .dcc import DccConfig, DccState
from .gan import ArchConfig, Discriminator, ExpertGenerator, MoECGAN, Trainer
from .metrics import MetricReport, chamfer, emd, hausdorff, prr
from .mesh import TriangleMesh, marching_cubes
from .tensor import Tensor
from .voxel import VoxelGrid, read_vox, write_vox

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "DccConfig",
    "DccState",
    "Discriminator",
    "ExpertGenerator",
    "MetricReport",
    "MoECGAN",
    "RunConfig",
    "Tensor",
    "Trainer",
    "TriangleMesh",
    "VoxelGrid",
    "chamfer",
    "emd",
    "hausdorff",
    "load_config",
    "marching_cubes",
    "prr",
    "read_vox",
    "write_vox",
]
