"""Occupancy-grid accelerated ray marching and differentiable volume rendering."""

from .camera import PinholeCamera, generate_rays, look_at, orbit_cameras
from .contraction import AabbNormalize, SphereContract, contract, is_inside_domain, uncontract
from .fields import Checker, SolidSphere, TimeConditionedField, TrilinearVoxelField, UniformBox
from .kernels import BACKEND
from .marching import MarchingConfig, make_sigma_fn, march, march_uniform
from .occupancy import OccupancyGrid
from .optim import Adam
from .rendering import (
    RenderGradients,
    SampleAttributes,
    render_attribute,
    render_backward,
    render_forward,
    render_weights,
    rendering,
    transmittance,
)
from .types import Aabb, PackedSamples, RayBatch, RenderOutputs, pack, validate

__version__ = "0.1.0"
