"""glowlab: inverse rendering for co-located flashlight captures.

A desk-scale engine that forward-renders synthetic captures with a path
tracer, trains a dynamic (direct/indirect) neural radiance cache with
self-supervised radiometric losses, and recovers per-face albedo and
roughness on fixed geometry by gradient descent through a one-bounce
global-illumination estimator.
"""

from .brdf import eval_brdf, eval_brdf_grad, pdf_brdf, sample_brdf
from .cache import (
    DynamicRadianceCache,
    NaiveRadianceCache,
    PositionalEncodingCfg,
    load_cache,
    save_cache,
    snapshot,
)
from .core import RngStream, build_frame, reflect, sample_cosine_hemisphere
from .dataset import load_dataset, make_dataset
from .metrics import metric_albedo_scale_invariant, metric_mse_clipped
from .pfm import read_pfm, write_pfm
from .scene import (
    Camera,
    CaptureFrame,
    DenseSDFGrid,
    Flashlight,
    MaterialSet,
    Scene,
    TriangleMesh,
    intersect,
    intersect_batch,
    load_scene,
    save_scene,
    visibility,
)
from .scenes import build_scene, default_cameras
from .training import (
    AdamState,
    MaterialParamVector,
    TrainConfig,
    adam_step,
    grad_material_unbiased,
    loss_recons,
    loss_rough,
    loss_sfm,
    optimize_materials,
    saw_weight,
    train_cache,
)
from .transport import (
    RadianceSplit,
    RenderConfig,
    direct_radiance,
    path_trace,
    render_image,
    shadow_sweep,
    surface_gather,
    transport_estimate,
)

__version__ = "0.1.0"
