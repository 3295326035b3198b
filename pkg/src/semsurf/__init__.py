"""Semantic-decomposed implicit surfaces: fields, extraction, rendering, metrics."""

from .field import (
    FieldGrid,
    FieldSample,
    GridBackedField,
    GridSpec,
    ImplicitScene,
    InvalidInputError,
    MemoryBudgetError,
    OutOfDomainError,
    Primitive,
    SemanticLabel,
    sample,
    sample_grid_dense,
    sample_many,
    sdf_grid_dense,
    sdf_many,
)
from .semantics import (
    SemanticSet,
    equivalent_sdf,
    equivalent_sdf_array,
    equivalent_sdf_grid,
    equivalent_sdf_set,
    equivalent_sdf_set_array,
    transform_values,
)
from .proposal import (
    ActiveMask,
    DenseScalarGrid,
    SparseScalarGrid,
    occupancy_mask,
    propose_active,
    sparse_evaluate,
    upsample_mask,
)
from .extract import (
    LayeredCharacter,
    Mesh,
    default_coarse,
    default_layer_selectors,
    extract_character,
    extract_layer,
    field_normals,
    icosphere,
    marching_cubes,
)
from .meshio import load_mesh, save_character, save_mesh
from .render import (
    Camera,
    RayGrid,
    RenderBuffers,
    composite,
    composite_over,
    generate_rays,
    render_buffers,
    render_layers,
    render_pixel,
    render_pixel_semantic,
    render_pixel_set,
    save_view_pngs,
    view_azimuths,
)
from .losses import (
    DivergenceError,
    GradCheckReport,
    LossWeights,
    collision_loss,
    finite_diff_check_collision,
    finite_diff_check_hole,
    hole_loss,
    penetration_depths,
    resolve_collisions,
)
from .metrics import (
    LayerReport,
    MetricsConfig,
    UndefinedMetricError,
    chamfer,
    evaluate_layers,
    fscore,
    hollow_check,
    sample_surface,
    voxel_iou,
)
from . import scenes

__version__ = "0.1.0"

__all__ = [
    "ActiveMask",
    "Camera",
    "DenseScalarGrid",
    "DivergenceError",
    "FieldGrid",
    "FieldSample",
    "GradCheckReport",
    "GridBackedField",
    "GridSpec",
    "ImplicitScene",
    "InvalidInputError",
    "LayerReport",
    "LayeredCharacter",
    "LossWeights",
    "MemoryBudgetError",
    "Mesh",
    "MetricsConfig",
    "OutOfDomainError",
    "Primitive",
    "RayGrid",
    "RenderBuffers",
    "SemanticLabel",
    "SemanticSet",
    "SparseScalarGrid",
    "UndefinedMetricError",
    "chamfer",
    "collision_loss",
    "composite",
    "composite_over",
    "default_coarse",
    "default_layer_selectors",
    "equivalent_sdf",
    "equivalent_sdf_array",
    "equivalent_sdf_grid",
    "equivalent_sdf_set",
    "equivalent_sdf_set_array",
    "evaluate_layers",
    "extract_character",
    "extract_layer",
    "field_normals",
    "finite_diff_check_collision",
    "finite_diff_check_hole",
    "fscore",
    "generate_rays",
    "hole_loss",
    "hollow_check",
    "icosphere",
    "load_mesh",
    "marching_cubes",
    "occupancy_mask",
    "penetration_depths",
    "propose_active",
    "render_buffers",
    "render_layers",
    "render_pixel",
    "render_pixel_semantic",
    "render_pixel_set",
    "resolve_collisions",
    "sample",
    "sample_grid_dense",
    "sample_many",
    "sample_surface",
    "save_character",
    "save_mesh",
    "save_view_pngs",
    "scenes",
    "sdf_grid_dense",
    "sdf_many",
    "sparse_evaluate",
    "transform_values",
    "upsample_mask",
    "view_azimuths",
]
