"""LiDAR voxel preprocessing with normal-vector features.

Voxelize range-clipped frames, estimate per-voxel surface normals from
voxel-centroid neighborhoods, measure normal-vector density on the unit
sphere, apply density- and range-aware sampling, and evaluate the
element-wise attention fusion block numerically.
"""

from .errors import (
    DegenerateNeighborhood,
    DimensionMismatch,
    EmptyInput,
    InsufficientNeighbors,
    LengthMismatch,
    MalformedFrame,
    NonFiniteInput,
    NonFiniteValue,
    NormvoxError,
    PointOutOfRange,
)
from .fusion import (
    FusionBatch,
    FusionParams,
    MlpParams,
    fusion_backward,
    fusion_forward,
    gradient_check,
    init_params,
    load_params,
    mlp_forward,
    save_params,
)
from .index import IndexedPoints, ball_counts_all_pairs, build
from .normals import (
    NormalConfig,
    NormalFeatures,
    density_histogram,
    estimate_normal,
    extract_normals,
    orient_normal,
    orient_normals,
    symmetric_eigh_3x3,
)
from .pipeline import (
    PipelineConfig,
    batch_run,
    canonical_report,
    parse_config_file,
    run_pipeline,
)
from .pointcloud import (
    DEFAULT_RANGE,
    PointCloud,
    RangeBox,
    clip_to_range,
    read_kitti_bin,
    write_kitti_bin,
    write_ply,
)
from .sampling import (
    BinStatistics,
    FovConfig,
    NdConfig,
    SampleMask,
    bin_statistics,
    compose,
    expand_mask,
    fov_bin_sample,
    fps_sample,
    general_bin_sample,
    nd_sample,
    radial_distance,
    random_sample,
)
from .scene import Box, SyntheticScene, benchmark_scene, demo_scene, generate_scene
from .voxels import VoxelConfig, VoxelSet, cap_voxels, voxelize, write_voxels_csv

__version__ = "0.1.0"
