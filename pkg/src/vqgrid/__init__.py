"""Voxel radiance fields with vector-quantized compression.

Train a small dense voxel grid against multi-view images of a procedural
scene, identify which voxels matter via ray-importance statistics, prune
the rest, quantize mid-importance feature vectors against a learned
codebook, finetune everything jointly, and pack the result into a compact
entropy-coded container that decodes back to a renderable grid.
"""

from .container import (
    ContainerError,
    QuantizedArray,
    container_metadata,
    decode_container,
    dequantize_u8,
    encode_container,
    index_bits,
    pack_bits,
    quantize_u8,
    reported_size_breakdown,
    unpack_bits,
)
from .errors import NumericError
from .finetune import (
    FinetuneConfig,
    FinetuneResult,
    joint_finetune,
    scatter_code_gradients,
)
from .grid import (
    KEPT,
    PRUNED,
    VQ,
    Codebook,
    DenseGrid,
    GridDims,
    ImportanceField,
    VoxelClassMask,
    VQModel,
    expand_vq_model,
    load_grid,
    raw_payload_nbytes,
    save_grid,
    voxel_center,
)
from .images import psnr, read_ppm, read_vqim, write_ppm, write_vqim
from .importance import (
    ImportanceConfig,
    Thresholds,
    classify_voxels,
    compute_importance,
    cumulative_score_rate,
    importance_curve,
    load_importance,
    quantile_threshold,
    save_importance,
)
from .pipeline import (
    PipelineConfig,
    ViewConfig,
    Workspace,
    default_config,
    load_config,
    run_compress,
    run_decompress,
    run_eval,
    run_gen_scene,
    run_render,
    run_report,
    run_train,
    save_config,
    stage_seed,
)
from .render import (
    Ray,
    RenderConfig,
    SamplePoint,
    composite,
    eval_sh,
    intersect_aabb,
    render_image,
    render_ray,
    render_ray_backward,
    render_rays,
    trilerp,
)
from .scenes import (
    Camera,
    Dataset,
    Primitive,
    SceneSpec,
    TrainConfig,
    evaluate_grid,
    fit_grid,
    generate_cameras,
    load_dataset,
    load_scene,
    render_dataset,
    save_dataset,
    save_scene,
)
from .vq import (
    VQConfig,
    assign,
    build_vq_model,
    compression_rate,
    ema_update,
    expire_codes,
    init_codebook,
    weighted_wcss,
)

__version__ = "0.1.0"
