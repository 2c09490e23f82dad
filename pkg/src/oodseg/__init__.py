"""Multi-scale foreground-background confidence toolkit for OOD segmentation."""

from .aggregate import (
    IdentityAdapter,
    ModelAdapter,
    PRESET_WEIGHTINGS,
    ScaleSchedule,
    ScaleSource,
    combine_scales,
    load_schedule,
    preset_schedule,
    run_schedule,
    save_schedule,
    uniform_grid_schedule,
    uniform_weights,
)
from .errors import OodsegError
from .fusion import argmax_prediction, entropy_map, fuse, resolve_road_index, road_uncertainty
from .metrics import (
    DEFAULT_TAUS,
    EvalReport,
    PRCurve,
    ScoredPixels,
    Segment,
    SegmentMetricsResult,
    auprc,
    collect_scored_pixels,
    connected_components,
    evaluate_dataset,
    fpr_at_tpr,
    pr_curve,
    segment_metrics,
)
from .raster_io import (
    LABEL_IGNORE,
    LABEL_IN_DIST,
    LABEL_OOD,
    ManifestEntry,
    PatchManifest,
    ProbabilityVolume,
    read_cmap,
    read_image,
    read_label_mask,
    read_manifest,
    read_probability_volume,
    write_cmap,
    write_image,
    write_label_mask,
    write_manifest,
    write_probability_volume,
)
from .synth import (
    DetectionBand,
    DetectionProfile,
    SceneConfig,
    SceneObject,
    SimulatedModel,
    SyntheticScene,
    generate_dataset,
    generate_scene,
    scene_from_objects,
    simulate_confidence,
    simulate_probs,
)
from .tiling import (
    PatchGrid,
    PatchScheme,
    ResizePolicy,
    make_scheme,
    make_uniform_grid,
    reassemble,
    restore_original,
    slice_image,
)

__version__ = "0.1.0"
