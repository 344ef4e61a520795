"""removal_eval: quantitative evaluation of object removers.

Scores class-wise object-removal results with starred unpaired metrics
(fid_star, uids_star) computed against a comparison set that contains no
target-class objects, alongside the usual baselines (FID, U-IDS, P-IDS,
PSNR, SSIM), plus mask-dilation remover variants, a sample-size
reliability (RSD) study, and a synthetic paired-ground-truth benchmark.
"""

__version__ = "0.1.0"

from .dataset import (
    AnnotationIndex,
    BinaryMask,
    ManifestRow,
    SetSelection,
    build_class_mask,
    decode_rle,
    dilate,
    encode_rle,
    parse_annotations,
    rasterize_polygon,
    read_manifest,
    select_sets,
    write_manifest,
)
from .errors import (
    BackendError,
    DegenerateInputError,
    FormatError,
    GenerationError,
    NotPsdError,
    NumericalError,
    ParseError,
    ProtocolError,
    RemovalEvalError,
    ValidationError,
)
from .evaluation import (
    ComparisonSetInfo,
    MetricRanking,
    MetricReport,
    QuerySetInfo,
    StabilityEntry,
    StabilityTable,
    evaluate_unpaired,
    rank_removers,
    subsample_stability,
)
from .features import (
    ExtractorSpec,
    ImageBuffer,
    extract_features,
    load_image_png,
    read_features,
    save_image_png,
    toy_descriptor,
    write_features,
)
from .pixel_metrics import ImagePair, import_pair_distances, psnr, ssim
from .stats import (
    FeatureMatrix,
    GaussianStats,
    compute_gaussian_stats,
    frechet_distance,
    frechet_distance_info,
    sqrtm_psd,
)
from .svm import LinearDecisionFunction, SvmConfig, p_ids, train_linear_svm, u_ids
from .synth import (
    REMOVER_METHODS,
    ScenePair,
    SceneSpec,
    apply_remover,
    emit_benchmark,
    generate_scene_pair,
)
