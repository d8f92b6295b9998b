"""attnseg: diffusion attention tensors -> segmentation masks.

Library surface: bundle I/O (tensor_store), prompt planning (prompt_plan),
attention fusion (fusion), dense-CRF refinement (densecrf), instance
assignment (instance_assign), evaluation (metrics), and synthetic fixtures
(synth_fixtures). The CLI in attnseg.cli exposes the same pipeline.
"""

from .densecrf import CrfParams, argmax_mask, refine
from .fusion import (
    CorrelationMap,
    FusionConfig,
    aggregate_cross,
    background_map,
    class_attribution,
    ensemble,
    fuse,
    propagate,
    to_mask,
    upsample_to_image,
)
from .instance_assign import (
    AssignmentResult,
    SegmentPartition,
    assign_greedy,
    assign_hungarian,
    dominant_segment,
    foreground_region,
    segment_scores,
    spectral_cluster,
)
from .metrics import EvalReport, instance_accuracy, miou
from .prompt_plan import PromptPlan, compose_query, validate_manifest
from .synth_fixtures import (
    Fixture,
    InstanceFixture,
    InstanceSpec,
    RegionSpec,
    SceneSpec,
    make_fixture,
    make_instance_fixture,
)
from .tensor_store import (
    AttentionBundle,
    BundleError,
    CrossLayer,
    LabelMask,
    TokenManifest,
    TokenSpan,
    read_bundle,
    read_mask,
    write_bundle,
    write_mask,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionBundle",
    "AssignmentResult",
    "BundleError",
    "CorrelationMap",
    "CrfParams",
    "CrossLayer",
    "EvalReport",
    "Fixture",
    "FusionConfig",
    "InstanceFixture",
    "InstanceSpec",
    "LabelMask",
    "PromptPlan",
    "RegionSpec",
    "SceneSpec",
    "SegmentPartition",
    "TokenManifest",
    "TokenSpan",
    "aggregate_cross",
    "argmax_mask",
    "assign_greedy",
    "assign_hungarian",
    "background_map",
    "class_attribution",
    "compose_query",
    "dominant_segment",
    "ensemble",
    "foreground_region",
    "fuse",
    "instance_accuracy",
    "make_fixture",
    "make_instance_fixture",
    "miou",
    "propagate",
    "read_bundle",
    "read_mask",
    "refine",
    "segment_scores",
    "spectral_cluster",
    "to_mask",
    "upsample_to_image",
    "validate_manifest",
    "write_bundle",
    "write_mask",
]
