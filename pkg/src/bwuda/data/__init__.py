"""Data model, synthetic benchmark, persistence and label scaling."""

from .generator import generate_benchmark, voxelize
from .oracle import pseudo_fea_oracle
from .profiles import DEFAULT_PROFILES, TABLE1_COUNTS, DomainProfile, GeneratorConfig
from .types import (
    LABEL_NAMES,
    DataError,
    DatasetBundle,
    DesignSample,
    LabeledDomain,
    PerformanceLabel,
    TargetDomain,
    VoxelGrid,
    split_domain,
    split_indices,
)
from .io import (
    BundleFormatError,
    CorruptHeaderError,
    ShapeMismatchError,
    VersionMismatchError,
    load_bundle,
    save_bundle,
)
from .scaling import LabelScaler, fit_label_scaler
