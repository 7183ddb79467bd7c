from .canonical import canonical_input, canonical_projection  # noqa
from .classifier import TrainConfig, evaluate, init_mlp, train, vote_predict  # noqa
from .distance_field import compute_distance_field, generate_sampling_points  # noqa
from .elm import FeatureSet, ShapeFeature, augment_input, embed, make_shared_basis  # noqa
from .errors import CanonError, DataError, UsageError  # noqa
from .geometry import Mesh, PointCloud, load_off, normalize, sample_surface  # noqa
from .pipeline import ExtractionConfig, extract_features, scan_modelnet  # noqa
from .schema import Field, Schema  # noqa

__version__ = "0.1.0"
