"""Range-image semantic segmentation of rotating-LiDAR point clouds.

Pipeline: spherical projection of a scan into a 5-channel range image, a
dilated-convolution encoder-decoder running on numpy, weighted
cross-entropy + Jaccard-surrogate training, MC-dropout and ADF uncertainty,
and a range-aware kNN vote that cleans up back-projected labels.
"""

__version__ = "0.1.0"

from .errors import RangesegError  # noqa: F401
from .pointcloud import (  # noqa: F401
    ClassMap,
    ClassWeights,
    LidarScan,
    read_kitti_labels,
    read_kitti_scan,
    write_kitti_labels,
    write_kitti_scan,
)
from .projection import ProjectionConfig, RangeImage, back_project, build_range_image  # noqa: F401
from .model import Model, ModelConfig, build_model, micro_config  # noqa: F401
from .losses import total_loss  # noqa: F401
from .metrics import ConfusionMatrix  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
from .train import TrainConfig, train  # noqa: F401
from .uncertainty import SensorNoiseModel, adf_infer, mc_dropout_infer  # noqa: F401
from .postproc import KnnConfig, knn_filter  # noqa: F401
