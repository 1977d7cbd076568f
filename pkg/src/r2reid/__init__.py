"""Multi-task (identification + verification) Res2Net person re-identification."""

from .datapipe import AugmentConfig, Dataset, DatasetRecord, load_dataset, random_crop, random_erase, sample_pair_batch
from .estimator import MultiTaskReID
from .multitask import PairBatch, identification_loss, multitask_step, square_layer, verification_loss
from .res2net import BackboneConfig, Model, build_backbone, extract_descriptor, extract_descriptors, res2net_block
from .retrieval import GalleryIndex, average_precision, evaluate, evaluate_descriptors, rank_query
from .trainer import TrainConfig, learning_rate, load_checkpoint, save_checkpoint, sgd_step, train

__version__ = "0.1.0"
