"""scikit-learn style wrapper around the multi-task network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datapipe import AugmentConfig, Dataset
from .multitask import predict_same_probability
from .res2net import BackboneConfig, extract_descriptors, backbone_forward
from .retrieval import EvalResult, GalleryIndex, evaluate_descriptors
from .tensor import linear
from .trainer import TrainConfig, train
from .validation import check_cameras, check_identities, check_images


class MultiTaskReID(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Siamese Res2Net trained with identification + verification losses.

    ``fit`` trains on images (n, 3, H, W) with identity labels, ``transform``
    returns pooled descriptors, ``predict`` the identity head's argmax.
    Crop size defaults to the training images' own size.
    """

    def __init__(
        self,
        scale=4,
        stem_channels=8,
        stages=((1, 8, 1), (1, 16, 2)),
        first_split_conv=False,
        base_lr=0.05,
        total_epochs=100,
        batch_size=16,
        momentum=0.9,
        weight_decay=5e-4,
        loss_weights=(0.5, 0.5, 1.0),
        rea_probability=0.5,
        max_iterations=None,
        random_state=0,
    ):
        self.scale = scale
        self.stem_channels = stem_channels
        self.stages = stages
        self.first_split_conv = first_split_conv
        self.base_lr = base_lr
        self.total_epochs = total_epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.rea_probability = rea_probability
        self.max_iterations = max_iterations
        self.random_state = random_state

    def fit(self, X, y, cameras=None):
        X = check_images(X)
        y = check_identities(y, len(X))
        cameras = check_cameras(cameras, len(X))
        ds = Dataset.from_arrays(X, y, cameras)
        backbone = BackboneConfig(
            stem_channels=self.stem_channels,
            stages=[tuple(s) for s in self.stages],
            scale=self.scale,
            descriptor_dim=self.stages[-1][1],
            num_identities=max(len(ds.classes), 2),
            first_split_conv=self.first_split_conv,
        )
        cfg = TrainConfig(
            base_lr=self.base_lr,
            total_epochs=self.total_epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            loss_weights=self.loss_weights,
            max_iterations=self.max_iterations,
            augment=AugmentConfig(crop_h=X.shape[2], crop_w=X.shape[3], rea_probability=self.rea_probability),
            seed=self.random_state,
        )
        result = train(cfg, ds, backbone=backbone)
        self.model_ = result.model
        self.history_ = result.history
        self.classes_ = np.asarray(ds.classes)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return extract_descriptors(self.model_, check_images(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        f, _ = backbone_forward(self.model_, check_images(X), train=False)
        return self.classes_[np.argmax(linear(f, self.model_.id_head), axis=1)]

    def predict_same(self, Xa, Xb):
        """Probability that each pair ``(Xa[i], Xb[i])`` shows one person."""
        check_is_fitted(self, "model_")
        return predict_same_probability(self.model_, check_images(Xa), check_images(Xb))

    def evaluate(self, X_query, y_query, cam_query, X_gallery, y_gallery, cam_gallery, k_max=None) -> EvalResult:
        """CMC / mAP of cosine ranking, Market-1501 single-query protocol."""
        gallery = GalleryIndex.from_descriptors(
            self.transform(X_gallery),
            check_identities(y_gallery, len(X_gallery)),
            check_cameras(cam_gallery, len(X_gallery)),
        )
        return evaluate_descriptors(
            self.transform(X_query),
            check_identities(y_query, len(X_query)),
            check_cameras(cam_query, len(X_query)),
            gallery,
            k_max,
        )
