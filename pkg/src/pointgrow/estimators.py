"""sklearn-style estimators wrapping the pipeline's three fit-shaped algorithms.

These compose with the wider ecosystem (get_params/set_params, fit/predict/
transform); the underlying operations live in their own modules and are also
usable directly.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import slic as slic_backend
from .losses import ClassWeights, class_weights
from .raster import ClassMask, RasterImage
from .superpixels import SuperpixelConfig, compute_hierarchy, extract_k
from .training import TrainConfig, normalize_images, train
from .toynet import init_params, predict
from .weaklabel import PointSet, PropagationConfig, propagate


def _as_image(X) -> RasterImage:
    return X if isinstance(X, RasterImage) else RasterImage(np.asarray(X))


class HierarchicalSuperpixels(BaseEstimator):
    """Agglomerative superpixel clusterer exposing the full merge hierarchy.

    fit(image) computes the hierarchy once; labels at any region count are
    then cheap prefix extractions via extract(k) or fit_predict.
    """

    def __init__(self, k: int = 100, edge: bool = False, sigma: float = 1.0, beta: float = 0.5):
        self.k = k
        self.edge = edge
        self.sigma = sigma
        self.beta = beta

    def _config(self) -> SuperpixelConfig:
        return SuperpixelConfig(k=self.k, edge=self.edge, sigma=self.sigma, beta=self.beta)

    def fit(self, X, y=None):
        image = _as_image(X)
        self.hierarchy_ = compute_hierarchy(image, self._config())
        self.image_shape_ = (image.height, image.width)
        return self

    def extract(self, k: int | None = None):
        if not hasattr(self, "hierarchy_"):
            raise NotFittedError("call fit(image) before extract")
        h, w = self.image_shape_
        return extract_k(self.hierarchy_, k if k is not None else self.k, w, h)

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).extract().labels


class SlicSuperpixels(BaseEstimator):
    """SLIC clusterer; the realized region count is reported in n_regions_."""

    def __init__(self, k: int = 100, compactness: float = 10.0, iterations: int = 10):
        self.k = k
        self.compactness = compactness
        self.iterations = iterations

    def fit(self, X, y=None):
        config = SuperpixelConfig(
            k=self.k,
            backend="slic",
            slic_compactness=self.compactness,
            slic_iterations=self.iterations,
        )
        self.map_ = slic_backend.slic(_as_image(X), config)
        self.n_regions_ = self.map_.k
        return self

    def fit_predict(self, X, y=None) -> np.ndarray:
        return self.fit(X).map_.labels


class PointPropagator(BaseEstimator):
    """Transformer from (points, superpixel map) to a pseudo-mask."""

    def __init__(self, background_policy: str = "ignore", num_classes: int = 5):
        self.background_policy = background_policy
        self.num_classes = num_classes

    def transform(self, points: PointSet, spmap):
        return propagate(
            points,
            spmap,
            PropagationConfig(self.background_policy),
            self.num_classes,
        )


class ToySegmenter(BaseEstimator):
    """Segmentation estimator: fit on (images, pseudo-masks), predict masks.

    X is a stack of uint8 (H, W, 3) images; y a stack of integer masks with a
    matching binary supervision stack (all ones for full supervision).
    """

    def __init__(
        self,
        num_classes: int = 5,
        learning_rate: float = 1e-4,
        batch_size: int = 8,
        epochs: int = 100,
        plateau_patience: int = 10,
        plateau_factor: float = 0.1,
        balance_classes: bool = True,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.plateau_patience = plateau_patience
        self.plateau_factor = plateau_factor
        self.balance_classes = balance_classes
        self.seed = seed

    def fit(self, X, y, supervised=None, val_X=None, val_y=None):
        images = normalize_images(np.asarray(X))
        labels = np.asarray(y)
        if supervised is None:
            supervised = np.ones(labels.shape, dtype=np.uint8)
        if val_X is None:
            val_images, val_masks = images, labels
        else:
            val_images, val_masks = normalize_images(np.asarray(val_X)), np.asarray(val_y)
        if self.balance_classes:
            sel = np.asarray(supervised) == 1
            counts = np.bincount(labels[sel].ravel(), minlength=self.num_classes)[
                : self.num_classes
            ]
            total = counts.sum()
            weights = ClassWeights(1.0 / np.maximum(counts / max(total, 1), 1e-6))
        else:
            weights = ClassWeights.uniform(self.num_classes)
        config = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            plateau_patience=self.plateau_patience,
            plateau_factor=self.plateau_factor,
            seed=self.seed,
        )
        net = init_params(self.num_classes, self.seed)
        result = train(
            net, images, labels, supervised, val_images, val_masks, weights, config
        )
        self.net_ = result.best_net
        self.history_ = result.log
        self.best_val_miou_ = result.best_val_miou
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "net_"):
            raise NotFittedError("call fit before predict")
        return predict(self.net_, normalize_images(np.asarray(X)), self.batch_size)
