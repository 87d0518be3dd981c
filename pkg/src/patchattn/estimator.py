"""scikit-learn style front end.

``PatchMatchNeighbors`` mirrors ``sklearn.neighbors.NearestNeighbors``
for image patches; ``PatchAttention`` is a transformer that is fitted on
a key image (and optional value image) and maps query images to
attention outputs.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .annfield import ANNField, SearchParams, exact_nn, run
from .attention import (DEFAULT_TEMPERATURE, aggregation_attention, full_attention,
                        hard_attention, soft_knn_attention)
from .core import PatchView, check_feature_map, check_patch_size
from .similarity import Metric

_MODES = ("hard", "soft_knn", "aggregation", "full", "exact")


class PatchMatchNeighbors(BaseEstimator):
    """Approximate k nearest patches between a query image and a key image.

    Parameters
    ----------
    n_neighbors : int
        Candidates kept per query pixel.
    patch_size : int
        Odd patch side length.
    metric : {"l2", "dot", "cosine"}
    n_iter : int
        Propagation / random-search rounds.
    window_max : int or None
        Initial random-search radius; None uses the key image's larger side.
    window_decay : float
        Radius shrink factor per random-search round.
    random_state : int
    n_jobs : int
        Worker threads; 1 is bit-deterministic.
    """

    def __init__(self, n_neighbors=3, patch_size=7, metric="l2", n_iter=5, window_max=None,
                 window_decay=0.5, random_state=0, n_jobs=1):
        self.n_neighbors = n_neighbors
        self.patch_size = patch_size
        self.metric = metric
        self.n_iter = n_iter
        self.window_max = window_max
        self.window_decay = window_decay
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _search_params(self) -> SearchParams:
        return SearchParams(n_iter=self.n_iter, k=self.n_neighbors, seed=self.random_state,
                            window_max=self.window_max, window_decay=self.window_decay,
                            metric=Metric.parse(self.metric), n_threads=self.n_jobs)

    def fit(self, X, y=None):
        X = check_feature_map(X, dtype=np.float32)
        check_patch_size(self.patch_size)
        self._search_params()
        self.keys_ = PatchView(X, self.patch_size, np.float32)
        self.n_features_in_ = self.keys_.dim
        return self

    def kneighbors(self, X, exact: bool = False, force: bool = False) -> ANNField:
        check_is_fitted(self, "keys_")
        queries = PatchView(check_feature_map(X, dtype=np.float32), self.patch_size, np.float32)
        if exact:
            return exact_nn(queries, self.keys_, self.n_neighbors, self.metric, force=force,
                            n_threads=self.n_jobs)
        return run(queries, self.keys_, self._search_params())


class PatchAttention(TransformerMixin, BaseEstimator):
    """Attention layer that reconstructs query images from a fitted key image.

    ``fit(K, V)`` stores the key map and the value map (``V`` defaults to
    ``K``); ``transform(Q)`` returns, for every query pixel, the
    attention-weighted combination of value pixels.

    ``mode`` selects ``"hard"`` (best match only), ``"soft_knn"``,
    ``"aggregation"``, ``"full"`` (dense softmax over keys sampled every
    ``stride`` pixels) or ``"exact"`` (hard attention on the exhaustive
    nearest neighbour).
    """

    def __init__(self, mode="soft_knn", n_neighbors=3, patch_size=7, metric="l2",
                 temperature=DEFAULT_TEMPERATURE, n_iter=5, stride=10, random_state=0,
                 n_jobs=1, force=False):
        self.mode = mode
        self.n_neighbors = n_neighbors
        self.patch_size = patch_size
        self.metric = metric
        self.temperature = temperature
        self.n_iter = n_iter
        self.stride = stride
        self.random_state = random_state
        self.n_jobs = n_jobs
        self.force = force

    def fit(self, X, y=None):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode not in ("hard", "exact") and not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        X = check_feature_map(X, dtype=np.float32)
        V = X if y is None else check_feature_map(y, dtype=np.float32, name="y")
        if V.shape[:2] != X.shape[:2]:
            raise ValueError(f"values {V.shape[:2]} must match keys {X.shape[:2]} spatially")
        k = 1 if self.mode in ("hard", "exact") else self.n_neighbors
        self.neighbors_ = PatchMatchNeighbors(
            n_neighbors=k, patch_size=self.patch_size, metric=self.metric, n_iter=self.n_iter,
            random_state=self.random_state, n_jobs=self.n_jobs).fit(X)
        self.values_ = V
        self.n_features_in_ = self.neighbors_.n_features_in_
        return self

    def transform(self, X):
        check_is_fitted(self, "values_")
        X = check_feature_map(X, dtype=np.float32)
        keys = self.neighbors_.keys_
        if self.mode == "full":
            queries = PatchView(X, self.patch_size, np.float32)
            return full_attention(queries, keys, self.values_, self.metric, self.temperature,
                                  stride=self.stride, force=self.force)
        field = self.neighbors_.kneighbors(X, exact=self.mode == "exact", force=self.force)
        self.field_ = field
        if self.mode in ("hard", "exact"):
            return hard_attention(field, self.values_)
        queries = PatchView(X, self.patch_size, np.float32)
        if self.mode == "soft_knn":
            return soft_knn_attention(queries, keys, self.values_, field, self.temperature)
        return aggregation_attention(queries, keys, self.values_, field, self.temperature)
