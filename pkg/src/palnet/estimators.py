"""scikit-learn style wrappers around the pipeline stages.

Each estimator keeps its hyperparameters as plain constructor arguments so
``get_params``/``set_params``/``clone`` work as usual; fitted state lives in
attributes with a trailing underscore.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_cloud, check_consistent_subjects, check_landmarks, check_patches
from .atlas import LandmarkSet, mean_template, project_to_surface
from .evaluation import postprocess
from .geometry import BoundingBox, Mesh
from .network import ArchConfig, load_checkpoint, predict, save_checkpoint
from .patching import build_patch_tensor
from .registration import Reference, RegistrationConfig, align_subject
from .training import TrainConfig, composite_loss, evaluate_loss, train


class RigidAligner(TransformerMixin, BaseEstimator):
    """Align subject meshes to a reference cloud (FPFH + RANSAC, then ROI-restricted ICP).

    ``fit`` takes the reference surface; ``transform`` maps a list of meshes to
    their aligned full-resolution versions. The per-subject ``T_final``
    transforms of the last call are kept in ``transforms_``.
    """

    def __init__(self, roi=None, config=None):
        self.roi = roi
        self.config = config

    def _cfg(self):
        if isinstance(self.config, RegistrationConfig):
            return self.config
        return RegistrationConfig.from_dict(dict(self.config or {}))

    def fit(self, X, y=None):
        cloud = as_cloud(X)
        roi = self.roi
        if isinstance(roi, dict):
            roi = BoundingBox.from_dict(roi)
        if roi is None:
            roi = BoundingBox(cloud.points.min(axis=0), cloud.points.max(axis=0))
        self.reference_ = Reference(cloud, roi, self._cfg())
        return self

    def transform(self, X):
        check_is_fitted(self, "reference_")
        meshes = [X] if isinstance(X, Mesh) else list(X)
        out, transforms = [], []
        for mesh in meshes:
            if not isinstance(mesh, Mesh):
                raise TypeError(f"expected Mesh objects, got {type(mesh).__name__}")
            aligned, t = align_subject(mesh, self.reference_)
            out.append(aligned)
            transforms.append(t)
        self.transforms_ = transforms
        return out


class LandmarkAtlas(TransformerMixin, BaseEstimator):
    """Mean landmark template fitted on training subjects, projected onto new surfaces."""

    def fit(self, X, y=None):
        sets = [X] if isinstance(X, LandmarkSet) else list(X)
        if not sets or not isinstance(sets[0], LandmarkSet):
            raise TypeError("fit expects a list of LandmarkSet")
        self.template_ = mean_template(sets)
        self.names_ = self.template_.names
        return self

    def transform(self, X):
        """Surfaces (Mesh, PointCloud or arrays) -> list of projected LandmarkSets."""
        check_is_fitted(self, "template_")
        clouds = [X] if isinstance(X, Mesh) else list(X)
        return [project_to_surface(self.template_, as_cloud(c)) for c in clouds]


class PatchExtractor(TransformerMixin, BaseEstimator):
    """Stateless: (cloud, landmark estimates) pairs -> ordered PatchTensor."""

    def __init__(self, strategy="knn", k=1000, radius=None, origin=(0.0, 0.0, 0.0),
                 ordered=True, seed=0):
        self.strategy = strategy
        self.k = k
        self.radius = radius
        self.origin = origin
        self.ordered = ordered
        self.seed = seed

    def fit(self, X=None, y=None):
        if self.strategy not in ("knn", "radius"):
            raise ValueError(f"unknown patch strategy {self.strategy!r}")
        if self.strategy == "radius" and not (self.radius and self.radius > 0):
            raise ValueError("radius strategy needs a positive radius")
        self.n_points_ = self.k
        return self

    def transform(self, X):
        self.fit()
        pairs = [(as_cloud(c), l) for c, l in X]
        names = getattr(pairs[0][1], "names", None) if pairs else None
        return build_patch_tensor(pairs, self.strategy, self.k, self.radius, self.origin,
                                  self.seed, self.ordered, names)


class PALNetRegressor(RegressorMixin, BaseEstimator):
    """The patch-attention landmark network as a multi-output regressor.

    ``X`` is an (m, n, K, 3) patch tensor, ``y`` the (m, n, 3) landmark
    coordinates. Without an explicit ``eval_set`` a seeded
    ``validation_fraction`` of subjects drives LR scheduling, early stopping and
    best-epoch selection.
    """

    def __init__(self, filters=(32, 64, 128), pool_factors=(5, 5, 4), attention=True, top_k=None,
                 attention_scope="all", mlp_widths=(1024, 1024, 3), dropout=0.3, alpha=0.6,
                 beta=0.4, learning_rate=1e-3, batch_size=16, scheduler_factor=0.5,
                 scheduler_patience=8, early_stop_patience=30, max_epochs=250,
                 validation_fraction=0.2, random_state=0):
        self.filters = filters
        self.pool_factors = pool_factors
        self.attention = attention
        self.top_k = top_k
        self.attention_scope = attention_scope
        self.mlp_widths = mlp_widths
        self.dropout = dropout
        self.alpha = alpha
        self.beta = beta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.scheduler_factor = scheduler_factor
        self.scheduler_patience = scheduler_patience
        self.early_stop_patience = early_stop_patience
        self.max_epochs = max_epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _arch(self):
        return ArchConfig(self.filters, self.pool_factors, self.attention, self.top_k,
                          self.attention_scope, self.mlp_widths, self.dropout)

    def _train_cfg(self):
        return TrainConfig(self.alpha, self.beta, self.learning_rate, self.batch_size,
                           self.scheduler_factor, self.scheduler_patience,
                           self.early_stop_patience, self.max_epochs, int(self.random_state or 0))

    def fit(self, X, y, eval_set=None):
        x = check_patches(X)
        yy, names = check_landmarks(y)
        check_consistent_subjects(x, yy)
        arch = self._arch()
        arch.check_patch_size(x.shape[2])
        cfg = self._train_cfg()
        if eval_set is not None:
            xv = check_patches(eval_set[0], k=x.shape[2])
            yv, _ = check_landmarks(eval_set[1], n_landmarks=x.shape[1])
            check_consistent_subjects(xv, yv)
            x_all = np.concatenate([x, xv])
            y_all = np.concatenate([yy, yv])
            tr = np.arange(len(x))
            va = np.arange(len(x), len(x_all))
        else:
            if len(x) < 2:
                raise ValueError("need at least 2 subjects to hold out a validation split")
            n_val = min(len(x) - 1, max(1, int(round(self.validation_fraction * len(x)))))
            order = np.random.default_rng(cfg.seed).permutation(len(x))
            va, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
            x_all, y_all = x, yy
        self.params_, self.history_ = train(x_all, y_all, tr, va, arch, cfg)
        self.arch_ = arch
        self.n_landmarks_ = x.shape[1]
        self.n_points_ = x.shape[2]
        self.landmark_names_ = names
        self.best_epoch_ = self.history_.best_epoch
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        x = check_patches(X, k=self.n_points_)
        if self.n_landmarks_ is not None and x.shape[1] != self.n_landmarks_:
            raise ValueError(f"model was fitted on {self.n_landmarks_} landmarks, got {x.shape[1]}")
        return predict(x, self.params_).astype(np.float64)

    def predict_landmarks(self, X, surfaces=None, names=None, method="nearest"):
        """Predictions as LandmarkSets, optionally re-projected onto per-subject surfaces."""
        pred = self.predict(X)
        names = names or self.landmark_names_ or tuple(f"L{i}" for i in range(pred.shape[1]))
        out = [LandmarkSet(names, p) for p in pred]
        if surfaces is not None:
            out = [postprocess(l, as_cloud(s), method) for l, s in zip(out, surfaces)]
        return out

    def score(self, X, y, sample_weight=None):
        """Negative composite loss (higher is better)."""
        yy, _ = check_landmarks(y)
        value, _ = composite_loss(self.predict(X), yy, self.alpha, self.beta)
        return -value

    def validation_loss(self, X, y):
        check_is_fitted(self, "params_")
        yy, _ = check_landmarks(y)
        return evaluate_loss(self.params_, check_patches(X, k=self.n_points_), yy, self._train_cfg())

    def save(self, path):
        check_is_fitted(self, "params_")
        meta = dict(self.params_.metadata, estimator=self.get_params(),
                    landmark_names=list(self.landmark_names_ or []))
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def load(cls, path):
        params = load_checkpoint(path)
        est_params = dict(params.metadata.get("estimator", {}))
        # JSON turns tuples into lists
        est = cls(**{k: tuple(v) if isinstance(v, list) else v
                     for k, v in est_params.items() if k in cls._get_param_names()})
        est.params_ = params
        est.arch_ = params.arch
        est.n_points_ = params.k
        names = params.metadata.get("landmark_names") or None
        est.landmark_names_ = tuple(names) if names else None
        est.n_landmarks_ = len(names) if names else None
        return est
