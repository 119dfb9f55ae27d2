"""scikit-learn style wrappers around the pose network, the feature decoder and
per-scene optimisation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .featdec import DecoderWeights, decode, init_decoder, mlp_backward, mlp_forward
from .grad import OptimizerState, adam_step
from .losses import mpjpe
from .posenet import NUM_JOINTS, PoseSample, PoseTrainConfig, forward_pose, train_pose


def _clouds(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"expected clouds of shape (n_samples, n_points, 3), got {X.shape}")
    return X


class PoseRegressor(RegressorMixin, BaseEstimator):
    """Regress 19 keypoints from world-frame point clouds.

    ``X`` has shape (n_samples, n_points, 3); ``y`` has shape (n_samples, 19, dim)
    or (n_samples, 19 * dim). Clouds are centred internally and the centroid is
    added back to the prediction.
    """

    def __init__(self, backbone="hybrid", epochs=20, lr=2e-4, weight_decay=1e-5,
                 batch_size=8, k=16, random_state=0):
        self.backbone = backbone
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.k = k
        self.random_state = random_state

    def _samples(self, X, y=None):
        X = _clouds(X)
        out = []
        for i, cloud in enumerate(X):
            c = cloud.mean(axis=0)
            kp = None if y is None else y[i]
            out.append(PoseSample(cloud - c, c, kp))
        return out

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 2:
            y = y.reshape(len(y), NUM_JOINTS, -1)
        if y.ndim != 3 or y.shape[1] != NUM_JOINTS or y.shape[2] != 3:
            raise ValueError(f"expected 3D keypoints of shape (n, 19, 3), got {y.shape}")
        if len(y) != len(X):
            raise ValueError("X and y have different numbers of samples")
        cfg = PoseTrainConfig(backbone=self.backbone, dim=3, epochs=self.epochs, lr=self.lr,
                              weight_decay=self.weight_decay, batch_size=self.batch_size,
                              seed=int(self.random_state), k=self.k)
        self.weights_, self.log_ = train_pose(self._samples(X, y), cfg)
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return np.stack([forward_pose(s.points, self.weights_, s.centroid, k=self.k)
                         for s in self._samples(X)])

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean per-joint position error (higher is better)."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.float64).reshape(pred.shape)
        return -float(np.mean([mpjpe(p, t) for p, t in zip(pred, y)]))


class FeatureDecoder(TransformerMixin, BaseEstimator):
    """Per-pixel MLP mapping blended feature vectors (F) to embeddings (E), fitted with L1."""

    def __init__(self, embed_dim=3, epochs=200, lr=1e-2, weight_decay=0.0, random_state=0):
        self.embed_dim = embed_dim
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if y.shape != (len(X), self.embed_dim):
            raise ValueError(f"expected targets of shape ({len(X)}, {self.embed_dim})")
        w = dict(init_decoder(X.shape[1], self.embed_dim, int(self.random_state)))
        state = OptimizerState()
        self.loss_curve_ = []
        for _ in range(self.epochs):
            dw = DecoderWeights(w)
            pred, cache = mlp_forward(X, dw)
            diff = pred - y
            self.loss_curve_.append(float(np.abs(diff).mean()))
            g, _ = mlp_backward(cache, np.sign(diff) / diff.size, dw)
            w, state = adam_step(w, g, state, self.lr, self.weight_decay)
        self.weights_ = DecoderWeights(w)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} feature channels, got {X.shape[1]}")
        return mlp_forward(X, self.weights_)[0]

    def decode_image(self, feature_image, alpha) -> np.ndarray:
        check_is_fitted(self, "weights_")
        return decode(feature_image, alpha, self.weights_)


class GaussianSceneModel(BaseEstimator):
    """Fit Gaussians to one multi-view sample; ``predict`` renders colour images."""

    def __init__(self, iterations=2000, num_gaussians=1000, feature_mode="splat",
                 use_pose=True, backbone="hybrid", random_state=0):
        self.iterations = iterations
        self.num_gaussians = num_gaussians
        self.feature_mode = feature_mode
        self.use_pose = use_pose
        self.backbone = backbone
        self.random_state = random_state

    def _config(self) -> RunConfig:
        return RunConfig(iterations=self.iterations, num_gaussians=self.num_gaussians,
                         feature_mode=self.feature_mode, use_pose=self.use_pose,
                         backbone=self.backbone, seed=int(self.random_state))

    def fit(self, X, y=None):
        """``X`` is a DatasetSample."""
        from .pipeline import optimize_scene

        if not hasattr(X, "cameras"):
            raise ValueError("GaussianSceneModel.fit expects a DatasetSample")
        res = optimize_scene(self._config(), X)
        self.gaussians_ = res.gaussians
        self.decoder_ = res.decoder
        self.pose_weights_ = res.pose_weights
        self.history_ = res.history
        self.metrics_ = res.metrics
        return self

    def predict(self, cameras) -> np.ndarray:
        """Rendered colour images (n, H, W, 3) for a list of cameras."""
        from .splat import render

        check_is_fitted(self, "gaussians_")
        return np.stack([render(self.gaussians_, cam).color for cam in cameras])
