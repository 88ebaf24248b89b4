"""scikit-learn style wrappers around the network and the retargeting solver."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import hand_model as hm
from . import net
from .data import window_arrays
from .retarget import RetargetConfig, normalize_human_frame, retarget_pose
from .stream import StreamConfig, StreamingEngine


class EMG2PoseRegressor(RegressorMixin, BaseEstimator):
    """Regress 22 joint angles from 8-channel EMG.

    ``X`` is a contiguous recording of shape ``(n_samples, 8)`` and ``y`` the
    synchronized joint angles ``(n_samples, 22)``; rows are time steps.
    Training slices them into windows of ``window`` samples advanced by
    ``stride``.

    The default training recipe flips channel polarity and shifts channels by
    a few samples at random each batch (see :class:`emgpose.net.OptimizerConfig`);
    set ``polarity_flip=False, time_shift=0`` for plain training.

    ``predict`` runs the streaming engine over ``X`` with whole-window chunks
    (``execute = window``), starting from the rest pose (or ``initial_pose``).
    The last partial window is completed by repeating the final sample and
    the padded predictions are dropped.
    """

    def __init__(
        self,
        window=400,
        stride=40,
        epochs=40,
        learning_rate=1e-3,
        batch_size=16,
        lam=1.0,
        lstm_hidden=64,
        mlp_hidden=64,
        ff_hidden=128,
        tds_kernel=9,
        lr_decay=0.97,
        polarity_flip=True,
        time_shift=8,
        emg_noise=0.0,
        weight_decay=0.0,
        random_state=0,
        verbose=False,
    ):
        self.window = window
        self.stride = stride
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.lam = lam
        self.lstm_hidden = lstm_hidden
        self.mlp_hidden = mlp_hidden
        self.ff_hidden = ff_hidden
        self.tds_kernel = tds_kernel
        self.lr_decay = lr_decay
        self.polarity_flip = polarity_flip
        self.time_shift = time_shift
        self.emg_noise = emg_noise
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.verbose = verbose

    def _model_config(self):
        return net.ModelConfig(
            lstm_hidden=self.lstm_hidden,
            mlp_hidden=self.mlp_hidden,
            ff_hidden=self.ff_hidden,
            tds_kernel=self.tds_kernel,
            chunk_len=self.window,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        if X.shape[1] != 8 or y.shape[1] != 22:
            raise ValueError(f"expected X with 8 columns and y with 22, got {X.shape[1]} and {y.shape[1]}")
        if X.shape[0] < self.window:
            raise ValueError(f"need at least window={self.window} samples, got {X.shape[0]}")
        seed = 0 if self.random_state is None else int(self.random_state)
        params = net.init_params(self._model_config(), seed=seed)
        samples = window_arrays(X.T, y.T, self.window, self.stride, params["theta0"])
        callback = None
        if self.verbose:
            def callback(epoch, res):
                print(f"epoch {epoch}: train loss {res.train_loss[-1]:.5f}")
        result = net.train(
            params,
            samples,
            net.OptimizerConfig(
                lr=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs, lam=self.lam, seed=seed,
                lr_decay=self.lr_decay, polarity_flip=self.polarity_flip, time_shift=self.time_shift,
                emg_noise=self.emg_noise, weight_decay=self.weight_decay,
            ),
            callback=callback,
        )
        self.params_ = result.params
        self.loss_curve_ = result.train_loss
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, initial_pose=None):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        W = self.window
        n = X.shape[0]
        total = max(W, -(-n // W) * W)
        emg = np.concatenate([X.T, np.repeat(X.T[:, -1:], total - n, axis=1)], axis=1)
        engine = StreamingEngine(self.params_, StreamConfig(window=W, execute=W))
        if initial_pose is not None:
            pose = hm.check_pose(hm.load_model(), initial_pose).copy()
            engine.state = net.DecoderState(engine.state.h, engine.state.c, pose)
        out = engine.push_samples(emg)
        return out[:, :n].T


class KeypointRetargeter(TransformerMixin, BaseEstimator):
    """Map frames of human hand keypoints to robot joint angles.

    Each row of ``X`` holds the flattened ``(x, y, z)`` coordinates of
    ``input_labels`` (default: ``WRIST`` followed by the 35 model keypoint
    labels). Frames are solved in order; each frame warm-starts from the
    previous solution, which also anchors the safety clamp.
    """

    def __init__(
        self,
        input_labels=None,
        normalize=True,
        weights=None,
        max_iters=50,
        tol_step=1e-5,
        tol_residual=1e-4,
        damping=1e-3,
        collision_weight=100.0,
        warm_start=True,
    ):
        self.input_labels = input_labels
        self.normalize = normalize
        self.weights = weights
        self.max_iters = max_iters
        self.tol_step = tol_step
        self.tol_residual = tol_residual
        self.damping = damping
        self.collision_weight = collision_weight
        self.warm_start = warm_start

    def fit(self, X=None, y=None):
        self.model_ = hm.load_model()
        labels = self.input_labels
        if labels is None:
            labels = ("WRIST",) + self.model_.keypoint_labels
        self.labels_ = tuple(labels)
        self.config_ = RetargetConfig(
            weights=self.weights,
            max_iters=self.max_iters,
            tol_step=self.tol_step,
            tol_residual=self.tol_residual,
            damping=self.damping,
            collision_weight=self.collision_weight,
        )
        self.config_.resolve(self.model_)
        self.n_features_in_ = 3 * len(self.labels_)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        out = np.empty((X.shape[0], self.model_.n_dof))
        self.results_ = []
        q_prev = None
        for i, row in enumerate(X):
            kps = hm.KeypointSet(row.reshape(-1, 3), self.labels_)
            if self.normalize:
                kps = normalize_human_frame(kps, self.model_)
            res = retarget_pose(
                self.model_, kps, self.config_,
                q_init=q_prev if self.warm_start else None,
                q_prev_safe=q_prev,
            )
            out[i] = res.pose
            self.results_.append(res)
            q_prev = res.pose
        return out
