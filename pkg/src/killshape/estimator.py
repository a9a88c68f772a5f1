"""scikit-learn style front end: fit a shape space to a list of point clouds."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_positive_int
from .diffnet import DTYPE, MlpConfig, as_tensor
from .evaluation import DEFAULT_RESOLUTION, chamfer, extract_mesh
from .geometry import PointCloud, bounding_box
from .losses import LossWeights, Schedule
from .shapespace import interpolate
from .training import Checkpoint, TrainConfig, fit_test_latent, train


def _as_clouds(X) -> list[PointCloud]:
    if isinstance(X, (PointCloud, np.ndarray)) and not (
        isinstance(X, np.ndarray) and X.ndim == 3
    ):
        X = [X]
    clouds = []
    for i, c in enumerate(X):
        clouds.append(c if isinstance(c, PointCloud) else PointCloud(check_points(c, name=f"X[{i}]")))
    if not clouds:
        raise ValueError("need at least one point cloud")
    return clouds


class ShapeSpaceEstimator(TransformerMixin, BaseEstimator):
    """Learns a latent shape space from point clouds.

    ``fit`` trains the implicit network and one code per shape,
    ``transform`` fits codes for new clouds with the network frozen, and
    ``predict`` returns surface samples of the reconstructions.
    """

    def __init__(self, epochs=2000, lambda_d=0.001, parts=1, latent_dim=8, hidden_layers=4,
                 hidden_width=64, recon_batch=8, deform_batch=8, interpolation="linear",
                 fit_steps=500, resolution=DEFAULT_RESOLUTION, n_samples=2000, seed=0):
        self.epochs = epochs
        self.lambda_d = lambda_d
        self.parts = parts
        self.latent_dim = latent_dim
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.recon_batch = recon_batch
        self.deform_batch = deform_batch
        self.interpolation = interpolation
        self.fit_steps = fit_steps
        self.resolution = resolution
        self.n_samples = n_samples
        self.seed = seed

    def _config(self) -> TrainConfig:
        mlp = MlpConfig(hidden_layers=self.hidden_layers, hidden_width=self.hidden_width,
                        latent_dim=self.latent_dim, skip_layer=max(1, self.hidden_layers // 2),
                        parts=self.parts)
        return TrainConfig(
            epochs=check_positive_int(self.epochs, name="epochs"),
            recon_batch=self.recon_batch, deform_batch=self.deform_batch,
            interpolation=self.interpolation, mlp=mlp, seed=self.seed,
            weights=LossWeights(lambda_d=self.lambda_d),
            schedule=Schedule.constant(self.lambda_d),
        )

    def fit(self, X, y=None, progress=None):
        clouds = _as_clouds(X)
        self.checkpoint_ = train(clouds, self._config(), progress=progress)
        self._set_fitted(clouds)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, clouds=None, box=None) -> "ShapeSpaceEstimator":
        cfg = ckpt.config
        est = cls(epochs=cfg.epochs, lambda_d=cfg.weights.lambda_d, parts=cfg.k,
                  latent_dim=cfg.mlp.latent_dim, hidden_layers=cfg.mlp.hidden_layers,
                  hidden_width=cfg.mlp.hidden_width, recon_batch=cfg.recon_batch,
                  deform_batch=cfg.deform_batch, interpolation=cfg.interpolation, seed=cfg.seed)
        est.checkpoint_ = ckpt
        if clouds is not None:
            est._set_fitted(_as_clouds(clouds))
        elif box is not None:
            est.box_ = tuple(np.asarray(b, dtype=np.float64) for b in box)
            est.n_shapes_ = len(ckpt.latents)
            est.latents_ = ckpt.latents.numpy()
        else:
            raise ValueError("need the training clouds or a bounding box")
        return est

    def _set_fitted(self, clouds):
        self.box_ = bounding_box(clouds, self.checkpoint_.config.box_margin)
        self.n_shapes_ = len(clouds)
        self.latents_ = self.checkpoint_.latents.numpy()

    def transform(self, X) -> np.ndarray:
        """Latent codes fitted to each cloud in ``X``, shape (len(X), latent_dim)."""
        check_is_fitted(self, "checkpoint_")
        codes = [fit_test_latent(self.checkpoint_, c, steps=self.fit_steps, seed=self.seed).z
                 for c in _as_clouds(X)]
        return np.stack(codes)

    def fit_transform(self, X, y=None, **fit_params):
        self.fit(X, y, **fit_params)
        return self.latents_.copy()

    def mesh(self, z, resolution=None, labels=False):
        check_is_fitted(self, "checkpoint_")
        z = as_tensor(np.asarray(z, dtype=np.float64))
        return extract_mesh(self.checkpoint_.net, z, self.box_, resolution or self.resolution,
                            labels=labels)

    def inverse_transform(self, Z) -> list[np.ndarray]:
        """Surface samples (``n_samples`` points each) of the shapes coded by the rows of Z."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        rng = np.random.default_rng(self.seed)
        return [self.mesh(z).sample(self.n_samples, rng) for z in Z]

    def predict(self, X) -> list[np.ndarray]:
        """Reconstructions of ``X``: encode with :meth:`transform`, then decode."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None) -> float:
        """Negative mean Chamfer distance between each cloud and its reconstruction."""
        clouds = _as_clouds(X)
        recon = self.predict(clouds)
        return -float(np.mean([chamfer(c, r) for c, r in zip(clouds, recon)]))

    def interpolate(self, i, j, t, mode=None) -> np.ndarray:
        """Code at t on the path between training codes i and j."""
        check_is_fitted(self, "checkpoint_")
        codes = self.checkpoint_.latents.codes.detach()
        z = interpolate(codes[i], codes[j], torch.as_tensor(t, dtype=DTYPE),
                        mode or self.interpolation)
        return z.numpy()

    def config(self) -> TrainConfig:
        """The training configuration these parameters describe."""
        return self._config()

    def with_config(self, **changes) -> TrainConfig:
        return dataclasses.replace(self._config(), **changes)
