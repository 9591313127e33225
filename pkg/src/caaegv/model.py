"""Scikit-learn style wrapper around the CAAE trainer."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import CorruptCheckpoint
from .losses import ABLATIONS, LossWeights
from .nets import build_condition, encode, generate, init_params, load_networks, save_checkpoint
from .trainer import TrainConfig, simulate_batch, train
from .validation import check_groups, check_images, check_labels, check_sexes


class FaceAgingCAAE(TransformerMixin, BaseEstimator):
    """Conditional adversarial autoencoder for age progression.

    ``fit(X, y)`` takes N x H x W x 3 images in [-1, 1] and an ``(N, 2)``
    label array of (age group, sex index). ``transform`` returns latent codes,
    ``inverse_transform`` decodes codes under given labels and
    ``simulate`` produces the ten-group aging strip for each input.

    ``gender_on`` feeds the sex label to the generator and image
    discriminator; ``vgg_on`` adds the frozen feature-map identity loss.
    """

    def __init__(self, image_size=64, n_z=50, epochs=15, batch_size=32, learning_rate=1e-3,
                 lambda_=100.0, gamma=10.0, phi=0.01, gender_on=True, vgg_on=True,
                 saturating=False, checkpoint_every=0, arch=None, seed=0):
        self.image_size = image_size
        self.n_z = n_z
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_ = lambda_
        self.gamma = gamma
        self.phi = phi
        self.gender_on = gender_on
        self.vgg_on = vgg_on
        self.saturating = saturating
        self.checkpoint_every = checkpoint_every
        self.arch = arch
        self.seed = seed

    @classmethod
    def variant(cls, name: str, **params) -> "FaceAgingCAAE":
        """Build one of CAAE, CAAE-G, CAAE-V, CAAE-GV."""
        if name not in ABLATIONS:
            raise ValueError(f"unknown variant {name!r}; expected one of {list(ABLATIONS)}")
        return cls(gender_on=ABLATIONS[name].gender_on, vgg_on=ABLATIONS[name].vgg_on, **params)

    @property
    def variant_name(self) -> str:
        return {(v.gender_on, v.vgg_on): k for k, v in ABLATIONS.items()}[(bool(self.gender_on), bool(self.vgg_on))]

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, epochs=self.epochs, learning_rate=self.learning_rate,
                           seed=self.seed, image_size=self.image_size, n_z=self.n_z,
                           weights=LossWeights(self.lambda_, self.gamma, self.phi),
                           gender_on=self.gender_on, vgg_on=self.vgg_on,
                           checkpoint_every=self.checkpoint_every, saturating=self.saturating,
                           arch=dict(self.arch or {}))

    def fit(self, X, y, out_dir=None, fm_weights=None):
        X = check_images(X, self.image_size)
        groups, sexes = check_labels(y, X.shape[0])
        config = self.train_config()
        nets = None
        if fm_weights is not None:
            nets = init_params(config.arch_config(), config.seed)
            nets.load_fm_weights(fm_weights)
        self.networks_, self.log_ = train(config, X, groups, sexes, out_dir=out_dir, nets=nets,
                                          meta={"estimator": self.get_params()})
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "networks_")
        X = check_images(X, self.image_size)
        return encode(self.networks_, X)

    def inverse_transform(self, Z, groups, sexes):
        check_is_fitted(self, "networks_")
        Z = np.asarray(Z, dtype=np.float32).reshape(-1, self.n_z)
        c = build_condition(Z, check_groups(groups, len(Z)), check_sexes(sexes, len(Z)), self.networks_.arch)
        return generate(self.networks_, c)

    def reconstruct(self, X, y):
        X = check_images(X, self.image_size)
        groups, sexes = check_labels(y, X.shape[0])
        return self.inverse_transform(self.transform(X), groups, sexes)

    def simulate(self, X, sexes):
        """N x 10 x H x W x 3 simulations; one latent code per input, shared by all groups."""
        check_is_fitted(self, "networks_")
        return simulate_batch(self.networks_, X, sexes)

    def save(self, path) -> Path:
        check_is_fitted(self, "networks_")
        return save_checkpoint(self.networks_, path, meta={"estimator": self.get_params()})

    @classmethod
    def load(cls, path) -> "FaceAgingCAAE":
        nets, manifest = load_networks(path)
        params = (manifest.get("meta") or {}).get("estimator")
        if params is None:
            raise CorruptCheckpoint(f"{path}: no estimator parameters in manifest")
        est = cls(**params)
        if est.train_config().arch_config() != nets.arch:
            raise CorruptCheckpoint(f"{path}: estimator parameters disagree with stored architecture")
        est.networks_ = nets
        est.n_features_in_ = nets.arch.image_size ** 2 * 3
        return est

    def __sklearn_is_fitted__(self):
        return hasattr(self, "networks_")
