"""Synthetic class families used in place of real datasets.

2D families: Gaussian-blob prototypes modulated by a class-specific grating
(frequency, orientation, colour).  1D families: class-specific sinusoid
mixtures per channel.  Target "users" perturb frequency, channel gain and
noise level so that folds behave like held-out subjects.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class SourceFamily:
    shape: tuple
    centres: np.ndarray     # (K, 2) blob centres in [0, 1]
    widths: np.ndarray      # (K,)
    colours: np.ndarray     # (K, C)
    freqs: np.ndarray       # (K, M) cycles per image / window
    angles: np.ndarray      # (K,)
    amps: np.ndarray        # (K, C, M) 1D only
    noise: float = 0.3

    @classmethod
    def create(cls, rng, n_classes, shape):
        c, h, w = tuple(shape)
        k = n_classes
        return cls(
            shape=(c, h, w),
            centres=rng.uniform(0.25, 0.75, size=(k, 2)),
            widths=rng.uniform(0.12, 0.3, size=k),
            colours=rng.uniform(-1.0, 1.0, size=(k, c)),
            freqs=rng.uniform(1.0, 7.0, size=(k, 2)),
            angles=rng.uniform(0.0, np.pi, size=k),
            amps=rng.uniform(0.2, 1.0, size=(k, c, 2)),
        )

    @property
    def n_classes(self):
        return len(self.widths)

    def sample(self, rng, n_per_class):
        c, h, w = self.shape
        k = self.n_classes
        n = k * n_per_class
        y = np.repeat(np.arange(k), n_per_class)
        if h == 1:
            t = np.arange(w) / w
            phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 2, 1))
            f = self.freqs[y][:, None, :, None] * 3.0
            waves = np.sin(2 * np.pi * f * t + phase)             # (n, 1, M, W)
            x = (self.amps[y][..., None] * waves).sum(axis=2)      # (n, C, W)
            x = x[:, :, None, :]
        else:
            yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
            ctr = self.centres[y] + rng.normal(0, 0.05, size=(n, 2))
            sig = self.widths[y][:, None, None]
            blob = np.exp(-((xx - ctr[:, 0, None, None]) ** 2 + (yy - ctr[:, 1, None, None]) ** 2)
                          / (2 * sig ** 2))
            ang = self.angles[y][:, None, None]
            phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
            grating = np.cos(2 * np.pi * self.freqs[y, 0][:, None, None]
                             * (xx * np.cos(ang) + yy * np.sin(ang)) + phase)
            pattern = 0.8 * blob + 0.8 * grating * (0.4 + blob)
            amp = 1.0 + rng.normal(0, 0.1, size=(n, 1, 1, 1))
            x = amp * self.colours[y][:, :, None, None] * pattern[:, None]
        x = x + rng.normal(0, self.noise, size=x.shape)
        return x, y


@dataclass
class TargetFamily:
    """1D multichannel signals (C, 1, W); classes differ in spectra and channel energy."""
    shape: tuple
    freqs: np.ndarray       # (K, M) cycles per window
    amps: np.ndarray        # (K, C, M)
    offsets: np.ndarray     # (K, C)
    n_users: int
    user_freq_scale: np.ndarray   # (U,)
    user_gain: np.ndarray         # (U, C)
    user_noise: np.ndarray        # (U,)

    @classmethod
    def create(cls, rng, n_classes, shape, n_users=5, n_components=2):
        c, h, w = tuple(shape)
        if h != 1:
            raise ValueError("target family is 1D (height 1)")
        return cls(
            shape=(c, h, w),
            freqs=rng.uniform(2.0, 12.0, size=(n_classes, n_components)),
            amps=rng.uniform(0.1, 1.0, size=(n_classes, c, n_components)),
            offsets=rng.normal(0.0, 0.3, size=(n_classes, c)),
            n_users=n_users,
            user_freq_scale=1.0 + rng.normal(0.0, 0.04, size=n_users),
            user_gain=np.exp(rng.normal(0.0, 0.15, size=(n_users, c))),
            user_noise=rng.uniform(0.4, 0.6, size=n_users),
        )

    @property
    def n_classes(self):
        return self.freqs.shape[0]

    def sample(self, rng, user, n_per_class):
        c, _, w = self.shape
        k = self.n_classes
        n = k * n_per_class
        y = np.repeat(np.arange(k), n_per_class)
        t = np.arange(w) / w
        f = self.freqs[y] * self.user_freq_scale[user]                 # (n, M)
        f = f * (1.0 + rng.normal(0.0, 0.02, size=f.shape))
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, f.shape[1], 1))
        waves = np.sin(2 * np.pi * f[:, None, :, None] * t + phase)     # (n, 1, M, W)
        x = (self.amps[y][..., None] * waves).sum(axis=2) + self.offsets[y][..., None]
        x = x * self.user_gain[user][None, :, None]
        x = x + rng.normal(0.0, self.user_noise[user], size=x.shape)
        return x[:, :, None, :], y
