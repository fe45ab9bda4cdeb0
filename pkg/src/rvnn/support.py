"""The non-differentiable query environment.

A store holds per-class support pools and answers class queries with
reference images. Hard queries return plain arrays (never tape-recorded:
gradients reach the query distribution only through the estimator
surrogates). Soft queries mix this episode's exemplars under simplex weights
and are differentiable w.r.t. those weights.

Modes: ``standard`` serves the queried class, ``blank`` serves zero images,
``mistaken`` serves a uniformly drawn wrong class.
"""

import numpy as np

from . import autodiff as ad
from .data import NUM_CLASSES

MODES = ("standard", "blank", "mistaken")


class SupportStore:
    def __init__(self, pools, mode="standard", rng=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        pools = [np.asarray(p) for p in pools]
        if len(pools) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} class pools, got {len(pools)}")
        if mode != "blank" and any(len(p) == 0 for p in pools):
            empty = [c for c, p in enumerate(pools) if len(p) == 0]
            raise ValueError(f"empty support pool for classes {empty}")
        self.pools = pools
        self.mode = mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.image_shape = pools[0][0].shape if len(pools[0]) else (28, 28)
        self.exemplars = None

    def begin_episode(self, rng=None):
        """Freeze one uniformly drawn exemplar per class for this episode."""
        r = rng if rng is not None else self.rng
        if self.mode == "blank":
            self.exemplars = np.zeros((NUM_CLASSES,) + self.image_shape, dtype=np.float32)
        else:
            self.exemplars = np.stack([p[r.integers(len(p))] for p in self.pools])
        return self.exemplars

    def _need_exemplars(self):
        if self.exemplars is None:
            raise RuntimeError("no active episode; call begin_episode first")

    def query_hard(self, class_index):
        """Reference image for one class, as a plain array (off-tape)."""
        c = int(class_index)
        if not 0 <= c < NUM_CLASSES:
            raise ValueError(f"class index {c} out of range 0..{NUM_CLASSES - 1}")
        if self.mode == "blank":
            return np.zeros(self.image_shape, dtype=np.float32)
        self._need_exemplars()
        if self.mode == "mistaken":
            wrong = int(self.rng.integers(NUM_CLASSES - 1))
            if wrong >= c:
                wrong += 1
            return self.exemplars[wrong]
        return self.exemplars[c]

    def query_soft(self, weights, space="pixel", embed=None):
        """Simplex-weighted mix of this episode's exemplars.

        pixel space mixes images; latent space mixes embed(exemplar) values
        (one embed call per class). Differentiable w.r.t. ``weights``.
        """
        w = weights.data
        if w.shape != (NUM_CLASSES,):
            raise ad.ShapeError(f"query weights must have shape ({NUM_CLASSES},), got {w.shape}")
        if abs(w.sum() - 1.0) > 1e-6 or w.min() < -1e-6:
            raise ValueError(f"query weights off the simplex: sum={w.sum():.8f}, min={w.min():.3g}")
        if space not in ("pixel", "latent"):
            raise ValueError(f"space must be 'pixel' or 'latent', got {space!r}")
        self._need_exemplars()
        if self.mode == "mistaken":
            shift = 1 + int(self.rng.integers(NUM_CLASSES - 1))
            table = self.exemplars[(np.arange(NUM_CLASSES) + shift) % NUM_CLASSES]
        else:
            table = self.exemplars
        parts = [ad.tensor(img) for img in table]
        if space == "latent":
            if embed is None:
                raise ValueError("latent-space queries need an embed function")
            parts = [embed(p) for p in parts]
        return ad.weighted_sum(weights, parts)
