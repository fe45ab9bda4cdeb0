"""Trainable classifiers with a scikit-learn estimator surface.

Both estimators take (n, 28, 28) normalized image arrays and integer labels,
train with Adam on cross-entropy, track per-epoch metrics in ``history_``,
and keep the best-test-accuracy parameter snapshot. The query-based
classifier additionally needs per-class support pools and an estimator for
routing gradients through its discrete queries.
"""

import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .data import NUM_CLASSES
from .gumbel import TemperatureSchedule
from .network import BaselineCnn, RvnnConfig, RvnnNetwork, cross_entropy
from .optim import Adam
from .support import SupportStore


def check_images(X, name="X"):
    """Validate (n, 28, 28) image arrays; returns a float array view."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[1:] != (28, 28):
        raise ValueError(f"{name} must have shape (n, 28, 28), got {X.shape}")
    if not np.issubdtype(X.dtype, np.floating):
        raise ValueError(f"{name} must be float images on the normalized scale, got dtype {X.dtype}")
    return X


def check_labels(y, n, name="y"):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {y.shape}")
    y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= NUM_CLASSES):
        raise ValueError(f"{name} must hold labels in 0..{NUM_CLASSES - 1}")
    return y


def _accuracy(predict_fn, X, y):
    hits = sum(predict_fn(img) == label for img, label in zip(X, y))
    return hits / len(y)


class _EpochLoop:
    """Shared epoch/batch bookkeeping: shuffling, grad scaling, NaN guard."""

    def __init__(self, params, lr, seed):
        self.params = params
        self.adam = Adam(params, lr=lr)
        self.order_rng = np.random.default_rng(seed)

    def batches(self, n, batch_size):
        order = self.order_rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]

    def step(self, batch_losses, where):
        mean = float(np.mean(batch_losses))
        if not np.isfinite(mean):
            raise RuntimeError(f"non-finite loss ({mean}) at {where}; try a lower learning rate")
        scale = 1.0 / len(batch_losses)
        for p in self.params:
            if p.grad is not None:
                p.grad *= scale
        self.adam.step()
        ad.zero_grads(self.params)
        return mean


class BaselineCnnClassifier(BaseEstimator, ClassifierMixin):
    """Plain CNN classifier (two conv + two linear layers)."""

    def __init__(self, channels=(10, 20), fc_size=68, dropout=0.0, epochs=10, batch_size=64, lr=1e-3, seed=0):
        self.channels = channels
        self.fc_size = fc_size
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y, eval_set=None, log=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        net = BaselineCnn(channels=tuple(self.channels), fc_size=self.fc_size, rng=np.random.default_rng(self.seed))
        loop = _EpochLoop(net.params(), self.lr, seed=self.seed + 1)
        drop_rng = np.random.default_rng(self.seed + 2) if self.dropout > 0.0 else None
        self.net_ = net
        self.history_ = []
        self.best_accuracy_ = -1.0
        self.best_epoch_ = -1
        self._best_snapshot = None

        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            epoch_losses = []
            for batch in loop.batches(len(X), self.batch_size):
                losses = []
                for i in batch:
                    with ad.Tape():
                        loss = cross_entropy(net.forward(X[i], dropout=self.dropout, rng=drop_rng), int(y[i]))
                    ad.backward(loss)
                    losses.append(loss.item())
                epoch_losses.append(loop.step(losses, f"epoch {epoch}"))
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "tau": float("nan"),
                "seconds": time.perf_counter() - t0,
            }
            if eval_set is not None:
                acc = _accuracy(self._predict_one, eval_set[0], eval_set[1])
                record["test_accuracy"] = acc
                if acc > self.best_accuracy_:
                    self.best_accuracy_ = acc
                    self.best_epoch_ = epoch
                    self._best_snapshot = {name: p.data.copy() for name, p in net.named_params()}
            self.history_.append(record)
            if log is not None:
                log(record)
        if self._best_snapshot is not None:
            for name, p in net.named_params():
                p.data = self._best_snapshot[name].copy()
        return self

    def _predict_one(self, image):
        return self.net_.predict_class(image)

    def predict(self, X):
        X = check_images(X)
        return np.array([self._predict_one(img) for img in X], dtype=np.int64)

    def param_count(self):
        net = getattr(self, "net_", None) or BaselineCnn(
            channels=tuple(self.channels), fc_size=self.fc_size, rng=np.random.default_rng(0)
        )
        return net.param_count()

    def named_params(self):
        return self.net_.named_params()


class RvnnClassifier(BaseEstimator, ClassifierMixin):
    """Query-based classifier: iteratively fetches class reference images."""

    def __init__(
        self,
        fusion="concat_begin",
        conv_channels=(8, 16),
        fc_size=30,
        hidden_size=16,
        steps=2,
        estimator="gumbel_softmax",
        wc_space="pixel",
        query_memory=False,
        separate_heads=False,
        epochs=10,
        batch_size=64,
        lr=1e-3,
        seed=0,
    ):
        self.fusion = fusion
        self.conv_channels = conv_channels
        self.fc_size = fc_size
        self.hidden_size = hidden_size
        self.steps = steps
        self.estimator = estimator
        self.wc_space = wc_space
        self.query_memory = query_memory
        self.separate_heads = separate_heads
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _config(self):
        return RvnnConfig(
            fusion=self.fusion,
            conv_channels=tuple(self.conv_channels),
            fc_size=self.fc_size,
            hidden_size=self.hidden_size,
            steps=self.steps,
            estimator=self.estimator,
            wc_space=self.wc_space,
            query_memory=self.query_memory,
            separate_heads=self.separate_heads,
        ).validate()

    def fit(self, X, y, support_pools=None, eval_set=None, log=None):
        X = check_images(X)
        y = check_labels(y, len(X))
        if support_pools is None:
            raise ValueError("support_pools is required: per-class reference images for the query environment")
        cfg = self._config()
        net = RvnnNetwork(cfg, np.random.default_rng(self.seed))
        self.net_ = net
        self.pools_ = support_pools
        loop = _EpochLoop(net.params(), self.lr, seed=self.seed + 1)
        store = SupportStore(support_pools, mode="standard", rng=np.random.default_rng(self.seed + 2))
        episode_rng = np.random.default_rng(self.seed + 3)
        batches_per_epoch = (len(X) + self.batch_size - 1) // self.batch_size
        schedule = TemperatureSchedule(total_steps=max(1, self.epochs * batches_per_epoch))
        self.history_ = []
        self.best_accuracy_ = -1.0
        self.best_epoch_ = -1
        self._best_snapshot = None

        iteration = 0
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            epoch_losses = []
            tau = schedule.tau_at(iteration)
            for batch in loop.batches(len(X), self.batch_size):
                tau = schedule.tau_at(iteration)
                losses = []
                for i in batch:
                    store.begin_episode(episode_rng)
                    with ad.Tape():
                        logits, _ = net.forward_episode(X[i], store, mode="train", rng=episode_rng, tau=tau)
                        loss = cross_entropy(logits, int(y[i]))
                    ad.backward(loss)
                    losses.append(loss.item())
                epoch_losses.append(loop.step(losses, f"epoch {epoch}"))
                iteration += 1
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "tau": float(tau),
                "seconds": time.perf_counter() - t0,
            }
            if eval_set is not None:
                acc = self.accuracy(eval_set[0], eval_set[1], exemplar_seed=1000 + epoch)
                record["test_accuracy"] = acc
                if acc > self.best_accuracy_:
                    self.best_accuracy_ = acc
                    self.best_epoch_ = epoch
                    self._best_snapshot = {name: p.data.copy() for name, p in net.named_params()}
            self.history_.append(record)
            if log is not None:
                log(record)
        if self._best_snapshot is not None:
            for name, p in net.named_params():
                p.data = self._best_snapshot[name].copy()
        return self

    def _store(self, query_mode, exemplar_seed):
        return SupportStore(self.pools_, mode=query_mode, rng=np.random.default_rng(exemplar_seed))

    def predict(self, X, query_mode="standard", exemplar_seed=0):
        X = check_images(X)
        store = self._store(query_mode, exemplar_seed)
        out = np.empty(len(X), dtype=np.int64)
        for i, img in enumerate(X):
            store.begin_episode()
            _, trace = self.net_.forward_episode(img, store, mode="eval")
            out[i] = trace.prediction
        return out

    def accuracy(self, X, y, query_mode="standard", exemplar_seed=0):
        return float(np.mean(self.predict(X, query_mode, exemplar_seed) == np.asarray(y)))

    def param_count(self):
        net = getattr(self, "net_", None) or RvnnNetwork(self._config(), np.random.default_rng(0))
        return net.param_count()

    def named_params(self):
        return self.net_.named_params()
