"""Recognition-by-verification network and the plain CNN baseline.

The model classifies a task image by iteratively querying a support store
for class reference images: a verification CNN fuses task and reference, a
GRU keeps state across queries, a linear head turns the state into the next
query distribution, and a prediction head reads the final state. Queries are
discrete; training routes their gradients through a Gumbel relaxation or the
straight-through estimator.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import NUM_CLASSES
from .gumbel import gumbel_max, gumbel_softmax, sample_gumbel, straight_through
from .layers import Conv, GruCell, Linear, param_count

FUSIONS = ("concat_begin", "concat_middle", "concat_end")
ESTIMATORS = ("gumbel_softmax", "straight_through")
WC_SPACES = ("pixel", "latent")


@dataclass
class RvnnConfig:
    fusion: str = "concat_begin"
    conv_channels: tuple = (8, 16)
    fc_size: int = 30
    hidden_size: int = 16
    steps: int = 2
    estimator: str = "gumbel_softmax"
    wc_space: str = "pixel"
    query_memory: bool = False
    separate_heads: bool = False
    classes: int = NUM_CLASSES

    def validate(self):
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.wc_space not in WC_SPACES:
            raise ValueError(f"wc_space must be one of {WC_SPACES}, got {self.wc_space!r}")
        if self.wc_space == "latent" and self.fusion != "concat_end":
            raise ValueError("latent-space queries need fusion='concat_end' (the mix happens after the conv tower)")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        c1, c2 = self.conv_channels
        if min(c1, c2, self.fc_size, self.hidden_size) < 1:
            raise ValueError("all layer sizes must be positive")
        if self.classes != NUM_CLASSES:
            raise ValueError(f"classes is fixed at {NUM_CLASSES} for this dataset")
        return self


@dataclass
class StepRecord:
    p: np.ndarray  # query distribution over classes
    sampled: int  # class sent to the environment
    tau: float  # temperature used (nan outside gumbel-softmax training)


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    logits: np.ndarray = None
    prediction: int = -1


def cross_entropy(logits, label):
    return ad.nll_loss(ad.log_softmax(logits), label)


class RvnnNetwork:
    """Algorithm: S_1 = 0, h_0 = 0; repeat N times: fuse, update state,
    query; predict from the final state."""

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        c1, c2 = cfg.conv_channels
        k = 5
        conv1_in = 2 if cfg.fusion == "concat_begin" else 1
        conv2_in = 2 * c1 if cfg.fusion == "concat_middle" else c1
        fc_in = (2 if cfg.fusion == "concat_end" else 1) * c2 * 16
        self.conv1 = Conv(conv1_in, c1, k, rng, name="conv1")
        self.conv2 = Conv(conv2_in, c2, k, rng, name="conv2")
        self.fc = Linear(fc_in, cfg.fc_size, rng, name="fc")
        gru_in = cfg.fc_size + (cfg.classes if cfg.query_memory else 0)
        self.gru = GruCell(gru_in, cfg.hidden_size, rng, name="gru")
        self.query_head = Linear(cfg.hidden_size, cfg.classes, rng, name="query_head")
        if cfg.separate_heads:
            self.pred_head = Linear(cfg.hidden_size, cfg.classes, rng, name="pred_head")
        else:
            self.pred_head = self.query_head

    def named_params(self):
        named = (
            self.conv1.named_params()
            + self.conv2.named_params()
            + self.fc.named_params()
            + self.gru.named_params()
            + self.query_head.named_params()
        )
        if self.pred_head is not self.query_head:
            named += self.pred_head.named_params()
        return named

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self):
        return param_count(self.params())

    def _tower(self, img):
        """Tied conv tower: (1,28,28) -> flat (16*c2,)."""
        h = ad.maxpool2d(ad.relu(self.conv1(img)))
        h = ad.maxpool2d(ad.relu(self.conv2(h)))
        return ad.reshape(h, (h.size,))

    def embed(self, img):
        """Latent-space embedding of a support image (concat_end tower)."""
        if img.ndim == 2:
            img = ad.reshape(img, (1, 28, 28))
        return self._tower(img)

    def f_cnn(self, task, support, support_is_embedding=False):
        """Fuse task image and support (image or embedding) into v."""
        if support_is_embedding and self.cfg.fusion != "concat_end":
            raise ValueError("embedding support input requires fusion='concat_end'")
        if self.cfg.fusion == "concat_begin":
            x = ad.concat([task, support], axis=0)
            h = ad.maxpool2d(ad.relu(self.conv1(x)))
            h = ad.maxpool2d(ad.relu(self.conv2(h)))
            flat = ad.reshape(h, (h.size,))
        elif self.cfg.fusion == "concat_middle":
            a = ad.maxpool2d(ad.relu(self.conv1(task)))
            b = ad.maxpool2d(ad.relu(self.conv1(support)))
            h = ad.maxpool2d(ad.relu(self.conv2(ad.concat([a, b], axis=0))))
            flat = ad.reshape(h, (h.size,))
        else:
            a = self._tower(task)
            b = support if support_is_embedding else self._tower(support)
            flat = ad.concat([a, b], axis=0)
        return ad.relu(self.fc(flat))

    def forward_episode(self, task_image, store, mode="train", rng=None, tau=1.0, sample_eval=False):
        """One full episode: N queries, then a prediction.

        task_image: (28, 28) array. mode 'train' draws queries through the
        configured estimator (differentiable); mode 'eval' picks
        argmax(p_n) and issues hard queries (or samples when sample_eval).
        Returns (prediction logits Tensor, EpisodeTrace).
        """
        cfg = self.cfg
        if task_image.shape != (28, 28):
            raise ad.ShapeError(f"task image must be (28, 28), got {task_image.shape}")
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if mode == "train" and rng is None:
            raise ValueError("train mode needs an rng for query noise")

        task = ad.tensor(task_image[None].astype(np.float64))
        latent = cfg.wc_space == "latent"
        zero_image = ad.tensor(np.zeros((1, 28, 28)))
        support = self.embed(zero_image) if latent else zero_image
        h = ad.tensor(np.zeros(cfg.hidden_size))
        prev_query = ad.tensor(np.zeros(cfg.classes))
        trace = EpisodeTrace()

        for _ in range(cfg.steps):
            v = self.f_cnn(task, support, support_is_embedding=latent)
            x = ad.concat([v, prev_query], axis=0) if cfg.query_memory else v
            h = self.gru(x, h)
            query_logits = self.query_head(h)
            p = ad.softmax(query_logits)

            if mode == "train":
                g = sample_gumbel((cfg.classes,), rng)
                log_p = ad.log_softmax(query_logits)
                if cfg.estimator == "gumbel_softmax":
                    q = gumbel_softmax(log_p, g, tau)
                    step_tau = float(tau)
                else:
                    q = straight_through(log_p, g)
                    step_tau = float("nan")
                support = store.query_soft(q, space=cfg.wc_space, embed=self.embed if latent else None)
                if not latent:
                    support = ad.reshape(support, (1, 28, 28))
                sampled = int(np.argmax(q.data))
                query_vec = q
            else:
                if sample_eval:
                    g = sample_gumbel((cfg.classes,), rng if rng is not None else np.random.default_rng())
                    sampled = int(np.argmax(gumbel_max(ad.log_softmax(query_logits).detach(), g).data))
                else:
                    sampled = int(np.argmax(p.data))
                step_tau = float("nan")
                img = store.query_hard(sampled)
                support = self.embed(ad.tensor(img[None])) if latent else ad.tensor(img[None].astype(np.float64))
                hot = np.zeros(cfg.classes)
                hot[sampled] = 1.0
                query_vec = ad.tensor(hot)

            prev_query = query_vec
            trace.steps.append(StepRecord(p=p.data.copy(), sampled=sampled, tau=step_tau))

        logits = self.pred_head(h)
        trace.logits = logits.data.copy()
        trace.prediction = int(np.argmax(logits.data))
        return logits, trace


class BaselineCnn:
    """Two conv + two linear layers; the standard small MNIST shape."""

    def __init__(self, channels=(10, 20), fc_size=68, rng=None, name="baseline"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2 = channels
        self.conv1 = Conv(1, c1, 5, rng, name="conv1")
        self.conv2 = Conv(c1, c2, 5, rng, name="conv2")
        self.fc1 = Linear(c2 * 16, fc_size, rng, name="fc1")
        self.fc2 = Linear(fc_size, NUM_CLASSES, rng, name="fc2")

    def forward(self, image, dropout=0.0, rng=None):
        """(28, 28) image -> logits (10,).

        dropout > 0 with an rng applies inverted dropout after each hidden
        activation (training only; leave both unset for evaluation).
        """

        def drop(t):
            if dropout <= 0.0 or rng is None:
                return t
            mask = (rng.random(t.data.shape) >= dropout) / (1.0 - dropout)
            return ad.mul(t, ad.tensor(mask))

        x = ad.tensor(np.asarray(image, dtype=np.float64)[None]) if not isinstance(image, ad.Tensor) else image
        h = drop(ad.maxpool2d(ad.relu(self.conv1(x))))
        h = drop(ad.maxpool2d(ad.relu(self.conv2(h))))
        h = drop(ad.relu(self.fc1(ad.reshape(h, (h.size,)))))
        return self.fc2(h)

    def predict_class(self, image):
        return int(np.argmax(self.forward(image).data))

    def named_params(self):
        return (
            self.conv1.named_params() + self.conv2.named_params() + self.fc1.named_params() + self.fc2.named_params()
        )

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self):
        return param_count(self.params())
