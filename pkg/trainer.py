"""
Tiny differentiable classifiers and the three training procedures the audits
compare: empirical risk minimization (ERM), online group-DRO, and deep feature
reweighting (DFR, last-layer refit on group-balanced subsets).

Models are plain numpy: a flat float64 weight vector plus the layer widths.
Gradients are analytic (backpropagation through softmax cross-entropy).
"""
import struct
import logging
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression

from core import (
    SampleTable, EmbeddingMatrix, RngStream,
    UsageError, DataValidationError, NumericError, ParseError, atomic_write,
)

logger = logging.getLogger('spaudit.trainer')

# Probabilities are clipped to this margin before any log.
CLAMP_EPS = 1e-7

DFR_MAX_ITER = 1000
DFR_TOL = 1e-8

MODEL_MAGIC = b"SPML1"
ARCH_CODES = {('linear', 'relu'): 0, ('linear', 'tanh'): 0, ('mlp', 'relu'): 1, ('mlp', 'tanh'): 2}
ARCH_FROM_CODE = {0: ('linear', 'relu'), 1: ('mlp', 'relu'), 2: ('mlp', 'tanh')}

METHODS = ('erm', 'dro', 'dfr')


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "linear"
    hidden: Tuple[int, ...] = ()
    activation: str = "relu"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self):
        if self.arch not in ('linear', 'mlp'):
            raise UsageError(f"Unknown arch '{self.arch}', expected linear or mlp")
        if self.activation not in ('relu', 'tanh'):
            raise UsageError(f"Unknown activation '{self.activation}', expected relu or tanh")
        if self.arch == 'linear' and self.hidden:
            raise UsageError("A linear model takes no hidden widths")
        if self.arch == 'mlp' and not self.hidden:
            raise UsageError("An mlp needs at least one hidden width")
        if any(h < 1 for h in self.hidden):
            raise UsageError(f"Hidden widths must be >= 1, got {list(self.hidden)}")

    def layer_dims(self, input_dim: int, n_classes: int) -> Tuple[int, ...]:
        return (int(input_dim),) + self.hidden + (int(n_classes),)

    @property
    def label(self) -> str:
        if self.arch == 'linear':
            return 'linear'
        return "mlp-" + "x".join(str(h) for h in self.hidden)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "erm"
    lr: float = 0.1
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    dro_eta: Optional[float] = None
    dro_adjust_C: Optional[float] = None
    dfr_reg: Optional[str] = None
    dfr_lambda: Optional[float] = None
    dfr_subsets: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise UsageError(f"Unknown training method '{self.method}', expected one of {METHODS}")
        if not self.lr > 0:
            raise UsageError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch_size >= 1")
        dro_fields = {'dro_eta': self.dro_eta, 'dro_adjust_C': self.dro_adjust_C}
        dfr_fields = {'dfr_reg': self.dfr_reg, 'dfr_lambda': self.dfr_lambda, 'dfr_subsets': self.dfr_subsets}
        for name, value in dro_fields.items():
            if (value is not None) != (self.method == 'dro'):
                raise UsageError(f"'{name}' must be set exactly when method is dro (method={self.method})")
        for name, value in dfr_fields.items():
            if (value is not None) != (self.method == 'dfr'):
                raise UsageError(f"'{name}' must be set exactly when method is dfr (method={self.method})")
        if self.method == 'dro' and (self.dro_eta < 0 or self.dro_adjust_C < 0):
            raise UsageError("dro_eta and dro_adjust_C must be >= 0")
        if self.method == 'dfr':
            if self.dfr_reg not in ('l1', 'l2'):
                raise UsageError(f"dfr_reg must be l1 or l2, got {self.dfr_reg}")
            if self.dfr_lambda < 0 or self.dfr_subsets < 1:
                raise UsageError("dfr_lambda must be >= 0 and dfr_subsets >= 1")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        """A config with the method-specific defaults filled in."""
        defaults = {}
        if method == 'dro':
            defaults = {'dro_eta': 0.01, 'dro_adjust_C': 0.0}
        elif method == 'dfr':
            defaults = {'dfr_reg': 'l1', 'dfr_lambda': 1e-3, 'dfr_subsets': 10}
        defaults.update(overrides)
        return cls(method=method, **defaults)

    def base_config(self) -> "TrainConfig":
        """The ERM config that trains the feature extractor DFR starts from."""
        return replace(self, method='erm', dro_eta=None, dro_adjust_C=None,
                       dfr_reg=None, dfr_lambda=None, dfr_subsets=None)


def param_count(dims: Sequence[int]) -> int:
    return sum(dims[l] * dims[l + 1] + dims[l + 1] for l in range(len(dims) - 1))


def _layer_slices(dims: Sequence[int]) -> List[Tuple[slice, slice]]:
    """(W slice, b slice) per layer; W is stored row-major as (fan_in, fan_out)."""
    slices = []
    offset = 0
    for l in range(len(dims) - 1):
        w_size = dims[l] * dims[l + 1]
        slices.append((slice(offset, offset + w_size), slice(offset + w_size, offset + w_size + dims[l + 1])))
        offset += w_size + dims[l + 1]
    return slices


def _unpack(weights: np.ndarray, dims: Sequence[int]) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [
        (weights[ws].reshape(dims[l], dims[l + 1]), weights[bs])
        for l, (ws, bs) in enumerate(_layer_slices(dims))
    ]


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    dims: Tuple[int, ...]
    weights: np.ndarray
    history: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))
        weights = np.array(self.weights, dtype=np.float64, copy=True)
        weights.setflags(write=False)
        object.__setattr__(self, 'weights', weights)
        if len(self.dims) != len(self.config.hidden) + 2:
            raise DataValidationError(f"layer widths {self.dims} do not match config {self.config.label}")
        if len(weights) != param_count(self.dims):
            raise DataValidationError(f"weight vector has {len(weights)} entries, layers {self.dims} need {param_count(self.dims)}")
        if not np.all(np.isfinite(weights)):
            raise NumericError("model weights contain non-finite values")

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def n_classes(self) -> int:
        return self.dims[-1]

    @property
    def embedding_dim(self) -> int:
        return self.dims[-2]

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return _unpack(self.weights, self.dims)

    def head_slice(self) -> slice:
        """Slice of the flat weight vector holding the final linear layer."""
        ws, bs = _layer_slices(self.dims)[-1]
        return slice(ws.start, bs.stop)


def init_model(model_cfg: ModelConfig, input_dim: int, n_classes: int, rng: RngStream) -> Model:
    """Gaussian weights scaled by init_scale / sqrt(fan_in), zero biases."""
    dims = model_cfg.layer_dims(input_dim, n_classes)
    gen = rng.generator()
    weights = np.zeros(param_count(dims))
    for l, (ws, _) in enumerate(_layer_slices(dims)):
        weights[ws] = gen.standard_normal(ws.stop - ws.start) * (model_cfg.init_scale / np.sqrt(dims[l]))
    return Model(config=model_cfg, dims=dims, weights=weights)


# --- Forward / backward ---
def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def _forward(weights: np.ndarray, dims: Sequence[int], activation: str, X: np.ndarray):
    """Returns (logits, inputs to each layer, hidden pre-activations)."""
    layers = _unpack(weights, dims)
    h = X
    inputs = []
    pre = []
    for l, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if l < len(layers) - 1:
            pre.append(z)
            h = _activate(z, activation)
        else:
            h = z
    return h, inputs, pre


def _per_sample_loss(logits: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(y)), y], logp


def _backward(weights: np.ndarray, dims: Sequence[int], activation: str, logp: np.ndarray,
              inputs: List[np.ndarray], pre: List[np.ndarray], y: np.ndarray,
              sample_weight: np.ndarray, weight_decay: float) -> np.ndarray:
    layers = _unpack(weights, dims)
    slices = _layer_slices(dims)
    grad = np.empty_like(weights)
    delta = np.exp(logp)
    delta[np.arange(len(y)), y] -= 1.0
    delta *= sample_weight[:, None]
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        ws, bs = slices[l]
        grad[ws] = (inputs[l].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W.T) * _activation_grad(pre[l - 1], inputs[l], activation)
    return grad + weight_decay * weights


def loss_and_gradient(weights: np.ndarray, dims: Sequence[int], activation: str, X: np.ndarray,
                      y: np.ndarray, sample_weight: Optional[np.ndarray] = None,
                      weight_decay: float = 0.0) -> Tuple[float, np.ndarray]:
    """
    Objective sum_i w_i * CE_i + (weight_decay / 2) * ||theta||^2 and its gradient.
    Default weights are 1/n (mean cross-entropy).
    """
    y = np.asarray(y, dtype=np.int64)
    if sample_weight is None:
        sample_weight = np.full(len(y), 1.0 / len(y))
    logits, inputs, pre = _forward(weights, dims, activation, X)
    losses, logp = _per_sample_loss(logits, y)
    grad = _backward(weights, dims, activation, logp, inputs, pre, y, sample_weight, weight_decay)
    loss = float(sample_weight @ losses) + 0.5 * weight_decay * float(weights @ weights)
    return loss, grad


def _mean_loss(weights: np.ndarray, model: Model, X: np.ndarray, y: np.ndarray) -> float:
    logits, _, _ = _forward(weights, model.dims, model.config.activation, X)
    losses, _ = _per_sample_loss(logits, y)
    return float(losses.mean())


# Batch weighting: (batch sample positions, per-sample losses) -> per-sample weights.
BatchWeighting = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _uniform_weighting(idx: np.ndarray, losses: np.ndarray) -> np.ndarray:
    return np.full(len(idx), 1.0 / len(idx))


def _run_sgd(model: Model, samples: SampleTable, train_cfg: TrainConfig, order_rng: RngStream,
             weighting: BatchWeighting) -> Model:
    """Plain mini-batch SGD, no momentum; weight decay enters the gradient as L2."""
    X, y = samples.features, samples.labels
    n = len(samples)
    activation = model.config.activation
    theta = np.array(model.weights, copy=True)
    gen = order_rng.generator()
    history = [_mean_loss(theta, model, X, y)]

    with np.errstate(over='ignore', invalid='ignore'):
        for epoch in range(train_cfg.epochs):
            order = gen.permutation(n)
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                logits, inputs, pre = _forward(theta, model.dims, activation, X[idx])
                losses, logp = _per_sample_loss(logits, y[idx])
                if not np.all(np.isfinite(losses)):
                    raise NumericError(f"Non-finite loss in epoch {epoch + 1}; the learning rate "
                                       f"(lr={train_cfg.lr}) is probably too high.")
                w = weighting(idx, losses)
                theta -= train_cfg.lr * _backward(theta, model.dims, activation, logp, inputs, pre,
                                                  y[idx], w, train_cfg.weight_decay)
            epoch_loss = _mean_loss(theta, model, X, y)
            if not np.isfinite(epoch_loss) or not np.all(np.isfinite(theta)):
                raise NumericError(f"Non-finite loss after epoch {epoch + 1}; the learning rate "
                                   f"(lr={train_cfg.lr}) is probably too high.")
            history.append(epoch_loss)

    logger.debug(f"SGD finished: loss {history[0]:.4f} -> {history[-1]:.4f} over {train_cfg.epochs} epochs")
    return Model(config=model.config, dims=model.dims, weights=theta, history=tuple(history))


def _check_samples(samples: SampleTable):
    if len(samples) < 1:
        raise DataValidationError("training needs at least one sample")


def _n_classes(samples: SampleTable, n_classes: Optional[int]) -> int:
    return int(n_classes) if n_classes is not None else int(samples.labels.max()) + 1


def train_erm(model_cfg: ModelConfig, samples: SampleTable, train_cfg: TrainConfig, rng: RngStream,
              n_classes: Optional[int] = None) -> Model:
    _check_samples(samples)
    model = init_model(model_cfg, samples.n_features, _n_classes(samples, n_classes), rng.child("init", model_cfg.seed))
    return _run_sgd(model, samples, train_cfg, rng.child("order"), _uniform_weighting)


class GroupDROWeights:
    """
    Online group weights q over the groups present in the training samples.

    Each step: groups in the batch report their mean loss, absent groups keep
    their last observed loss, then q_g <- q_g * exp(eta * (l_g + C / sqrt(n_g)))
    followed by normalization (done in log space). The batch objective is
    sum_g q_g * l_g, realized as per-sample weights q_g / n_{g,batch}.
    """

    def __init__(self, sample_groups: np.ndarray, eta: float, adjust_C: float,
                 initial_losses: np.ndarray):
        self.group_ids, self.positions, counts = np.unique(sample_groups, return_inverse=True, return_counts=True)
        self.eta = eta
        self.adjust = adjust_C / np.sqrt(counts) if adjust_C > 0 else np.zeros(len(counts))
        self.last_loss = np.array(initial_losses, dtype=np.float64)
        self.log_q = np.zeros(len(self.group_ids))
        self.q = softmax(self.log_q)

    def __call__(self, idx: np.ndarray, losses: np.ndarray) -> np.ndarray:
        pos = self.positions[idx]
        present = np.unique(pos)
        masks = {}
        for p in present:
            masks[p] = pos == p
            self.last_loss[p] = losses[masks[p]].mean()
        self.log_q = self.log_q + self.eta * (self.last_loss + self.adjust)
        self.q = softmax(self.log_q)
        weights = np.zeros(len(idx))
        for p in present:
            weights[masks[p]] = self.q[p] / masks[p].sum()
        return weights


def _group_losses(model: Model, samples: SampleTable, positions: np.ndarray, n_groups: int) -> np.ndarray:
    logits, _, _ = _forward(model.weights, model.dims, model.config.activation, samples.features)
    losses, _ = _per_sample_loss(logits, samples.labels)
    return np.array([losses[positions == p].mean() for p in range(n_groups)])


def train_group_dro(model_cfg: ModelConfig, samples: SampleTable, train_cfg: TrainConfig, rng: RngStream,
                    n_classes: Optional[int] = None) -> Model:
    if train_cfg.method != 'dro':
        raise UsageError(f"train_group_dro needs a dro config, got method={train_cfg.method}")
    _check_samples(samples)
    model = init_model(model_cfg, samples.n_features, _n_classes(samples, n_classes), rng.child("init", model_cfg.seed))
    group_ids, positions = np.unique(samples.groups, return_inverse=True)
    initial = _group_losses(model, samples, positions, len(group_ids))
    weighting = GroupDROWeights(samples.groups, train_cfg.dro_eta, train_cfg.dro_adjust_C, initial)
    trained = _run_sgd(model, samples, train_cfg, rng.child("order"), weighting)
    summary = ", ".join(f"{g}: {q:.3f}" for g, q in zip(group_ids, weighting.q))
    logger.debug(f"Final DRO group weights {{{summary}}}")
    return trained


# --- DFR ---
def fit_logistic_head(embeddings: np.ndarray, labels: np.ndarray, n_classes: int, reg: str, lam: float,
                      max_iter: int = DFR_MAX_ITER, tol: float = DFR_TOL,
                      random_state: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Regularized multinomial logistic regression on fixed embeddings.
    Minimizes mean cross-entropy + lam * ||W||_1 (l1) or lam/2 * ||W||^2 (l2);
    the bias is never penalized. Returns W (d x n_classes) and b.
    """
    n, d = embeddings.shape
    present = np.unique(labels)
    if len(present) < 2:
        raise DataValidationError(f"logistic head needs at least two classes, got {present.tolist()}")
    if lam == 0:
        clf = LogisticRegression(penalty=None, solver='lbfgs', max_iter=max_iter, tol=tol,
                                 random_state=random_state)
    else:
        solver = 'saga' if reg == 'l1' else 'lbfgs'
        clf = LogisticRegression(penalty=reg, C=1.0 / (lam * n), solver=solver, max_iter=max_iter, tol=tol,
                                 random_state=random_state)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', ConvergenceWarning)
        clf.fit(embeddings, labels)
    if not (np.isfinite(clf.coef_).all() and np.isfinite(clf.intercept_).all()):
        raise NumericError(f"logistic head diverged (reg={reg}, lam={lam}) on {n} samples")

    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    if len(clf.classes_) == 2:
        # binary fits give one logit; softmax over [0, z] reproduces the sigmoid
        W[:, clf.classes_[1]] = clf.coef_[0]
        b[clf.classes_[1]] = clf.intercept_[0]
    else:
        W[:, clf.classes_] = clf.coef_.T
        b[clf.classes_] = clf.intercept_
    missing = sorted(set(range(n_classes)) - set(int(c) for c in clf.classes_))
    if missing:
        logger.warning(f"Classes {missing} absent from the head's training subset; their logits stay at 0")
    return W, b


def balanced_subset(groups: np.ndarray, group_ids: Sequence[int], gen: np.random.Generator) -> np.ndarray:
    """Every group downsampled without replacement to the smallest group's size."""
    members = [np.flatnonzero(groups == g) for g in group_ids]
    size = min(len(m) for m in members)
    return np.concatenate([gen.choice(m, size, replace=False) for m in members])


def dfr_retrain(model: Model, samples: SampleTable, train_cfg: TrainConfig, rng: RngStream,
                group_ids: Optional[Sequence[int]] = None) -> Model:
    """
    Freezes everything but the final linear layer and replaces it with the
    average of dfr_subsets regularized logistic heads, each fit on a
    group-balanced subset of the training samples.
    """
    if train_cfg.method != 'dfr':
        raise UsageError(f"dfr_retrain needs a dfr config, got method={train_cfg.method}")
    _check_samples(samples)
    if group_ids is None:
        group_ids = sorted(set(int(g) for g in samples.groups))
    empty = [g for g in group_ids if not np.any(samples.groups == g)]
    if empty:
        raise DataValidationError(f"group-balanced subset impossible: group(s) {empty} have no samples")

    embeddings = extract_embeddings(model, samples).matrix
    heads_W, heads_b = [], []
    for s in range(train_cfg.dfr_subsets):
        idx = balanced_subset(samples.groups, group_ids, rng.child("dfr-subset", s).generator())
        W, b = fit_logistic_head(embeddings[idx], samples.labels[idx], model.n_classes,
                                 train_cfg.dfr_reg, train_cfg.dfr_lambda, random_state=s)
        heads_W.append(W)
        heads_b.append(b)

    weights = np.array(model.weights, copy=True)
    weights[model.head_slice()] = np.concatenate([np.mean(heads_W, axis=0).ravel(), np.mean(heads_b, axis=0)])
    logger.debug(f"DFR head refit on {train_cfg.dfr_subsets} balanced subset(s) of "
                 f"{len(idx)} samples ({train_cfg.dfr_reg}, lambda={train_cfg.dfr_lambda})")
    return Model(config=model.config, dims=model.dims, weights=weights, history=model.history)


def train_model(model_cfg: ModelConfig, samples: SampleTable, train_cfg: TrainConfig, rng: RngStream,
                n_classes: Optional[int] = None, group_ids: Optional[Sequence[int]] = None) -> Model:
    """Dispatches on train_cfg.method; dfr first trains an ERM base with the same rng."""
    if train_cfg.method == 'erm':
        return train_erm(model_cfg, samples, train_cfg, rng, n_classes)
    if train_cfg.method == 'dro':
        return train_group_dro(model_cfg, samples, train_cfg, rng, n_classes)
    base = train_erm(model_cfg, samples, train_cfg.base_config(), rng, n_classes)
    return dfr_retrain(base, samples, train_cfg, rng.child("dfr"), group_ids)


# --- Inference ---
def _check_features(model: Model, features: np.ndarray) -> np.ndarray:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != model.input_dim:
        raise DataValidationError(f"model expects {model.input_dim} features, got {features.shape[1]}")
    return features


def predict_proba(model: Model, features: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, one row per input row."""
    features = _check_features(model, features)
    logits, _, _ = _forward(model.weights, model.dims, model.config.activation, features)
    return softmax(logits, axis=1)


def true_class_confidence(model: Model, samples: SampleTable) -> Tuple[np.ndarray, np.ndarray]:
    """(clamped true-class probability, argmax correctness) per sample."""
    probs = predict_proba(model, samples.features)
    rows = np.arange(len(samples))
    confidence = np.clip(probs[rows, samples.labels], CLAMP_EPS, 1.0 - CLAMP_EPS)
    correct = probs.argmax(axis=1) == samples.labels
    return confidence, correct


def extract_embeddings(model: Model, samples: SampleTable) -> EmbeddingMatrix:
    """Penultimate activations (the raw features for a linear model), rows in sample order."""
    features = _check_features(model, samples.features)
    _, inputs, _ = _forward(model.weights, model.dims, model.config.activation, features)
    return EmbeddingMatrix(samples.sample_ids, inputs[-1])


@dataclass(frozen=True)
class UtilityReport:
    accuracy: float
    group_accuracy: Dict[int, float]
    group_counts: Dict[int, int]
    worst_group_accuracy: float
    worst_group: int


def evaluate_utility(model: Model, samples: SampleTable) -> UtilityReport:
    """Average accuracy and per-group accuracy; WGA is the minimum over non-empty groups."""
    predictions = predict_proba(model, samples.features).argmax(axis=1)
    hits = predictions == samples.labels
    group_accuracy, group_counts = {}, {}
    for g in np.unique(samples.groups):
        mask = samples.groups == g
        group_accuracy[int(g)] = float(hits[mask].mean())
        group_counts[int(g)] = int(mask.sum())
    worst = min(group_accuracy, key=lambda g: (group_accuracy[g], g))
    return UtilityReport(
        accuracy=float(hits.mean()), group_accuracy=group_accuracy, group_counts=group_counts,
        worst_group_accuracy=group_accuracy[worst], worst_group=worst,
    )


# --- Model file ---
def write_model(model: Model, path: str):
    """SPML1 file: magic, u32 arch code, u32 width count, u32 widths, f64 weights (little-endian)."""
    code = ARCH_CODES[(model.config.arch, model.config.activation)]
    header = MODEL_MAGIC + struct.pack('<II', code, len(model.dims)) + struct.pack(f'<{len(model.dims)}I', *model.dims)
    with atomic_write(path, 'wb') as handle:
        handle.write(header)
        handle.write(np.asarray(model.weights, dtype='<f8').tobytes())


def read_model(path: str) -> Model:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except FileNotFoundError:
        raise ParseError("model file not found", path=path)
    if not blob.startswith(MODEL_MAGIC):
        raise ParseError("not an SPML1 model file (bad magic)", path=path)
    offset = len(MODEL_MAGIC)
    try:
        code, n_dims = struct.unpack_from('<II', blob, offset)
        offset += 8
        dims = struct.unpack_from(f'<{n_dims}I', blob, offset)
        offset += 4 * n_dims
    except struct.error as e:
        raise ParseError(f"truncated header: {e}", path=path)
    if code not in ARCH_FROM_CODE or n_dims < 2:
        raise ParseError(f"unknown arch code {code} or too few layers ({n_dims})", path=path)
    arch, activation = ARCH_FROM_CODE[code]
    if (arch == 'linear') != (n_dims == 2):
        raise ParseError(f"arch code {code} disagrees with {n_dims} layer widths", path=path)
    expected = param_count(dims)
    payload = blob[offset:]
    if len(payload) != 8 * expected:
        raise ParseError(f"expected {expected} weights, file holds {len(payload) / 8:g}", path=path)
    weights = np.frombuffer(payload, dtype='<f8').astype(np.float64)
    config = ModelConfig(arch=arch, hidden=tuple(dims[1:-1]), activation=activation)
    return Model(config=config, dims=dims, weights=weights)
