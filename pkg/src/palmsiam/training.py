"""Episodic training: pair losses, Adam, LR-plateau reduction, early stopping.

One episode is one optimizer step over a balanced 2-way n-shot batch
(n genuine + n imposter pairs). The training product is the parameter set of
the best-validation-loss epoch, with the validation-selected decision
threshold stored alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PairExample, sample_episode, sample_pairs
from .model import (
    SiameseParams,
    Tensor,
    _checkpoint_entries,
    extract_features,
    fuse,
    init_params,
    pair_distance,
    probability,
    probability_values,
)
from .tensor import clamp, gather_rows, log, relu, reshape

K_WAY = 2
BCE_EPS = 1e-7

LOSS_KINDS = ("contrastive", "bce")


@dataclass
class TrainConfig:
    """Everything that determines a run; defaults are the documented baseline."""

    loss: str = "contrastive"
    n: int = 5
    margin: float = 1.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    episodes_per_epoch: int = 100
    max_epochs: int = 50
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    plateau_min_delta: float = 1e-4
    lr_floor: float = 1e-6
    early_stop_patience: int = 7
    dropout_rate: float = 0.3
    val_pairs_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"Adam betas must be in (0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.episodes_per_epoch < 1 or self.max_epochs < 1:
            raise ValueError("episodes_per_epoch and max_epochs must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.plateau_min_delta < 0 or self.lr_floor <= 0:
            raise ValueError("plateau_min_delta must be >= 0 and lr_floor positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.val_pairs_per_class < 1:
            raise ValueError(f"val_pairs_per_class must be >= 1, got {self.val_pairs_per_class}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_accuracy,lr"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.val_accuracy:.6f},{r.lr:.6f}"
            )
        return "\n".join(lines) + "\n"


# -- losses ------------------------------------------------------------------------


def contrastive_loss(d, genuine: bool, margin: float = 1.0):
    """Pull genuine pairs together, push imposters beyond the margin.

    0.5*d^2 for genuine pairs; 0.5*max(0, margin - d)^2 for imposters.
    Accepts a graph-tracked scalar (returns one) or a plain float.
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    if isinstance(d, Tensor):
        if genuine:
            return d * d * 0.5
        slack = relu(margin - d)
        return slack * slack * 0.5
    d = float(d)
    if genuine:
        return 0.5 * d * d
    slack = max(0.0, margin - d)
    return 0.5 * slack * slack


def bce_loss(p, genuine: bool):
    """Binary cross-entropy on the genuine-probability, clamped away from 0/1."""
    if isinstance(p, Tensor):
        pc = clamp(p, BCE_EPS, 1.0 - BCE_EPS)
        if genuine:
            return -log(pc)
        return -log(1.0 - pc)
    pc = min(max(float(p), BCE_EPS), 1.0 - BCE_EPS)
    if genuine:
        return -math.log(pc)
    return -math.log(1.0 - pc)


# -- optimizer and schedules --------------------------------------------------------


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_params}
        self.v = {name: np.zeros_like(t.data) for name, t in named_params}


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    state.step_count += 1
    t = state.step_count
    b1corr = 1.0 - state.beta1 ** t
    b2corr = 1.0 - state.beta2 ** t
    for name, param in named_params:
        g = param.grad
        if g is None:
            raise ValueError(f"adam_step: no gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = np.sqrt(v)
        update *= 1.0 / np.sqrt(b2corr)
        update += state.eps
        np.divide(m, update, out=update)
        update *= lr / b1corr
        param.data -= update


class ReduceLROnPlateau:
    """Multiply lr by `factor` after `patience` epochs without improvement."""

    def __init__(
        self,
        lr: float,
        patience: int = 3,
        factor: float = 0.5,
        min_delta: float = 1e-4,
        floor: float = 1e-6,
    ):
        if lr <= 0 or not 0.0 < factor < 1.0 or patience < 1:
            raise ValueError("need lr > 0, 0 < factor < 1, patience >= 1")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.floor = floor
        self.best: float | None = None
        self.bad = 0

    def update(self, val_loss: float) -> float:
        if self.best is None or val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr = max(self.floor, self.lr * self.factor)
                self.bad = 0
        return self.lr


class EarlyStopper:
    """Signal stop after `patience` consecutive non-improving epochs."""

    def __init__(self, patience: int = 7, min_delta: float = 1e-4):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.best: float | None = None
        self.bad = 0

    def update(self, val_loss: float) -> bool:
        if self.best is None or val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


# -- the loop ------------------------------------------------------------------------


def _pair_batch(pairs: list[PairExample]) -> np.ndarray:
    """Stack every image of every pair: rows [a.L, a.R, b.L, b.R] per pair."""
    images = []
    for pair in pairs:
        images.append(pair.sample_a.left_image)
        images.append(pair.sample_a.right_image)
        images.append(pair.sample_b.left_image)
        images.append(pair.sample_b.right_image)
    return np.stack(images)[:, None, :, :]


def _episode_step(
    params: SiameseParams,
    pairs: list[PairExample],
    config: TrainConfig,
    trainable,
    adam: AdamState,
    lr: float,
    dropout_rng: np.random.Generator,
) -> float:
    for _, t in trainable:
        t.zero_grad()
    emb = extract_features(
        params.extractor,
        _pair_batch(pairs),
        training=True,
        dropout_rate=config.dropout_rate,
        rng=dropout_rng,
    )
    fused_dim = 2 * emb.shape[1]
    total = None
    for j, pair in enumerate(pairs):
        fa = reshape(fuse(gather_rows(emb, [4 * j]), gather_rows(emb, [4 * j + 1])), (fused_dim,))
        fb = reshape(fuse(gather_rows(emb, [4 * j + 2]), gather_rows(emb, [4 * j + 3])), (fused_dim,))
        d = pair_distance(fa, fb)
        if config.loss == "contrastive":
            pair_loss = contrastive_loss(d, pair.genuine, config.margin)
        else:
            pair_loss = bce_loss(probability(d, params.theta0, params.theta1), pair.genuine)
        total = pair_loss if total is None else total + pair_loss
    loss = total * (1.0 / len(pairs))
    loss.backward()
    adam_step(trainable, adam, lr)
    return loss.item()


def _fused_embeddings(params: SiameseParams, pairs: list[PairExample]):
    """Embed each distinct sample once; return fused vectors + pair indices."""
    from .model import embed_samples  # local import keeps module load light

    order: dict[int, int] = {}
    samples = []
    for pair in pairs:
        for s in (pair.sample_a, pair.sample_b):
            if id(s) not in order:
                order[id(s)] = len(samples)
                samples.append(s)
    lefts = np.stack([s.left_image for s in samples])[:, None, :, :]
    rights = np.stack([s.right_image for s in samples])[:, None, :, :]
    fused = np.concatenate(
        [embed_samples(params.extractor, lefts), embed_samples(params.extractor, rights)], axis=1
    )
    ia = np.array([order[id(p.sample_a)] for p in pairs], dtype=np.intp)
    ib = np.array([order[id(p.sample_b)] for p in pairs], dtype=np.intp)
    return fused, ia, ib


def pair_distances(params: SiameseParams, pairs: list[PairExample]) -> np.ndarray:
    """Inference-mode L1 distances for a list of pairs (float32)."""
    fused, ia, ib = _fused_embeddings(params, pairs)
    return np.abs(fused[ia] - fused[ib]).sum(axis=1)


def _best_threshold(p: np.ndarray, genuine: np.ndarray) -> tuple[float, float]:
    """Threshold in (0, 1) maximizing accuracy on (p, genuine); first argmax wins."""
    uniq = np.unique(p)
    mids = (uniq[:-1] + uniq[1:]) / 2.0
    cands = np.concatenate(([uniq[0] / 2.0], mids, [(uniq[-1] + 1.0) / 2.0], [0.5]))
    cands = cands[(cands > 0.0) & (cands < 1.0)]
    hits = (p[None, :] >= cands[:, None]) == genuine[None, :]
    acc = hits.mean(axis=1)
    best = int(np.argmax(acc))
    return float(cands[best]), float(acc[best])


def _validate(
    params: SiameseParams, pairs: list[PairExample], config: TrainConfig
) -> tuple[float, float, float]:
    """(val_loss, val_accuracy at best threshold, that threshold)."""
    d = pair_distances(params, pairs)
    genuine = np.array([p.genuine for p in pairs])
    if config.loss == "contrastive":
        losses = [contrastive_loss(float(di), bool(gi), config.margin) for di, gi in zip(d, genuine)]
    else:
        probs = probability_values(d, params.theta0.item(), params.theta1.item())
        losses = [bce_loss(float(pi), bool(gi)) for pi, gi in zip(probs, genuine)]
    val_loss = float(np.mean(losses))
    p = probability_values(d, params.theta0.item(), params.theta1.item())
    threshold, accuracy = _best_threshold(p, genuine)
    return val_loss, accuracy, threshold


def _snapshot(params: SiameseParams) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in _checkpoint_entries(params)}


def _restore(params: SiameseParams, snap: dict[str, np.ndarray]) -> None:
    for i, blk in enumerate(params.extractor.blocks, start=1):
        blk.weight.data[...] = snap[f"conv{i}.weight"]
        blk.bias.data[...] = snap[f"conv{i}.bias"]
        blk.gamma.data[...] = snap[f"bn{i}.gamma"]
        blk.beta.data[...] = snap[f"bn{i}.beta"]
        blk.running_mean[...] = snap[f"bn{i}.running_mean"]
        blk.running_var[...] = snap[f"bn{i}.running_var"]
    params.extractor.fc5_weight.data[...] = snap["fc5.weight"]
    params.extractor.fc5_bias.data[...] = snap["fc5.bias"]
    params.extractor.fc6_weight.data[...] = snap["fc6.weight"]
    params.extractor.fc6_bias.data[...] = snap["fc6.bias"]
    params.theta0.data[...] = snap["head.theta0"]
    params.theta1.data[...] = snap["head.theta1"]


def train(
    config: TrainConfig, train_split: Dataset, val_split: Dataset
) -> tuple[SiameseParams, TrainHistory]:
    """Run the episodic loop; return the best-validation model and history.

    Stops early after `early_stop_patience` non-improving epochs; the learning
    rate halves (by `plateau_factor`) on plateaus. Deterministic per seed.
    """
    if not train_split.subjects or not val_split.subjects:
        raise ValueError("empty train or validation split")
    overlap = set(train_split.subjects) & set(val_split.subjects)
    if overlap:
        raise ValueError(f"train/validation subject overlap: {sorted(overlap)}")
    if len(train_split.subjects) < K_WAY:
        raise ValueError(f"need at least {K_WAY} training subjects, have {len(train_split.subjects)}")
    available = train_split.min_genuine_pairs()
    if config.n > available:
        raise ValueError(
            f"n={config.n} exceeds the {available} genuine pairs available "
            "for some training subject"
        )

    params = init_params(config.seed)
    trainable = params.named_parameters()
    if config.loss == "contrastive":
        trainable = [(name, t) for name, t in trainable if not name.startswith("head.")]
    adam = AdamState(trainable, config.beta1, config.beta2, config.adam_eps)
    plateau = ReduceLROnPlateau(
        config.lr,
        patience=config.plateau_patience,
        factor=config.plateau_factor,
        min_delta=config.plateau_min_delta,
        floor=config.lr_floor,
    )
    stopper = EarlyStopper(config.early_stop_patience, config.plateau_min_delta)

    episode_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    val_pairs = sample_pairs(val_split, config.val_pairs_per_class, np.random.default_rng([config.seed, 3]))

    history = TrainHistory()
    lr = config.lr
    best_loss = math.inf
    best_snap = _snapshot(params)
    best_threshold = 0.5
    stop_reason = "max_epochs"
    for epoch in range(1, config.max_epochs + 1):
        epoch_loss = 0.0
        for _ in range(config.episodes_per_epoch):
            pairs = sample_episode(train_split, config.n, episode_rng)
            epoch_loss += _episode_step(params, pairs, config, trainable, adam, lr, dropout_rng)
        train_loss = epoch_loss / config.episodes_per_epoch
        val_loss, val_accuracy, threshold = _validate(params, val_pairs, config)
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_accuracy, lr))
        if val_loss < best_loss:
            best_loss = val_loss
            best_snap = _snapshot(params)
            best_threshold = threshold
        lr = plateau.update(val_loss)
        if stopper.update(val_loss):
            stop_reason = "early_stop"
            break
    history.stop_reason = stop_reason
    _restore(params, best_snap)
    params.calib_threshold = best_threshold
    return params, history
