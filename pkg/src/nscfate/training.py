"""Mini-batch training on cross-entropy loss, plus numerical gradient checks."""

import copy
import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, PreprocessSpec, load_split_arrays
from .errors import ConfigError, DivergenceError, ShapeError, SplitError
from .model import NetworkState
from .seeding import LABEL_DROPOUT, LABEL_SHUFFLE, derive_seed

LOSS_CLAMP = 1e-12  # floor on probabilities before the log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adaptive_moments"  # or "sgd_momentum"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    early_stop_patience: int = 5  # 0 disables early stopping
    seed: int = 0
    augment_flips: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("adaptive_moments", "sgd_momentum"):
            raise ConfigError(f"optimizer must be adaptive_moments or sgd_momentum, got {self.optimizer!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def save_csv(self, path):
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "seconds"])
            for r in self.records:
                writer.writerow(
                    [r.epoch, f"{r.train_loss:.6f}", f"{r.train_accuracy:.6f}",
                     f"{r.val_loss:.6f}", f"{r.val_accuracy:.6f}", f"{r.wall_seconds:.3f}"]
                )


def cross_entropy_loss(probabilities: np.ndarray, one_hot_labels: np.ndarray) -> float:
    """Mean -log p(true class), with probabilities floored at 1e-12."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(one_hot_labels, dtype=np.float64)
    if probs.shape != labels.shape or probs.ndim != 2:
        raise ShapeError(f"probabilities {probs.shape} vs labels {labels.shape}")
    true_p = (probs * labels).sum(axis=1)
    return float(-np.log(np.maximum(true_p, LOSS_CLAMP)).mean())


def _make_optimizer(net, config: TrainConfig):
    params = [p for p in net.parameters() if p.requires_grad]
    if config.optimizer == "adaptive_moments":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=(config.beta1, config.beta2))
    return torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)


def _batch_eval(state: NetworkState, x: np.ndarray, y: np.ndarray, batch_size: int):
    """Deterministic loss/accuracy over an array split."""
    net = state.net
    losses, correct = [], 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = torch.from_numpy(x[start : start + batch_size]).permute(0, 3, 1, 2).contiguous()
            yb = torch.from_numpy(y[start : start + batch_size])
            logits = net(xb, training=False)
            losses.append(F.cross_entropy(logits, yb, reduction="sum").item())
            correct += (logits.argmax(dim=1) == yb).sum().item()
    n = len(x)
    return sum(losses) / n, correct / n


def train(
    state: NetworkState,
    manifest: DatasetManifest,
    train_config: TrainConfig,
    preprocess: PreprocessSpec,
    workers: int = 1,
    start_epoch: int = 1,
):
    """Optimize the network on the train split, validating each epoch.

    Returns (best_state, history) where best_state carries the weights of
    the epoch with minimal validation loss. Identical inputs and seed give
    an identical history (workers only parallelize preprocessing).
    """
    x_train, y_train, _ = load_split_arrays(manifest, "train", preprocess, workers)
    x_val, y_val, _ = load_split_arrays(manifest, "val", preprocess, workers)
    if len(x_train) == 0:
        raise SplitError("train split is empty")
    if len(x_val) == 0:
        raise SplitError("val split is empty")
    if train_config.batch_size > len(x_train):
        raise ConfigError("batch_size exceeds train split size")

    net = state.net
    optimizer = _make_optimizer(net, train_config)
    history = TrainHistory()
    best_val_loss = float("inf")
    best_weights = copy.deepcopy(net.state_dict())
    best_epoch = 0
    epochs_since_best = 0

    for epoch in range(start_epoch, start_epoch + train_config.epochs):
        t0 = time.perf_counter()
        shuffle_rng = np.random.default_rng(derive_seed(train_config.seed, LABEL_SHUFFLE, epoch))
        order = shuffle_rng.permutation(len(x_train))
        epoch_loss_sum = 0.0
        epoch_correct = 0

        for step, start in enumerate(range(0, len(order), train_config.batch_size)):
            idx = order[start : start + train_config.batch_size]
            xb_np = x_train[idx]
            if train_config.augment_flips:
                flips = shuffle_rng.integers(0, 2, size=(len(idx), 2))
                xb_np = xb_np.copy()
                for i, (fh, fv) in enumerate(flips):
                    if fh:
                        xb_np[i] = xb_np[i, :, ::-1]
                    if fv:
                        xb_np[i] = xb_np[i, ::-1, :]
            xb = torch.from_numpy(np.ascontiguousarray(xb_np)).permute(0, 3, 1, 2).contiguous()
            yb = torch.from_numpy(y_train[idx])

            gen = torch.Generator().manual_seed(
                derive_seed(train_config.seed, LABEL_DROPOUT, epoch, step) & 0x7FFFFFFFFFFFFFFF
            )
            logits = net(xb, training=True, generator=gen)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise DivergenceError("training loss became non-finite", epoch=epoch, step=step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            epoch_loss_sum += loss.item() * len(idx)
            epoch_correct += (logits.argmax(dim=1) == yb).sum().item()

        val_loss, val_acc = _batch_eval(state, x_val, y_val, train_config.batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss_sum / len(x_train),
            train_accuracy=epoch_correct / len(x_train),
            val_loss=val_loss,
            val_accuracy=val_acc,
            wall_seconds=time.perf_counter() - t0,
        )
        history.records.append(record)

        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_weights = copy.deepcopy(net.state_dict())
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if train_config.early_stop_patience and epochs_since_best >= train_config.early_stop_patience:
                history.stopped_early = True
                break

    history.best_epoch = best_epoch
    best_net = copy.deepcopy(net)
    best_net.load_state_dict(best_weights)
    best_net.eval()
    best_state = NetworkState(config=state.config, taxonomy=state.taxonomy, net=best_net)
    return best_state, history


HEAD_LAYERS = ("dense1", "dense2", "output")


def gradient_check(
    state: NetworkState,
    batch: np.ndarray,
    one_hot_labels: np.ndarray,
    layer_selector: str,
    epsilon: float = 1e-3,
    sample_count: int = 120,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs a float64 copy of the network with dropout disabled, on one head
    layer's parameters, over a sampled subset of at least 100 entries.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0")
    if layer_selector not in HEAD_LAYERS:
        raise ConfigError(f"layer_selector must be one of {HEAD_LAYERS}, got {layer_selector!r}")

    net = copy.deepcopy(state.net).double()
    net.dropout_rate = 0.0
    xb = torch.from_numpy(np.asarray(batch, dtype=np.float64)).permute(0, 3, 1, 2).contiguous()
    yb = torch.from_numpy(np.argmax(np.asarray(one_hot_labels), axis=1))

    layer = getattr(net, layer_selector)
    params = list(layer.parameters())
    n_params = sum(p.numel() for p in params)
    if n_params > 10_000:
        raise ConfigError(
            f"layer {layer_selector} has {n_params} parameters; gradient_check is limited to 10000"
        )

    def loss_value():
        return F.cross_entropy(net(xb, training=False), yb)

    for p in net.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    loss = loss_value()
    loss.backward()
    analytic = torch.cat([p.grad.flatten() for p in params]).numpy()

    rng = np.random.default_rng(seed)
    k = min(max(100, min(sample_count, n_params)), n_params)
    indices = rng.choice(n_params, size=k, replace=False)

    # Map flat indices back into (param, offset) pairs.
    offsets = np.cumsum([0] + [p.numel() for p in params])
    max_rel = 0.0
    with torch.no_grad():
        for flat_idx in indices:
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[pi])
            view = params[pi].data.view(-1)
            original = view[local].item()
            view[local] = original + epsilon
            f_plus = loss_value().item()
            view[local] = original - epsilon
            f_minus = loss_value().item()
            view[local] = original
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[flat_idx]
            rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
