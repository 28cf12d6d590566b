"""Head-only training loop, split evaluation and the loss."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .errors import TrainingError
from .model import ClassifierModel, save_checkpoint, trainable_parameter_count

logger = logging.getLogger(__name__)

OPTIMIZERS = ("rmsprop", "sgd_momentum")
DEFAULT_OPTIMIZER_PARAMS = {
    "rmsprop": {"alpha": 0.99, "eps": 1e-8, "momentum": 0.0},
    "sgd_momentum": {"momentum": 0.9},
}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    optimizer: str = "rmsprop"
    optimizer_params: dict = field(default_factory=dict)
    seed: int = 0
    device: str = "cpu"
    num_workers: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.device not in ("cpu", "accelerator"):
            raise ValueError(f"device must be 'cpu' or 'accelerator', got {self.device!r}")
        unknown = set(self.optimizer_params) - set(DEFAULT_OPTIMIZER_PARAMS[self.optimizer])
        if unknown:
            raise ValueError(f"unknown {self.optimizer} parameters: {sorted(unknown)}")

    def resolved_optimizer_params(self) -> dict:
        return {**DEFAULT_OPTIMIZER_PARAMS[self.optimizer], **self.optimizer_params}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_params"] = self.resolved_optimizer_params()
        return d


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list
    wall_time_s: float
    best_epoch: int

    def to_dict(self) -> dict:
        return {
            "format": "path24-train-report/1",
            "epochs": [asdict(e) for e in self.epochs],
            "wall_time_s": self.wall_time_s,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls([EpochStats(**e) for e in d["epochs"]], d["wall_time_s"], d["best_epoch"])

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def cross_entropy(logits, labels) -> torch.Tensor:
    """Mean of ``-log softmax(logits)[label]`` using a shifted log-sum-exp."""
    logits = torch.as_tensor(logits)
    if not torch.is_floating_point(logits):
        logits = logits.double()
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if logits.ndim != 2 or labels.shape != logits.shape[:1]:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} disagree")
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    peak = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - peak
    lse = torch.log(torch.exp(shifted).sum(dim=1))
    picked = shifted.gather(1, labels[:, None])[:, 0]
    return (lse - picked).mean()


def _device(config: TrainConfig) -> torch.device:
    if config.device == "accelerator":
        if not torch.cuda.is_available():
            raise TrainingError("device 'accelerator' requested but no CUDA device is available")
        return torch.device("cuda")
    return torch.device("cpu")


def _loader(dataset: Dataset, batches, num_workers: int) -> DataLoader:
    return DataLoader(dataset, batch_sampler=batches, num_workers=num_workers)


def evaluate_split(model, dataset: Dataset, batch_size: int = 64, device="cpu", num_workers: int = 0):
    """Mean cross-entropy and top-1 accuracy of ``model`` over ``dataset``.

    Runs with dropout off and without touching any weight or buffer.
    """
    n = len(dataset)
    if n == 0:
        raise TrainingError("cannot evaluate an empty split")
    was_training = model.training
    model.eval()
    total_loss, correct = 0.0, 0
    batches = [list(range(i, min(i + batch_size, n))) for i in range(0, n, batch_size)]
    with torch.no_grad():
        for x, y in _loader(dataset, batches, num_workers):
            x, y = x.to(device), torch.as_tensor(y).to(device)
            logits = model(x)
            total_loss += cross_entropy(logits, y).item() * len(y)
            correct += (logits.argmax(dim=1) == y).sum().item()
    model.train(was_training)
    return total_loss / n, correct / n


def _optimizer(params, config: TrainConfig):
    p = config.resolved_optimizer_params()
    if config.optimizer == "rmsprop":
        return torch.optim.RMSprop(params, lr=config.learning_rate, **p)
    return torch.optim.SGD(params, lr=config.learning_rate, **p)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches for one epoch, keyed by ``(seed, epoch)``."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]
    # batch norm cannot normalize a single sample in training mode
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train(
    model: ClassifierModel,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    output_dir=None,
):
    """Fit the head of ``model``; returns ``(model, report)``.

    With ``output_dir`` set, ``best.pt`` (highest validation accuracy, first
    epoch wins ties), ``final.pt`` and ``train_report.json`` are written
    there. The returned model holds the final-epoch weights.
    """
    if len(train_set) < 2:
        raise TrainingError(f"training set has {len(train_set)} sample(s); need at least 2")
    if len(val_set) == 0:
        raise TrainingError("validation set is empty")
    if not getattr(model, "base_frozen", False):
        logger.warning("training with an unfrozen backbone")

    device = _device(config)
    torch.manual_seed(config.seed)
    model.to(device)
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    optimizer = _optimizer(params, config)
    logger.info("training %d parameters for %d epochs", trainable_parameter_count(model), config.epochs)

    output_dir = Path(output_dir) if output_dir is not None else None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)

    history = []
    best_acc, best_epoch = -1.0, 0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        running_loss, running_correct, seen = 0.0, 0, 0
        batches = epoch_batches(len(train_set), config.batch_size, config.seed, epoch)
        for b, (x, y) in enumerate(_loader(train_set, batches, config.num_workers), start=1):
            x, y = x.to(device), torch.as_tensor(y).to(device)
            try:
                logits = model(x)
                loss = cross_entropy(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
            except RuntimeError as exc:
                if "out of memory" in str(exc).lower():
                    raise TrainingError(
                        f"out of memory at epoch {epoch}, batch {b} "
                        f"(batch_size={config.batch_size}); try a smaller batch size"
                    ) from exc
                raise
            running_loss += loss.item() * len(y)
            running_correct += (logits.detach().argmax(dim=1) == y).sum().item()
            seen += len(y)

        val_loss, val_acc = evaluate_split(model, val_set, config.batch_size, device, config.num_workers)
        stats = EpochStats(epoch, running_loss / seen, running_correct / seen, val_loss, val_acc)
        history.append(stats)
        logger.info("epoch %d: train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
                    epoch, stats.train_loss, stats.train_acc, val_loss, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            if output_dir is not None:
                save_checkpoint(model, output_dir / "best.pt", {"epoch": epoch})

    report = TrainReport(history, time.perf_counter() - start, best_epoch)
    if output_dir is not None:
        save_checkpoint(model, output_dir / "final.pt", {"epoch": config.epochs})
        report.save(output_dir / "train_report.json")
    model.eval()
    return model, report


def plot_curves(report: TrainReport, path) -> Path:
    """Loss and accuracy per epoch, side by side."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [e.epoch for e in report.epochs]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [e.train_loss for e in report.epochs], label="train")
    ax_loss.plot(epochs, [e.val_loss for e in report.epochs], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, [e.train_acc for e in report.epochs], label="train")
    ax_acc.plot(epochs, [e.val_acc for e in report.epochs], label="validation")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)

