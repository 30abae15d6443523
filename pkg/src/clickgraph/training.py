"""Mini-batch training loop shared by the graph model and the baselines."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import balanced_accuracy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    weight_decay: float = 0.0
    seed: int = 0
    deterministic: bool = False

    def to_dict(self):
        return asdict(self)


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


def class_weights(labels: np.ndarray) -> torch.Tensor:
    counts = np.bincount(labels, minlength=2).astype(float)
    return torch.tensor(len(labels) / (2.0 * counts))


def batch_order(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches, sorted by length inside windows of 8 batches to limit padding."""
    perm = rng.permutation(len(lengths))
    window = 8 * batch_size
    batches = []
    for start in range(0, len(perm), window):
        chunk = perm[start:start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


@torch.no_grad()
def predict_logits(model, items, collate, batch_size: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(items), batch_size):
        out.append(model(collate(items[i:i + batch_size]))[0].cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def labels_from_logits(logits: np.ndarray) -> np.ndarray:
    # ties go to pass (class 0)
    return (logits[:, 1] > logits[:, 0]).astype(int)


def fit(model, train_items, train_labels, val_items, val_labels, collate, lengths, config: TrainConfig):
    """Minimise class-weighted cross-entropy; keep the best-validation-BAC checkpoint.

    ``model(batch)`` must return a tuple whose first element is the [B, 2] logits.
    """
    y_train = np.asarray(train_labels, int)
    y_val = np.asarray(val_labels, int)
    if len(y_train) == 0:
        raise TrainingError("empty training set")
    if len(np.unique(y_train)) < 2:
        raise TrainingError("training set contains a single class")
    set_deterministic(config.deterministic)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    dtype = next(model.parameters()).dtype
    weights = class_weights(y_train).to(dtype)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    lengths = np.asarray(lengths)
    history = []
    best = (-math.inf, math.inf)
    best_state, best_epoch, stale = copy.deepcopy(model.state_dict()), -1, 0
    val_weights = class_weights(y_val).to(dtype) if len(np.unique(y_val)) == 2 else None

    for epoch in range(config.max_epochs):
        model.train()
        total, count = 0.0, 0
        for idx in batch_order(lengths, config.batch_size, rng):
            batch = collate([train_items[i] for i in idx])
            target = torch.as_tensor(y_train[idx])
            logits = model(batch)[0]
            loss = F.cross_entropy(logits, target, weight=weights)
            if not torch.isfinite(loss):
                report = {"history": history, "diverged_epoch": epoch}
                raise TrainingError(f"loss became non-finite at epoch {epoch}", report)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)

        val_logits = predict_logits(model, val_items, collate)
        val_pred = labels_from_logits(val_logits)
        if val_weights is not None:
            val_bac = balanced_accuracy(val_pred, y_val)
            val_loss = float(F.cross_entropy(torch.as_tensor(val_logits), torch.as_tensor(y_val),
                                             weight=val_weights))
        else:
            val_bac, val_loss = float(np.mean(val_pred == y_val)), math.nan
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "val_bac": val_bac})
        log.debug("epoch %d loss %.4f val_bac %.4f", epoch, total / count, val_bac)
        key = (val_bac, -val_loss if not math.isnan(val_loss) else 0.0)
        if key > best:
            best, best_state, best_epoch, stale = key, copy.deepcopy(model.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.load_state_dict(best_state)
    model.eval()
    report = {
        "best_epoch": best_epoch,
        "best_val_bac": best[0],
        "epochs_run": len(history),
        "history": history,
        "n_params": int(sum(p.numel() for p in model.parameters())),
        "config": config.to_dict(),
    }
    return model, report
