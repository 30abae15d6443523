"""Comparison models: BiLSTM over weekly measure rows, Transformer over raw observations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import vocabulary_hash
from .preprocessing import N_CHANNELS, EncodedSeries
from .raindrop import MAX_OBSERVATIONS, predict_from_logits, time_encoding
from .training import TrainConfig, fit, predict_logits

CHECKPOINT_VERSION = 1


@dataclass
class BaselineConfig:
    kind: str = "bilstm_features"
    hidden: int = 32
    layers: int = 1
    heads: int = 2
    d_model: int = 32
    d_t: int = 16
    dropout: float = 0.0
    max_observations: int = MAX_OBSERVATIONS

    def __post_init__(self):
        if self.kind not in ("bilstm_features", "transformer_raw"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")


# ---------------------------------------------------------------- BiLSTM

class BiLSTMClassifier(nn.Module):
    def __init__(self, n_features: int, config: BaselineConfig, mean=None, std=None):
        super().__init__()
        self.config = config
        self.n_features = n_features
        self.register_buffer("mean", torch.zeros(n_features) if mean is None else torch.as_tensor(mean))
        self.register_buffer("std", torch.ones(n_features) if std is None else torch.as_tensor(std))
        self.lstm = nn.LSTM(n_features, config.hidden, num_layers=config.layers, batch_first=True,
                            bidirectional=True, dropout=config.dropout if config.layers > 1 else 0.0)
        self.head = nn.Sequential(nn.Linear(2 * config.hidden, config.hidden), nn.Tanh(),
                                  nn.Linear(config.hidden, 2))

    def collate(self, matrices):
        return torch.as_tensor(np.stack(matrices), dtype=self.mean.dtype)

    def forward(self, x):
        x = (x - self.mean) / self.std
        _, (h, _) = self.lstm(x)
        last = torch.cat([h[-2], h[-1]], dim=-1)
        return (self.head(last),)


def train_bilstm(train_x, train_y, val_x, val_y, config: BaselineConfig | None = None,
                 train_config: TrainConfig | None = None):
    """``train_x`` are [weeks x features] matrices sharing the week count."""
    config = config or BaselineConfig("bilstm_features")
    train_config = train_config or TrainConfig()
    shapes = {np.asarray(m).shape for m in list(train_x) + list(val_x)}
    if len(shapes) != 1:
        raise ValueError(f"feature matrices must share one shape, got {sorted(shapes)}")
    stacked = np.concatenate([np.asarray(m) for m in train_x])
    mean = stacked.mean(0)
    std = stacked.std(0) + 1e-6
    torch.manual_seed(train_config.seed)
    model = BiLSTMClassifier(stacked.shape[1], config, mean.astype(np.float32), std.astype(np.float32))
    lengths = np.zeros(len(train_x))
    model, report = fit(model, list(train_x), train_y, list(val_x), val_y, model.collate, lengths, train_config)
    report["model"] = "bilstm"
    report["model_config"] = asdict(config)
    return model, report


# ---------------------------------------------------------------- Transformer

@dataclass
class TokenBatch:
    channel: torch.Tensor
    day: torch.Tensor
    value: torch.Tensor
    valid: torch.Tensor

    def __len__(self):
        return self.channel.shape[0]


class TransformerClassifier(nn.Module):
    def __init__(self, config: BaselineConfig):
        super().__init__()
        self.config = c = config
        self.channel_emb = nn.Embedding(N_CHANNELS, c.d_model)
        self.value_proj = nn.Linear(1, c.d_model)
        self.time_proj = nn.Linear(c.d_t, c.d_model)
        layer = nn.TransformerEncoderLayer(c.d_model, c.heads, dim_feedforward=2 * c.d_model,
                                           dropout=c.dropout, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, c.layers, enable_nested_tensor=False)
        self.head = nn.Sequential(nn.Linear(c.d_model, c.hidden), nn.Tanh(), nn.Linear(c.hidden, 2))

    def collate(self, encoded: list[EncodedSeries]) -> TokenBatch:
        cap = self.config.max_observations
        T = max([min(e.length, cap) for e in encoded] + [1])
        B = len(encoded)
        ch = np.zeros((B, T), np.int64)
        day = np.zeros((B, T), np.float32)
        val = np.zeros((B, T), np.float32)
        valid = np.zeros((B, T), bool)
        for b, e in enumerate(encoded):
            n = min(e.length, cap)
            if n:
                ch[b, :n], day[b, :n], val[b, :n] = e.channels[-n:], e.times[-n:], e.values[-n:]
                valid[b, :n] = True
        return TokenBatch(torch.from_numpy(ch), torch.from_numpy(day), torch.from_numpy(val),
                          torch.from_numpy(valid))

    def forward(self, batch: TokenBatch):
        c = self.config
        tok = (self.channel_emb(batch.channel) + self.value_proj(batch.value[..., None])
               + self.time_proj(time_encoding(batch.day, c.d_t)))
        valid = batch.valid.clone()
        valid[:, 0] = True  # keep empty series from producing an all-masked row
        enc = self.encoder(tok, src_key_padding_mask=~valid)
        w = valid.to(enc.dtype)[..., None]
        pooled = (enc * w).sum(1) / w.sum(1)
        return (self.head(pooled),)


def train_transformer(train_set, val_set, config: BaselineConfig | None = None,
                      train_config: TrainConfig | None = None):
    config = config or BaselineConfig("transformer_raw")
    train_config = train_config or TrainConfig()
    torch.manual_seed(train_config.seed)
    model = TransformerClassifier(config)
    lengths = [e.length for e in train_set]
    model, report = fit(model, train_set, [e.label for e in train_set], val_set, [e.label for e in val_set],
                        model.collate, lengths, train_config)
    report["model"] = "transformer"
    report["model_config"] = asdict(config)
    return model, report


def predict_baseline(model, items):
    return predict_from_logits(predict_logits(model, items, model.collate))


def save_baseline(model, path, report: dict | None = None) -> None:
    path = Path(path)
    blob = {"version": CHECKPOINT_VERSION, "kind": model.config.kind, "config": asdict(model.config),
            "vocabulary": vocabulary_hash(), "state": model.state_dict()}
    if isinstance(model, BiLSTMClassifier):
        blob["n_features"] = model.n_features
    torch.save(blob, path)
    if report is not None:
        path.with_suffix(".json").write_text(json.dumps(report, indent=1))


def load_baseline(path):
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    config = BaselineConfig(**blob["config"])
    if config.kind == "bilstm_features":
        model = BiLSTMClassifier(blob["n_features"], config)
    else:
        model = TransformerClassifier(config)
    model.load_state_dict(blob["state"])
    model.eval()
    return model
