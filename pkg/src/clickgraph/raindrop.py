"""Dependency-graph classifier for irregular multivariate clickstreams.

Pipeline per student:

1. every observed action gets an interaction embedding ``h`` from a per-channel
   affine map of its value plus its co-observed metadata (video id, problem id,
   submission number);
2. ``h`` is pushed along the learned action dependency graph to the other
   action channels at the same timestamp, scaled by the edge weight;
3. per action channel, temporal attention over its interaction embeddings
   (concatenated with a sinusoidal encoding of the day), plus a log-count
   term, gives ``z``;
4. the student embedding is the concatenation of the ten ``z``;
5. a two-layer head maps it to pass/fail logits.

Interaction embeddings on channel ``v`` are ``onehot*h_obs + w(u->v)*m`` with
``m = tanh(P h_obs)``.  Since everything downstream of them is linear before
the softmax/tanh, projections are computed on the [B, T, d] tensors and
broadcast over channels, never materialising the [B, T, 10, d] tensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import N_ACTIONS, vocabulary_hash
from .preprocessing import N_CHANNELS, EncodedSeries
from .training import TrainConfig, fit, labels_from_logits, predict_logits

LAYERS = ("student_embedding", "classifier_hidden")
CHECKPOINT_VERSION = 1
MAX_OBSERVATIONS = 2000


@dataclass
class RaindropConfig:
    d_h: int = 32
    d_z: int = 32
    d_f: int = 64
    d_t: int = 16
    d_a: int = 16
    edge_init: float = 6.0
    mask_unexhibited: bool = True
    max_observations: int = MAX_OBSERVATIONS


@dataclass
class ActivationTrace:
    student_id: str
    student_embedding: np.ndarray
    classifier_hidden: np.ndarray
    logits: np.ndarray

    def layer(self, name: str) -> np.ndarray:
        if name not in LAYERS:
            raise KeyError(f"unknown layer {name!r}; expected one of {LAYERS}")
        return getattr(self, name)


# ---------------------------------------------------------------- batching

@dataclass
class EventBatch:
    action: torch.Tensor    # [B, T] long
    day: torch.Tensor       # [B, T]
    meta: torch.Tensor      # [B, T, 3]; zero where absent
    valid: torch.Tensor     # [B, T] bool
    present: torch.Tensor   # [B, A] bool, channels exhibited by the student

    def __len__(self):
        return self.action.shape[0]


def to_events(enc: EncodedSeries, max_observations: int = MAX_OBSERVATIONS):
    """(action, day, meta[3]) arrays, one row per interaction, keeping the most recent observations."""
    times, chans, vals, ev = enc.times, enc.channels, enc.values, enc.event
    if enc.length > max_observations:
        cut = ev[enc.length - max_observations - 1]
        keep = ev > cut
        times, chans, vals, ev = times[keep], chans[keep], vals[keep], ev[keep]
    if len(ev) == 0:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3))
    ev = ev - ev.min()
    n = int(ev.max()) + 1
    is_act = chans < N_ACTIONS
    action = np.zeros(n, np.int64)
    day = np.zeros(n)
    action[ev[is_act]] = chans[is_act]
    day[ev[is_act]] = times[is_act]
    meta = np.zeros((n, N_CHANNELS - N_ACTIONS))
    m = ~is_act
    meta[ev[m], chans[m] - N_ACTIONS] = vals[m]
    return action, day, meta


def collate(encoded: list[EncodedSeries], dtype=torch.float32, max_observations=MAX_OBSERVATIONS) -> EventBatch:
    rows = [to_events(e, max_observations) for e in encoded]
    B = len(rows)
    T = max([len(r[0]) for r in rows] + [1])
    action = np.zeros((B, T), np.int64)
    day = np.zeros((B, T))
    meta = np.zeros((B, T, 3))
    valid = np.zeros((B, T), bool)
    present = np.zeros((B, N_ACTIONS), bool)
    for b, (a, d, m) in enumerate(rows):
        n = len(a)
        action[b, :n], day[b, :n], meta[b, :n], valid[b, :n] = a, d, m, True
        present[b, np.unique(a)] = n > 0
    return EventBatch(torch.from_numpy(action), torch.from_numpy(day).to(dtype),
                      torch.from_numpy(meta).to(dtype), torch.from_numpy(valid), torch.from_numpy(present))


def time_encoding(day: torch.Tensor, d_t: int) -> torch.Tensor:
    """Fixed sinusoids over continuous days; periods from one hour to ~64 days."""
    k = d_t // 2
    periods = torch.logspace(math.log10(1 / 24), math.log10(64.0), k, dtype=day.dtype)
    ang = 2 * math.pi * day[..., None] / periods
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


# ---------------------------------------------------------------- model

class RaindropModel(nn.Module):
    def __init__(self, config: RaindropConfig | None = None):
        super().__init__()
        self.config = c = config or RaindropConfig()
        A = N_ACTIONS
        self.obs_weight = nn.Parameter(torch.randn(A, c.d_h) * 0.5)
        self.obs_bias = nn.Parameter(torch.zeros(A, c.d_h))
        self.meta_proj = nn.Linear(N_CHANNELS - A, c.d_h, bias=False)
        self.message = nn.Linear(c.d_h, c.d_h)
        self.edge_logits = nn.Parameter(torch.full((A, A), float(c.edge_init)))
        self.register_buffer("off_diagonal", 1.0 - torch.eye(A))
        # attention maps over [h ; time encoding], split by input block
        self.q_h = nn.Linear(c.d_h, c.d_a)
        self.q_t = nn.Linear(c.d_t, c.d_a, bias=False)
        self.k_h = nn.Linear(c.d_h, c.d_a)
        self.k_t = nn.Linear(c.d_t, c.d_a, bias=False)
        self.v_h = nn.Linear(c.d_h, c.d_z)
        self.v_t = nn.Linear(c.d_t, c.d_z, bias=False)
        self.empty_z = nn.Parameter(torch.zeros(A, c.d_z))
        # softmax pooling is a weighted mean and hides how often a channel fired
        self.count_emb = nn.Parameter(torch.randn(A, c.d_z) * 0.1)
        self.fc1 = nn.Linear(A * c.d_z, c.d_f)
        self.fc2 = nn.Linear(c.d_f, 2)

    @property
    def edge_weights(self) -> torch.Tensor:
        return torch.sigmoid(self.edge_logits) * self.off_diagonal

    def embed(self, batch: EventBatch) -> torch.Tensor:
        """Student embeddings [B, 10*d_z] (stages 1-4)."""
        c = self.config
        A = N_ACTIONS
        act, valid = batch.action, batch.valid
        dt = self.obs_weight.dtype
        vmask = valid.to(dt)

        h_obs = torch.tanh(self.obs_weight[act] + self.obs_bias[act] + self.meta_proj(batch.meta))
        msg = torch.tanh(self.message(h_obs))
        onehot = nn.functional.one_hot(act, A).to(dt)

        if c.mask_unexhibited:
            pres = batch.present.to(dt)
            active = pres[:, :, None] * pres[:, None, :] * self.off_diagonal
        else:
            active = self.off_diagonal.expand(len(batch), A, A)
        w = self.edge_weights * active                                   # [B, u, v]
        coef_msg = torch.gather(w, 1, act[:, :, None].expand(-1, -1, A))  # [B, T, v]
        gate = torch.gather(active, 1, act[:, :, None].expand(-1, -1, A))
        part = ((onehot + gate) > 0).to(dt) * vmask[:, :, None]          # which (t, v) exist
        c_self = onehot * part
        c_msg = coef_msg * part

        te = time_encoding(batch.day, c.d_t)
        n_part = part.sum(1)                                              # [B, v]
        denom = n_part.clamp(min=1.0)[:, :, None]
        h_bar = (torch.einsum("btv,btd->bvd", c_self, h_obs) + torch.einsum("btv,btd->bvd", c_msg, msg)) / denom
        t_bar = torch.einsum("btv,btd->bvd", part, te) / denom
        # the bias of q_h applies once per mean, matching a biased map of the mean input
        q = self.q_h(h_bar) + self.q_t(t_bar)                             # [B, v, d_a]

        wk = self.k_h.weight
        kh_obs, kh_msg, kt = h_obs @ wk.T, msg @ wk.T, self.k_t(te)
        score = (c_self * torch.einsum("btd,bvd->btv", kh_obs, q)
                 + c_msg * torch.einsum("btd,bvd->btv", kh_msg, q)
                 + torch.einsum("btd,bvd->btv", kt, q)
                 + (q @ self.k_h.bias)[:, None, :]) / math.sqrt(c.d_a)
        score = score.masked_fill(part == 0, -1e30)
        alpha = torch.softmax(score, dim=1) * part                       # zero for absent channels

        wv = self.v_h.weight
        z = (torch.einsum("btv,btd->bvd", alpha * c_self, h_obs @ wv.T)
             + torch.einsum("btv,btd->bvd", alpha * c_msg, msg @ wv.T)
             + torch.einsum("btv,btd->bvd", alpha, self.v_t(te))
             + alpha.sum(1)[:, :, None] * self.v_h.bias)

        z = z + torch.log1p(c_self.sum(1))[:, :, None] * self.count_emb
        has = (n_part > 0).to(dt)[:, :, None]
        z = has * z + (1 - has) * self.empty_z
        return z.reshape(len(batch), A * c.d_z)

    def head(self, s: torch.Tensor):
        hidden = torch.tanh(self.fc1(s))
        return self.fc2(hidden), hidden

    def forward(self, batch: EventBatch):
        s = self.embed(batch)
        logits, hidden = self.head(s)
        return logits, s, hidden

    def collate(self, encoded):
        return collate(encoded, self.obs_weight.dtype, self.config.max_observations)

    def n_params(self) -> int:
        return int(sum(p.numel() for p in self.parameters()))


def build_model(config: RaindropConfig | None = None, seed: int = 0, dtype=torch.float32) -> RaindropModel:
    torch.manual_seed(seed)
    return RaindropModel(config).to(dtype)


# ---------------------------------------------------------------- operations

@torch.no_grad()
def forward(encoded: EncodedSeries, model: RaindropModel):
    model.eval()
    logits, s, hidden = model(model.collate([encoded]))
    trace = ActivationTrace(encoded.student_id, s[0].numpy().copy(), hidden[0].numpy().copy(),
                            logits[0].numpy().copy())
    return trace.logits, trace


@torch.no_grad()
def traces(encoded: list[EncodedSeries], model: RaindropModel, batch_size: int = 128) -> list[ActivationTrace]:
    model.eval()
    out = []
    for i in range(0, len(encoded), batch_size):
        chunk = encoded[i:i + batch_size]
        logits, s, hidden = model(model.collate(chunk))
        for k, e in enumerate(chunk):
            out.append(ActivationTrace(e.student_id, s[k].numpy().copy(), hidden[k].numpy().copy(),
                                       logits[k].numpy().copy()))
    return out


def activation_gradients(encoded: list[EncodedSeries], model: RaindropModel, layer: str, cls: int,
                         batch_size: int = 128) -> np.ndarray:
    """d logit_cls / d activation at ``layer``, one row per student."""
    if layer not in LAYERS:
        raise KeyError(f"unknown layer {layer!r}; expected one of {LAYERS}")
    model.eval()
    rows = []
    for i in range(0, len(encoded), batch_size):
        with torch.no_grad():
            s = model.embed(model.collate(encoded[i:i + batch_size]))
        if layer == "student_embedding":
            x = s.detach().requires_grad_(True)
            logits = model.head(x)[0]
        else:
            with torch.no_grad():
                pre = model.fc1(s)
            x = torch.tanh(pre).detach().requires_grad_(True)
            logits = model.fc2(x)
        (g,) = torch.autograd.grad(logits[:, cls].sum(), x)
        rows.append(g.numpy())
    return np.concatenate(rows)


def grad_wrt_activation(encoded: EncodedSeries, model: RaindropModel, layer: str, cls: int) -> np.ndarray:
    return activation_gradients([encoded], model, layer, cls)[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_from_logits(logits: np.ndarray):
    logits = np.atleast_2d(logits)
    labels = labels_from_logits(logits)
    probs = softmax(logits)[np.arange(len(labels)), labels]
    return labels, probs


def predict_batch(encoded: list[EncodedSeries], model: RaindropModel):
    logits = predict_logits(model, encoded, model.collate)
    return predict_from_logits(logits)


def predict(encoded: EncodedSeries, model: RaindropModel):
    labels, probs = predict_batch([encoded], model)
    return int(labels[0]), float(probs[0])


def train(train_set, val_set, config: RaindropConfig | None = None, train_config: TrainConfig | None = None,
          dtype=torch.float32):
    """``train_set``/``val_set`` are lists of EncodedSeries (labels read from each series)."""
    train_config = train_config or TrainConfig()
    model = build_model(config, train_config.seed, dtype)
    lengths = [e.length for e in train_set]
    model, report = fit(model, train_set, [e.label for e in train_set], val_set, [e.label for e in val_set],
                        model.collate, lengths, train_config)
    report["model"] = "raindrop"
    report["model_config"] = asdict(model.config)
    return model, report


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: RaindropModel, path, report: dict | None = None) -> None:
    path = Path(path)
    torch.save({"version": CHECKPOINT_VERSION, "kind": "raindrop", "config": asdict(model.config),
                "vocabulary": vocabulary_hash(), "dtype": str(model.obs_weight.dtype),
                "state": model.state_dict()}, path)
    if report is not None:
        path.with_suffix(".json").write_text(json.dumps(report, indent=1))


def load_checkpoint(path) -> RaindropModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION or blob.get("kind") != "raindrop":
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} raindrop checkpoint")
    if blob["vocabulary"] != vocabulary_hash():
        raise ValueError(f"{path}: action vocabulary mismatch")
    dtype = torch.float64 if blob["dtype"] == "torch.float64" else torch.float32
    model = RaindropModel(RaindropConfig(**blob["config"])).to(dtype)
    model.load_state_dict(blob["state"])
    model.eval()
    return model
