"""Recurrent candidate-pose selection.

Per time step the selector sees a 277-dim vector: the three candidate
poses (tactile 7 | vision 7 | fusion 7 = 21) followed by the 256-dim
concatenated tactile/vision features. A 3-layer LSTM (hidden 256) with
a linear head emits softmax confidences over the three candidates; the
training label is the candidate whose average model distance to the
ground truth is smallest (ties break to the lowest index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InvalidArgumentError
from .geometry import ModelPointCloud, Pose, add_distance

CANDIDATE_NAMES = ("tactile", "vision", "fusion")
NUM_CANDIDATES = 3
POSE_BLOCK = 21  # 3 candidates x 7
FEATURE_BLOCK = 256
INPUT_DIM = POSE_BLOCK + FEATURE_BLOCK  # 277
HIDDEN_DIM = 256
NUM_LAYERS = 3
WINDOW_LENGTH = 20

CHECKPOINT_VERSION = 1


def make_label(candidates, gt: Pose, model: ModelPointCloud) -> int:
    """Index of the candidate with the smallest average model distance."""
    candidates = list(candidates)
    if len(candidates) != NUM_CANDIDATES:
        raise InvalidArgumentError(f"expected 3 candidates, got {len(candidates)}")
    distances = [add_distance(c, gt, model) for c in candidates]
    return int(np.argmin(distances))


def build_selector_input(candidate_poses: np.ndarray, fused_features: np.ndarray,
                         expected_length: int | None = WINDOW_LENGTH) -> np.ndarray:
    """Stack per-timestep (21 + 256) rows: (T, 277) float32.

    candidate_poses: (T, 3, 7) ordered tactile/vision/fusion,
    fused_features: (T, 256) = tactile 128 | vision 128.
    """
    poses = np.asarray(candidate_poses, dtype=np.float32)
    feats = np.asarray(fused_features, dtype=np.float32)
    if poses.ndim != 3 or poses.shape[1:] != (NUM_CANDIDATES, 7):
        raise InvalidArgumentError(f"candidate_poses must be (T, 3, 7), got {poses.shape}")
    if feats.ndim != 2 or feats.shape[1] != FEATURE_BLOCK:
        raise InvalidArgumentError(f"fused_features must be (T, 256), got {feats.shape}")
    if poses.shape[0] != feats.shape[0]:
        raise InvalidArgumentError("pose and feature sequences differ in length")
    if expected_length is not None and poses.shape[0] != expected_length:
        raise InvalidArgumentError(
            f"expected a {expected_length}-frame window, got {poses.shape[0]}")
    return np.concatenate([poses.reshape(poses.shape[0], POSE_BLOCK), feats], axis=1)


class SelectLSTM(nn.Module):
    """3-layer LSTM over candidate poses + fused features -> 3 confidences."""

    def __init__(self):
        super().__init__()
        self.lstm = nn.LSTM(INPUT_DIM, HIDDEN_DIM, NUM_LAYERS, batch_first=True)
        self.head = nn.Linear(HIDDEN_DIM, NUM_CANDIDATES)

    def forward(self, x: torch.Tensor, state=None):
        """x (B, T, 277) -> (logits (B, T, 3), new state)."""
        if x.shape[-1] != INPUT_DIM:
            raise ConfigurationError(
                f"selector input must be {INPUT_DIM}-dim, got {x.shape[-1]}")
        h, state = self.lstm(x, state)
        return self.head(h), state


def selector_forward(inputs: np.ndarray, model: SelectLSTM,
                     state=None, return_state: bool = False):
    """Confidence rows (T, 3) for one input sequence (T, 277).

    Rows are softmax-normalized and causal: row t only depends on rows <= t.
    Pass ``state`` to continue a stream across calls.
    """
    x = torch.as_tensor(np.asarray(inputs, dtype=np.float32)).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        logits, state = model(x, state)
        conf = torch.softmax(logits, dim=-1)[0].numpy()
    if return_state:
        return conf, state
    return conf


def select_pose(confidences, candidates) -> Pose:
    """The candidate at argmax confidence; ties break to the lowest index."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.shape != (NUM_CANDIDATES,):
        raise InvalidArgumentError(f"confidences must be a 3-vector, got {conf.shape}")
    return list(candidates)[int(np.argmax(conf))]


@dataclass
class SelectorTrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20

    def to_dict(self):
        return {"lr": self.lr, "batch_size": self.batch_size, "epochs": self.epochs}


class SelectorCheckpoint:
    """SelectLSTM weights plus training metadata."""

    def __init__(self, model: SelectLSTM, seed: int = 0, log=None):
        self.model = model
        self.seed = seed
        self.log = log or []

    def save(self, path):
        torch.save({
            "format_version": CHECKPOINT_VERSION,
            "kind": "selector",
            "seed": self.seed,
            "state": self.model.state_dict(),
            "log": self.log,
        }, path)

    @staticmethod
    def load(path) -> "SelectorCheckpoint":
        payload = torch.load(path, weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"selector checkpoint version {payload.get('format_version')} "
                f"unsupported (want {CHECKPOINT_VERSION})")
        if payload.get("kind") != "selector":
            raise ConfigurationError(f"not a selector checkpoint: {path}")
        model = SelectLSTM()
        model.load_state_dict(payload["state"])
        model.eval()
        return SelectorCheckpoint(model, payload["seed"], payload.get("log", []))


def train_selector(window_inputs: np.ndarray, window_labels: np.ndarray,
                   config: SelectorTrainConfig | None = None, seed: int = 0,
                   progress: bool = False) -> SelectorCheckpoint:
    """Train on fixed 20-frame windows with per-timestep NLL supervision.

    window_inputs: (W, 20, 277), window_labels: (W, 20) int in {0, 1, 2}.
    The estimators stay frozen: only their precomputed outputs enter here.
    """
    cfg = config or SelectorTrainConfig()
    inputs = torch.as_tensor(np.asarray(window_inputs, dtype=np.float32))
    labels = torch.as_tensor(np.asarray(window_labels, dtype=np.int64))
    if inputs.ndim != 3 or inputs.shape[2] != INPUT_DIM:
        raise InvalidArgumentError(f"window_inputs must be (W, T, 277), got {tuple(inputs.shape)}")
    if labels.shape != inputs.shape[:2]:
        raise InvalidArgumentError("labels must be (W, T) matching the inputs")
    torch.manual_seed(seed)
    model = SelectLSTM()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    ce = nn.CrossEntropyLoss()
    gen = torch.Generator().manual_seed(seed)
    log = []
    n = inputs.shape[0]
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, correct, count, batches = 0.0, 0, 0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits, _ = model(inputs[idx])
            loss = ce(logits.reshape(-1, NUM_CANDIDATES), labels[idx].reshape(-1))
            if not torch.isfinite(loss):
                raise RuntimeError(f"selector training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            correct += int((logits.argmax(-1) == labels[idx]).sum())
            count += int(labels[idx].numel())
            batches += 1
        entry = {"epoch": epoch, "loss": total / batches, "accuracy": correct / count}
        log.append(entry)
        if progress:
            print(f"  epoch {epoch}: loss={entry['loss']:.4f} "
                  f"acc={entry['accuracy']:.3f}")
    model.eval()
    return SelectorCheckpoint(model, seed, log)
