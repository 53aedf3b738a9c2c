"""Graph representation of the dexterous hand.

The hand is an undirected star of 6 nodes: node 0 is the palm (pose
relative to the camera), nodes 1..5 are the fingertips in canonical
order (thumb, index, middle, ring, little; poses relative to the palm).
Edge i carries the 19 electrode readings of finger i+1 and connects
node i+1 to the palm node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import Pose

NUM_FINGERS = 5
NUM_NODES = 6
NUM_ELECTRODES = 19
FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")

# Fixed star topology: edge i connects fingertip node i+1 to palm node 0.
EDGE_LIST: tuple[tuple[int, int], ...] = tuple((i + 1, 0) for i in range(NUM_FINGERS))


@dataclass
class TactileFrame:
    """Raw fingertip electrode readings with a no-contact baseline."""

    electrodes: np.ndarray  # (5, 19) sensor units
    baseline: np.ndarray  # (5, 19)
    contact_flags: np.ndarray  # (5,) bool

    def __post_init__(self):
        self.electrodes = np.asarray(self.electrodes, dtype=np.float64)
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        self.contact_flags = np.asarray(self.contact_flags, dtype=bool)
        if self.electrodes.shape != (NUM_FINGERS, NUM_ELECTRODES):
            raise InvalidArgumentError(
                f"electrodes must be (5, 19), got {self.electrodes.shape}")
        if self.baseline.shape != (NUM_FINGERS, NUM_ELECTRODES):
            raise InvalidArgumentError(
                f"baseline must be (5, 19), got {self.baseline.shape}")
        if self.contact_flags.shape != (NUM_FINGERS,):
            raise InvalidArgumentError(
                f"contact_flags must be (5,), got {self.contact_flags.shape}")
        if not (np.all(np.isfinite(self.electrodes)) and np.all(np.isfinite(self.baseline))):
            raise InvalidArgumentError("tactile arrays must be finite")

    @property
    def contact_count(self) -> int:
        return int(np.sum(self.contact_flags))

    def copy(self) -> "TactileFrame":
        return TactileFrame(
            self.electrodes.copy(), self.baseline.copy(), self.contact_flags.copy())


@dataclass(frozen=True)
class HandGraph:
    """Star graph over palm + fingertips with tactile edge features."""

    node_features: np.ndarray = field(repr=False)  # (6, 7): xyz + wxyz quat
    edge_features: np.ndarray = field(repr=False)  # (5, 19)
    edge_list: tuple[tuple[int, int], ...] = EDGE_LIST

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=np.float64)
        ef = np.asarray(self.edge_features, dtype=np.float64)
        if nf.shape != (NUM_NODES, 7):
            raise InvalidArgumentError(f"node_features must be (6, 7), got {nf.shape}")
        if ef.shape != (NUM_FINGERS, NUM_ELECTRODES):
            raise InvalidArgumentError(f"edge_features must be (5, 19), got {ef.shape}")
        if self.edge_list != EDGE_LIST:
            raise InvalidArgumentError("hand graph topology is fixed to the 5-edge star")
        norms = np.linalg.norm(nf[:, 3:], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InvalidArgumentError("node quaternions must be normalized")
        object.__setattr__(self, "node_features", nf)
        object.__setattr__(self, "edge_features", ef)

    @property
    def num_nodes(self) -> int:
        return NUM_NODES

    @property
    def num_edges(self) -> int:
        return NUM_FINGERS


def build_hand_graph(palm_pose: Pose, fingertip_poses, tactile: TactileFrame) -> HandGraph:
    """Assemble the hand graph from palm/fingertip poses and electrodes.

    ``palm_pose`` is relative to the camera; fingertip poses are relative
    to the palm, in canonical finger order.
    """
    fingertip_poses = list(fingertip_poses)
    if len(fingertip_poses) != NUM_FINGERS:
        raise InvalidArgumentError(
            f"expected {NUM_FINGERS} fingertip poses, got {len(fingertip_poses)}")
    rows = [palm_pose.as_vector()]
    for p in fingertip_poses:
        rows.append(p.as_vector())
    node_features = np.stack(rows, axis=0)
    node_features[:, 3:] /= np.linalg.norm(node_features[:, 3:], axis=1, keepdims=True)
    return HandGraph(node_features, tactile.electrodes.copy())


def contact_count(tactile: TactileFrame, threshold: float) -> int:
    """Count fingers whose peak |electrode − baseline| exceeds ``threshold``.

    Also rewrites ``tactile.contact_flags`` to match the detection.
    """
    if threshold < 0:
        raise InvalidArgumentError(f"threshold must be non-negative, got {threshold}")
    peaks = np.max(np.abs(tactile.electrodes - tactile.baseline), axis=1)
    flags = peaks > threshold
    tactile.contact_flags = flags
    return int(np.sum(flags))


@dataclass(frozen=True)
class TactileStats:
    """Per-electrode normalization moments (shared across fingers)."""

    mean: np.ndarray  # (19,)
    std: np.ndarray  # (19,)

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.std, dtype=np.float64)
        if m.shape != (NUM_ELECTRODES,) or s.shape != (NUM_ELECTRODES,):
            raise InvalidArgumentError("stats must be 19-vectors")
        if np.any(s < 0):
            raise InvalidArgumentError("std must be non-negative")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "std", s)

    @staticmethod
    def from_electrodes(electrodes: np.ndarray) -> "TactileStats":
        """Moments over a (..., 19) stack of electrode readings."""
        flat = np.asarray(electrodes, dtype=np.float64).reshape(-1, NUM_ELECTRODES)
        return TactileStats(flat.mean(axis=0), flat.std(axis=0))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "TactileStats":
        return TactileStats(np.asarray(d["mean"]), np.asarray(d["std"]))


def normalize_tactile(tactile: TactileFrame, stats: TactileStats) -> np.ndarray:
    """Z-score the electrode array; zero-std channels pass through centered."""
    std = stats.std.copy()
    zero = std <= 0
    if np.any(zero):
        warnings.warn(
            f"{int(np.sum(zero))} tactile channels have zero std; passing through",
            RuntimeWarning,
        )
        std[zero] = 1.0
    out = (tactile.electrodes - stats.mean) / std
    out[:, zero] = tactile.electrodes[:, zero]
    return out
