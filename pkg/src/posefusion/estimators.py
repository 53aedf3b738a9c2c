"""The three candidate pose estimators and their joint training.

Tactile-only: edge-conditioned message passing over the 6-node hand star
followed by graph convolutions. Vision-only: a residual convolutional
backbone over the 128x128x4 mask crop ("resnet18" or a "small" variant
for CPU-scale runs). Visuo-tactile fusion: one fully connected layer on
the 256-dim concatenation of both 128-dim features.

All heads emit a raw 7-vector (xyz + wxyz quaternion); the quaternion is
normalized (norm floored at 1e-8) before any loss or metric sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .dataio import CROP_SIZE, FrameRecord, crop_and_resize, read_sequence, zero_crop
from .errors import ConfigurationError, EmptyMaskError, InvalidArgumentError
from .geometry import Pose
from .handgraph import (
    NUM_ELECTRODES,
    NUM_FINGERS,
    NUM_NODES,
    TactileStats,
    build_hand_graph,
    normalize_tactile,
)

FEATURE_DIM = 128
FUSED_DIM = 2 * FEATURE_DIM
POSE_DIM = 7

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Differentiable pose loss (Eq-style average model distance)


def normalize_quat_torch(q: torch.Tensor) -> torch.Tensor:
    """Normalize (..., 4) quaternions with the norm floored at 1e-8."""
    norm = q.norm(dim=-1, keepdim=True).clamp_min(1e-8)
    return q / norm


def quat_to_rot_torch(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4) wxyz."""
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
        2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
        2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def loss_LA(pred_raw: torch.Tensor, gt: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Average model distance of predicted vs ground-truth poses.

    pred_raw: (B, 7) raw network output (quaternion unnormalized),
    gt: (B, 7) with unit quaternion, points: (B, n, 3) or (n, 3).
    Returns the batch mean of (1/2n) Σ ||(R̂x + t̂) − (Rx + t)||².
    """
    if pred_raw.shape[-1] != POSE_DIM or gt.shape[-1] != POSE_DIM:
        raise InvalidArgumentError("pose vectors must have 7 entries")
    if points.dim() == 2:
        points = points.unsqueeze(0).expand(pred_raw.shape[0], -1, -1)
    if points.shape[1] < 1:
        raise InvalidArgumentError("model point cloud is empty")
    t_hat = pred_raw[:, :3]
    q_hat = normalize_quat_torch(pred_raw[:, 3:])
    t = gt[:, :3]
    q = normalize_quat_torch(gt[:, 3:])
    a = points @ quat_to_rot_torch(q_hat).transpose(1, 2) + t_hat.unsqueeze(1)
    b = points @ quat_to_rot_torch(q).transpose(1, 2) + t.unsqueeze(1)
    per_sample = ((a - b) ** 2).sum(dim=2).sum(dim=1) / (2.0 * points.shape[1])
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Network configs


@dataclass
class TactileNetConfig:
    message_width: int = 64
    gcn_widths: tuple = (128, 128)
    edge_hidden: int = 64

    def to_dict(self):
        return {"message_width": self.message_width,
                "gcn_widths": list(self.gcn_widths),
                "edge_hidden": self.edge_hidden}

    @staticmethod
    def from_dict(d):
        return TactileNetConfig(d["message_width"], tuple(d["gcn_widths"]),
                                d["edge_hidden"])


@dataclass
class VisionNetConfig:
    variant: str = "small"  # "small" | "resnet18"

    def to_dict(self):
        return {"variant": self.variant}

    @staticmethod
    def from_dict(d):
        return VisionNetConfig(d["variant"])


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 10

    def to_dict(self):
        return {"lr": self.lr, "batch_size": self.batch_size, "epochs": self.epochs}

    @staticmethod
    def from_dict(d):
        return TrainConfig(d["lr"], d["batch_size"], d["epochs"])


# ---------------------------------------------------------------------------
# Networks


def _star_adjacency() -> torch.Tensor:
    """Symmetrically normalized adjacency (with self loops) of the hand star."""
    A = torch.zeros(NUM_NODES, NUM_NODES)
    for i in range(1, NUM_NODES):
        A[0, i] = A[i, 0] = 1.0
    A += torch.eye(NUM_NODES)
    d = A.sum(dim=1)
    dinv = d.rsqrt()
    return dinv.unsqueeze(1) * A * dinv.unsqueeze(0)


class TactileNet(nn.Module):
    """Edge-conditioned message passing + GCN stack over the hand graph."""

    def __init__(self, config: TactileNetConfig | None = None):
        super().__init__()
        self.config = config or TactileNetConfig()
        w = self.config.message_width
        self.edge_mlp = nn.Sequential(
            nn.Linear(NUM_ELECTRODES, self.config.edge_hidden),
            nn.ReLU(),
            nn.Linear(self.config.edge_hidden, POSE_DIM * w),
        )
        self.node_lin = nn.Linear(POSE_DIM, w)
        widths = (w,) + tuple(self.config.gcn_widths)
        self.gcn = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1]) for i in range(len(widths) - 1))
        self.register_buffer("adj", _star_adjacency())
        self.fc_feature = nn.Linear(NUM_NODES * widths[-1], FEATURE_DIM)
        self.head = nn.Linear(FEATURE_DIM, POSE_DIM)

    def forward(self, nodes: torch.Tensor, edges: torch.Tensor):
        """nodes (B, 6, 7), edges (B, 5, 19) -> (raw pose (B, 7), feature (B, 128))."""
        if nodes.shape[1:] != (NUM_NODES, POSE_DIM):
            raise ConfigurationError(f"nodes must be (B, 6, 7), got {tuple(nodes.shape)}")
        if edges.shape[1:] != (NUM_FINGERS, NUM_ELECTRODES):
            raise ConfigurationError(f"edges must be (B, 5, 19), got {tuple(edges.shape)}")
        B = nodes.shape[0]
        w = self.config.message_width
        mats = self.edge_mlp(edges).reshape(B, NUM_FINGERS, POSE_DIM, w)
        # finger -> palm messages (mean over the 5 incident edges)
        msg_to_palm = torch.einsum("bfd,bfdw->bfw", nodes[:, 1:], mats).mean(dim=1)
        # palm -> finger messages (one incident edge per fingertip)
        msg_to_finger = torch.einsum("bd,bfdw->bfw", nodes[:, 0], mats)
        agg = torch.cat([msg_to_palm.unsqueeze(1), msg_to_finger], dim=1)
        h = torch.relu(self.node_lin(nodes) + agg)
        for lin in self.gcn:
            h = torch.relu(lin(self.adj @ h))
        feat = torch.relu(self.fc_feature(h.reshape(B, -1)))
        return self.head(feat), feat


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.down = nn.Identity()

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.down(x))


_VISION_VARIANTS = {
    # variant: (stem channels, stem stride, blocks per stage, stage channels)
    "small": (16, 4, (1, 1, 1, 1), (16, 32, 64, 128)),
    "resnet18": (64, 2, (2, 2, 2, 2), (64, 128, 256, 512)),
}


class VisionNet(nn.Module):
    """Residual backbone over the 128x128x4 RGB-D crop."""

    def __init__(self, config: VisionNetConfig | None = None):
        super().__init__()
        self.config = config or VisionNetConfig()
        if self.config.variant not in _VISION_VARIANTS:
            raise ConfigurationError(f"unknown vision variant {self.config.variant!r}")
        stem_c, stem_s, blocks, chans = _VISION_VARIANTS[self.config.variant]
        stem = [nn.Conv2d(4, stem_c, 7, stem_s, 3, bias=False),
                nn.BatchNorm2d(stem_c), nn.ReLU()]
        if self.config.variant == "resnet18":
            stem.append(nn.MaxPool2d(3, 2, 1))
        self.stem = nn.Sequential(*stem)
        layers = []
        cin = stem_c
        for stage, (nb, c) in enumerate(zip(blocks, chans)):
            for b in range(nb):
                stride = 2 if (b == 0 and stage > 0) else 1
                layers.append(BasicBlock(cin, c, stride))
                cin = c
        self.stages = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc_feature = nn.Linear(cin, FEATURE_DIM)
        self.head = nn.Linear(FEATURE_DIM, POSE_DIM)

    def forward(self, crop: torch.Tensor):
        """crop (B, 4, 128, 128) -> (raw pose (B, 7), feature (B, 128))."""
        if crop.shape[1:] != (4, CROP_SIZE, CROP_SIZE):
            raise ConfigurationError(
                f"crop must be (B, 4, 128, 128), got {tuple(crop.shape)}")
        x = self.pool(self.stages(self.stem(crop))).flatten(1)
        feat = torch.relu(self.fc_feature(x))
        return self.head(feat), feat


class FusionHead(nn.Module):
    """Single fully connected layer on the 256-dim concatenated features."""

    def __init__(self):
        super().__init__()
        self.head = nn.Linear(FUSED_DIM, POSE_DIM)

    def forward(self, tactile_feature: torch.Tensor, vision_feature: torch.Tensor):
        if tactile_feature.shape[-1] != FEATURE_DIM or vision_feature.shape[-1] != FEATURE_DIM:
            raise ConfigurationError("fusion inputs must both be 128-dim")
        fused = torch.cat([tactile_feature, vision_feature], dim=-1)
        return self.head(fused), fused


# ---------------------------------------------------------------------------
# Frame -> tensor conversion


@dataclass
class EstimatorOutput:
    """One estimator's candidate pose plus its penultimate feature."""

    pose: Pose
    feature: np.ndarray


def frame_to_graph_arrays(frame: FrameRecord, stats: TactileStats):
    """(node_features (6, 7), normalized edge features (5, 19)) as float32."""
    graph = build_hand_graph(frame.palm_pose, frame.fingertip_poses, frame.tactile)
    edges = normalize_tactile(frame.tactile, stats)
    return graph.node_features.astype(np.float32), edges.astype(np.float32)


def frame_to_crop_array(frame: FrameRecord) -> np.ndarray:
    """Mask crop as (4, 128, 128); all-zero when the mask is empty."""
    try:
        crop = crop_and_resize(frame)
    except EmptyMaskError:
        crop = zero_crop()
    return np.ascontiguousarray(crop.transpose(2, 0, 1))


@dataclass
class FrameTensors:
    """Whole-dataset tensors for training/inference."""

    nodes: torch.Tensor  # (N, 6, 7) float32
    edges: torch.Tensor  # (N, 5, 19) float32
    crops: torch.Tensor  # (N, 4, 128, 128) float16 (cast per batch)
    gt: torch.Tensor  # (N, 7) float32
    object_ids: list  # per-frame object id
    sequence_slices: list  # (sequence_id, start, stop) into the flat arrays
    occlusion: np.ndarray  # (N,)
    contacts: np.ndarray  # (N,) int


def build_frame_tensors(manifests, stats: TactileStats) -> FrameTensors:
    """Decode every frame of the given sequences into flat tensors."""
    nodes, edges, crops, gt, obj_ids, slices = [], [], [], [], [], []
    occl, cont = [], []
    pos = 0
    for m in manifests:
        frames = read_sequence(m.path)
        for fr in frames:
            n, e = frame_to_graph_arrays(fr, stats)
            nodes.append(n)
            edges.append(e)
            crops.append(frame_to_crop_array(fr).astype(np.float16))
            gt.append(fr.gt_pose.as_vector().astype(np.float32))
            obj_ids.append(fr.object_id)
            occl.append(fr.occlusion_rate)
            cont.append(fr.contact_count)
        slices.append((m.sequence_id, pos, pos + len(frames)))
        pos += len(frames)
    return FrameTensors(
        nodes=torch.from_numpy(np.stack(nodes)),
        edges=torch.from_numpy(np.stack(edges)),
        crops=torch.from_numpy(np.stack(crops)),
        gt=torch.from_numpy(np.stack(gt)),
        object_ids=obj_ids,
        sequence_slices=slices,
        occlusion=np.asarray(occl),
        contacts=np.asarray(cont, dtype=int),
    )


# ---------------------------------------------------------------------------
# Bundle: the three estimators + everything needed to run them


class EstimatorBundle:
    """Trained tactile/vision/fusion estimators with their normalization."""

    def __init__(self, tactile_config=None, vision_config=None,
                 stats: TactileStats | None = None, object_models: dict | None = None,
                 seed: int = 0):
        self.tactile_net = TactileNet(tactile_config)
        self.vision_net = VisionNet(vision_config)
        self.fusion_head = FusionHead()
        self.stats = stats
        self.object_models = object_models or {}  # id -> (n, 3) float64
        self.seed = seed
        self.log = []

    def modules(self):
        return [self.tactile_net, self.vision_net, self.fusion_head]

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def train_mode(self):
        for m in self.modules():
            m.train()

    def eval_mode(self):
        for m in self.modules():
            m.eval()

    def forward(self, nodes, edges, crops):
        """Raw outputs for a batch; crops cast to float32 if needed."""
        tac_raw, tac_feat = self.tactile_net(nodes, edges)
        vis_raw, vis_feat = self.vision_net(crops.float())
        fus_raw, fused = self.fusion_head(tac_feat, vis_feat)
        return {"tactile_raw": tac_raw, "vision_raw": vis_raw, "fusion_raw": fus_raw,
                "tactile_feat": tac_feat, "vision_feat": vis_feat, "fused_feat": fused}

    @torch.no_grad()
    def infer(self, nodes, edges, crops, batch_size: int = 64):
        """Batched inference; returns numpy arrays of poses and features."""
        self.eval_mode()
        outs = {k: [] for k in ("tactile_raw", "vision_raw", "fusion_raw",
                                "tactile_feat", "vision_feat")}
        for i in range(0, nodes.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            got = self.forward(nodes[sl], edges[sl], crops[sl])
            for k in outs:
                outs[k].append(got[k])
        result = {k: torch.cat(v).numpy() for k, v in outs.items()}
        for k in ("tactile_raw", "vision_raw", "fusion_raw"):
            raw = result[k]
            q = raw[:, 3:]
            q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-8)
            result[k.replace("_raw", "_pose")] = np.concatenate([raw[:, :3], q], axis=1)
        return result

    @torch.no_grad()
    def infer_frame(self, frame: FrameRecord) -> dict:
        """EstimatorOutputs for one frame: keys tactile/vision/fusion."""
        n, e = frame_to_graph_arrays(frame, self.stats)
        c = frame_to_crop_array(frame)
        res = self.infer(torch.from_numpy(n[None]), torch.from_numpy(e[None]),
                         torch.from_numpy(c[None]))
        return {
            "tactile": EstimatorOutput(Pose.from_vector(res["tactile_pose"][0]),
                                       res["tactile_feat"][0]),
            "vision": EstimatorOutput(Pose.from_vector(res["vision_pose"][0]),
                                      res["vision_feat"][0]),
            "fusion": EstimatorOutput(
                Pose.from_vector(res["fusion_pose"][0]),
                np.concatenate([res["tactile_feat"][0], res["vision_feat"][0]])),
        }

    def save(self, path):
        payload = {
            "format_version": CHECKPOINT_VERSION,
            "kind": "estimators",
            "seed": self.seed,
            "tactile_config": self.tactile_net.config.to_dict(),
            "vision_config": self.vision_net.config.to_dict(),
            "tactile_stats": self.stats.to_dict() if self.stats else None,
            "object_models": {k: np.asarray(v) for k, v in self.object_models.items()},
            "state": {
                "tactile": self.tactile_net.state_dict(),
                "vision": self.vision_net.state_dict(),
                "fusion": self.fusion_head.state_dict(),
            },
            "log": self.log,
        }
        torch.save(payload, path)

    @staticmethod
    def load(path) -> "EstimatorBundle":
        payload = torch.load(path, weights_only=False)
        if payload.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigurationError(
                f"estimator checkpoint version {payload.get('format_version')} "
                f"unsupported (want {CHECKPOINT_VERSION})")
        if payload.get("kind") != "estimators":
            raise ConfigurationError(f"not an estimator checkpoint: {path}")
        bundle = EstimatorBundle(
            TactileNetConfig.from_dict(payload["tactile_config"]),
            VisionNetConfig.from_dict(payload["vision_config"]),
            TactileStats.from_dict(payload["tactile_stats"]),
            {k: np.asarray(v) for k, v in payload["object_models"].items()},
            payload["seed"],
        )
        bundle.tactile_net.load_state_dict(payload["state"]["tactile"])
        bundle.vision_net.load_state_dict(payload["state"]["vision"])
        bundle.fusion_head.load_state_dict(payload["state"]["fusion"])
        bundle.log = payload.get("log", [])
        bundle.eval_mode()
        return bundle


def train_estimators(train_manifests, object_models: dict,
                     train_config: TrainConfig | None = None,
                     tactile_config: TactileNetConfig | None = None,
                     vision_config: VisionNetConfig | None = None,
                     seed: int = 0, tensors: FrameTensors | None = None,
                     progress: bool = False) -> EstimatorBundle:
    """Jointly train the three estimators with the equal-weight ADD loss sum."""
    train_manifests = list(train_manifests)
    if not train_manifests and tensors is None:
        raise InvalidArgumentError("training set is empty")
    cfg = train_config or TrainConfig()
    stats = train_manifests[0].tactile_stats if train_manifests else None
    if stats is None:
        raise InvalidArgumentError("manifests carry no tactile normalization stats")
    torch.manual_seed(seed)
    bundle = EstimatorBundle(tactile_config, vision_config, stats, object_models, seed)
    if tensors is None:
        tensors = build_frame_tensors(train_manifests, stats)
    n_frames = tensors.nodes.shape[0]

    obj_list = sorted(object_models)
    points = {o: torch.from_numpy(np.asarray(object_models[o], dtype=np.float32))
              for o in obj_list}
    obj_idx = torch.tensor([obj_list.index(o) for o in tensors.object_ids])
    point_bank = torch.stack([points[o] for o in obj_list]) \
        if len({points[o].shape for o in obj_list}) == 1 else None

    opt = torch.optim.Adam(bundle.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    bundle.train_mode()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n_frames, generator=gen)
        sums = {"tactile": 0.0, "vision": 0.0, "fusion": 0.0}
        n_batches = 0
        for start in range(0, n_frames, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            out = bundle.forward(tensors.nodes[idx], tensors.edges[idx],
                                 tensors.crops[idx])
            gt = tensors.gt[idx]
            if point_bank is not None:
                pts = point_bank[obj_idx[idx]]
            else:
                pts = torch.stack([points[tensors.object_ids[int(i)]] for i in idx])
            lt = loss_LA(out["tactile_raw"], gt, pts)
            lv = loss_LA(out["vision_raw"], gt, pts)
            lf = loss_LA(out["fusion_raw"], gt, pts)
            loss = lt + lv + lf
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss is not finite at epoch {epoch}, "
                    f"batch {n_batches} (tactile={lt.item()}, vision={lv.item()}, "
                    f"fusion={lf.item()})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["tactile"] += lt.item()
            sums["vision"] += lv.item()
            sums["fusion"] += lf.item()
            n_batches += 1
        entry = {"epoch": epoch,
                 **{k: v / n_batches for k, v in sums.items()},
                 "total": sum(sums.values()) / n_batches}
        bundle.log.append(entry)
        if progress:
            print(f"  epoch {epoch}: total={entry['total']:.6f} "
                  f"(t={entry['tactile']:.6f} v={entry['vision']:.6f} "
                  f"f={entry['fusion']:.6f})")
    bundle.eval_mode()
    return bundle
