"""Evaluation harness: per-object error tables, occlusion x contact error
matrices, and the corruption robustness experiments.

All reports are structured JSON plus delimited text tables; plots are
optional artifacts. Positional errors are reported in cm (computed in
meters), angular errors in radians.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .dataio import CorruptionSpec, apply_corruption, read_sequence
from .errors import InvalidArgumentError
from .estimators import (
    EstimatorBundle,
    build_frame_tensors,
    frame_to_crop_array,
    frame_to_graph_arrays,
)
from .handgraph import NUM_FINGERS
from .selector import CANDIDATE_NAMES, SelectLSTM, build_selector_input

METHODS = ("tactile", "vision", "fusion", "selectlstm")

OCCLUSION_BIN_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0)
OCCLUSION_BIN_LABELS = ("[0,0.25)", "[0.25,0.5)", "[0.5,0.75)", "[0.75,1]")
CONTACT_BIN_LABELS = ("0-1", "2", "3", "4-5")


def occlusion_bin(rate: float) -> int:
    """Left-closed occlusion bins; 1.0 falls in the last bin."""
    if rate >= 0.75:
        return 3
    return int(rate / 0.25)


def contact_bin(count: int) -> int:
    if count <= 1:
        return 0
    if count >= 4:
        return 3
    return count - 1  # 2 -> 1, 3 -> 2


# ---------------------------------------------------------------------------
# Vectorized pose errors


def _quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def batch_errors(pose7: np.ndarray, gt7: np.ndarray, points: np.ndarray) -> dict:
    """Per-frame positional (m), angular (rad), and ADD (m²) errors.

    pose7/gt7: (N, 7) with unit quaternions; points: (n, 3) model cloud.
    """
    pose7 = np.asarray(pose7, dtype=np.float64)
    gt7 = np.asarray(gt7, dtype=np.float64)
    positional = np.linalg.norm(pose7[:, :3] - gt7[:, :3], axis=1)
    qa = pose7[:, 3:] / np.linalg.norm(pose7[:, 3:], axis=1, keepdims=True)
    qb = gt7[:, 3:] / np.linalg.norm(gt7[:, 3:], axis=1, keepdims=True)
    inner = np.sum(qa * qb, axis=1)
    angular = np.arccos(np.clip(2 * inner * inner - 1, -1.0, 1.0))
    Ra = _quat_to_rot_batch(pose7[:, 3:])
    Rb = _quat_to_rot_batch(gt7[:, 3:])
    a = np.einsum("nij,mj->nmi", Ra, points) + pose7[:, None, :3]
    b = np.einsum("nij,mj->nmi", Rb, points) + gt7[:, None, :3]
    add = np.sum((a - b) ** 2, axis=(1, 2)) / (2.0 * points.shape[0])
    return {"positional": positional, "angular": angular, "add": add}


# ---------------------------------------------------------------------------
# Inference over stored sequences


@dataclass
class SequenceOutputs:
    """All per-frame estimator/selector quantities for one sequence."""

    sequence_id: str
    object_id: str
    candidate_poses: np.ndarray  # (T, 3, 7) tactile/vision/fusion
    fused_features: np.ndarray  # (T, 256)
    gt: np.ndarray  # (T, 7)
    occlusion: np.ndarray  # (T,)
    contacts: np.ndarray  # (T,) int
    confidences: np.ndarray | None = None  # (T, 3)
    errors: dict | None = None  # method -> {positional, angular, add}
    labels: np.ndarray | None = None  # (T,) oracle argmin
    selected: np.ndarray | None = None  # (T,) selector argmax


def run_sequences(manifests, bundle: EstimatorBundle,
                  selector_model: SelectLSTM | None = None,
                  frames_by_sequence: dict | None = None) -> list:
    """Run all estimators (and optionally the selector) over sequences.

    ``frames_by_sequence`` overrides on-disk frames (used for corruption
    runs). The selector is evaluated as a stream over each full sequence,
    with its hidden state reset at sequence boundaries.
    """
    results = []
    for m in manifests:
        if frames_by_sequence is not None:
            frames = frames_by_sequence[m.sequence_id]
        else:
            frames = read_sequence(m.path)
        nodes, edges, crops, gts, occs, conts = [], [], [], [], [], []
        for fr in frames:
            n, e = frame_to_graph_arrays(fr, bundle.stats)
            nodes.append(n)
            edges.append(e)
            crops.append(frame_to_crop_array(fr))
            gts.append(fr.gt_pose.as_vector())
            occs.append(fr.occlusion_rate)
            conts.append(fr.contact_count)
        res = bundle.infer(torch.from_numpy(np.stack(nodes)),
                           torch.from_numpy(np.stack(edges)),
                           torch.from_numpy(np.stack(crops)))
        cand = np.stack([res["tactile_pose"], res["vision_pose"], res["fusion_pose"]],
                        axis=1)
        fused = np.concatenate([res["tactile_feat"], res["vision_feat"]], axis=1)
        out = SequenceOutputs(
            sequence_id=m.sequence_id,
            object_id=m.object_id,
            candidate_poses=cand,
            fused_features=fused,
            gt=np.stack(gts),
            occlusion=np.asarray(occs),
            contacts=np.asarray(conts, dtype=int),
        )
        points = np.asarray(bundle.object_models[m.object_id])
        errors = {}
        for k, name in enumerate(CANDIDATE_NAMES):
            errors[name] = batch_errors(cand[:, k], out.gt, points)
        adds = np.stack([errors[name]["add"] for name in CANDIDATE_NAMES], axis=1)
        out.labels = np.argmin(adds, axis=1)
        if selector_model is not None:
            x = build_selector_input(cand, fused, expected_length=None)
            selector_model.eval()
            with torch.no_grad():
                logits, _ = selector_model(
                    torch.from_numpy(x).unsqueeze(0))
                out.confidences = torch.softmax(logits, dim=-1)[0].numpy()
            out.selected = np.argmax(out.confidences, axis=1)
            sel_pose = cand[np.arange(len(frames)), out.selected]
            errors["selectlstm"] = batch_errors(sel_pose, out.gt, points)
        oracle_pose = cand[np.arange(len(frames)), out.labels]
        errors["oracle"] = batch_errors(oracle_pose, out.gt, points)
        out.errors = errors
        results.append(out)
    return results


def _dataset_hash(manifests) -> str:
    h = hashlib.sha256()
    for m in sorted(manifests, key=lambda m: m.sequence_id):
        h.update((m.path / "manifest.json").read_bytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Table-shaped evaluation report


def evaluate(test_manifests, bundle: EstimatorBundle,
             selector_model: SelectLSTM | None = None, seed: int | None = None,
             checkpoint_ids: dict | None = None) -> dict:
    """Per-object, per-method mean errors plus the oracle-bound self check."""
    test_manifests = list(test_manifests)
    if not test_manifests:
        raise InvalidArgumentError("evaluation set is empty")
    seqs = run_sequences(test_manifests, bundle, selector_model)
    methods = list(CANDIDATE_NAMES) + (["selectlstm"] if selector_model else [])
    objects = sorted({s.object_id for s in seqs})
    per_object = {m: {} for m in methods + ["oracle"]}
    for obj in objects:
        sel = [s for s in seqs if s.object_id == obj]
        n_frames = int(sum(len(s.gt) for s in sel))
        for method in methods + ["oracle"]:
            pos = np.concatenate([s.errors[method]["positional"] for s in sel])
            ang = np.concatenate([s.errors[method]["angular"] for s in sel])
            add = np.concatenate([s.errors[method]["add"] for s in sel])
            per_object[method][obj] = {
                "mean_positional_cm": float(np.mean(pos) * 100.0),
                "mean_angular_rad": float(np.mean(ang)),
                "mean_add_m2": float(np.mean(add)),
                "frames": n_frames,
            }
    overall = {}
    for method in methods + ["oracle"]:
        pos = np.concatenate([s.errors[method]["positional"] for s in seqs])
        ang = np.concatenate([s.errors[method]["angular"] for s in seqs])
        add = np.concatenate([s.errors[method]["add"] for s in seqs])
        overall[method] = {
            "mean_positional_cm": float(np.mean(pos) * 100.0),
            "mean_angular_rad": float(np.mean(ang)),
            "mean_add_m2": float(np.mean(add)),
            "frames": int(len(pos)),
        }
    # oracle bound is an identity; violation means a metric bug
    for name in CANDIDATE_NAMES:
        if overall["oracle"]["mean_add_m2"] > overall[name]["mean_add_m2"] + 1e-15:
            raise RuntimeError(
                f"oracle bound violated: oracle mean ADD "
                f"{overall['oracle']['mean_add_m2']} > {name} "
                f"{overall[name]['mean_add_m2']}")
    improvements = {}
    if selector_model is not None:
        for name in CANDIDATE_NAMES:
            improvements[name] = {
                metric: _improvement(overall[name][metric], overall["selectlstm"][metric])
                for metric in ("mean_positional_cm", "mean_angular_rad")
            }
    selection = {}
    if selector_model is not None:
        labels = np.concatenate([s.labels for s in seqs])
        selected = np.concatenate([s.selected for s in seqs])
        selection = {
            "accuracy": float(np.mean(labels == selected)),
            "share": {name: float(np.mean(selected == k))
                      for k, name in enumerate(CANDIDATE_NAMES)},
            "label_share": {name: float(np.mean(labels == k))
                            for k, name in enumerate(CANDIDATE_NAMES)},
        }
    return {
        "per_object": per_object,
        "overall": overall,
        "improvement_over_baselines": improvements,
        "selection": selection,
        "metadata": {
            "dataset_hash": _dataset_hash(test_manifests),
            "checkpoint_ids": checkpoint_ids or {},
            "seed": seed,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "sequences": [m.sequence_id for m in test_manifests],
        },
    }


def _improvement(baseline: float, ours: float) -> float:
    """(baseline − ours) / baseline; the reporting convention for gains."""
    if baseline == 0:
        return 0.0
    return (baseline - ours) / baseline


def render_table(report: dict) -> str:
    """Delimited text table of the per-object evaluation report."""
    methods = [m for m in METHODS if m in report["per_object"]]
    lines = ["object\tmetric\t" + "\t".join(methods)]
    objects = sorted(next(iter(report["per_object"].values())).keys())
    for obj in objects:
        for metric, label in (("mean_positional_cm", "positional_cm"),
                              ("mean_angular_rad", "angular_rad")):
            row = [f"{report['per_object'][m][obj][metric]:.4f}" for m in methods]
            lines.append(f"{obj}\t{label}\t" + "\t".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Occlusion x contact error matrix


def matrix_report(test_manifests, bundle: EstimatorBundle,
                  selector_model: SelectLSTM | None = None) -> dict:
    """4x4 binned mean errors per method per metric; empty cells are null."""
    seqs = run_sequences(list(test_manifests), bundle, selector_model)
    methods = list(CANDIDATE_NAMES) + (["selectlstm"] if selector_model else [])
    occ = np.concatenate([s.occlusion for s in seqs])
    con = np.concatenate([s.contacts for s in seqs])
    occ_bins = np.array([occlusion_bin(r) for r in occ])
    con_bins = np.array([contact_bin(c) for c in con])
    grids = {}
    counts = [[int(np.sum((occ_bins == i) & (con_bins == j))) for j in range(4)]
              for i in range(4)]
    for method in methods:
        for metric in ("positional", "angular"):
            vals = np.concatenate([s.errors[method][metric] for s in seqs])
            grid = []
            for i in range(4):
                row = []
                for j in range(4):
                    mask = (occ_bins == i) & (con_bins == j)
                    row.append(float(np.mean(vals[mask])) if np.any(mask) else None)
                grid.append(row)
            grids[f"{method}/{metric}"] = grid
    return {
        "occlusion_bins": list(OCCLUSION_BIN_LABELS),
        "contact_bins": list(CONTACT_BIN_LABELS),
        "cell_counts": counts,
        "grids": grids,
        "metadata": {"dataset_hash": _dataset_hash(list(test_manifests))},
    }


# ---------------------------------------------------------------------------
# Corruption experiments


def _full_occlusion_spec(frames) -> CorruptionSpec:
    """A white block covering every visible object pixel of the sequence."""
    ys, xs = [], []
    for fr in frames:
        yy, xx = np.nonzero(fr.object_mask_visible)
        if yy.size:
            ys.extend([yy.min(), yy.max()])
            xs.extend([xx.min(), xx.max()])
    if not ys:
        return CorruptionSpec(kind="occlusion_block", block=(0, 0, 0, 0))
    y0 = max(0, int(min(ys)) - 4)
    y1 = min(480, int(max(ys)) + 5)
    x0 = max(0, int(min(xs)) - 4)
    x1 = min(640, int(max(xs)) + 5)
    return CorruptionSpec(kind="occlusion_block", block=(x0, y0, x1 - x0, y1 - y0))


def _partial_occlusion_frames(frames, severity: float):
    """White block sized ``severity`` x the per-frame visible bbox."""
    out = []
    for fr in frames:
        yy, xx = np.nonzero(fr.object_mask_visible)
        if yy.size == 0 or severity <= 0:
            out.append(fr.copy())
            continue
        cy, cx = (yy.min() + yy.max()) / 2, (xx.min() + xx.max()) / 2
        h = (yy.max() - yy.min() + 9) * severity
        w = (xx.max() - xx.min() + 9) * severity
        y0 = int(max(0, cy - h / 2))
        x0 = int(max(0, cx - w / 2))
        y1 = int(min(480, cy + h / 2))
        x1 = int(min(640, cx + w / 2))
        spec = CorruptionSpec(kind="occlusion_block", block=(x0, y0, x1 - x0, y1 - y0))
        out.append(apply_corruption([fr], spec)[0])
    return out


def corruption_experiment(test_manifests, bundle: EstimatorBundle,
                          selector_model: SelectLSTM,
                          occlusion_severities=(0.0, 0.5, 1.0),
                          dropout_fingers=(0, 5), seed: int = 0) -> dict:
    """Selection shares and errors under growing corruption.

    Occlusion severities are block sizes relative to the visible object
    bbox (1.0 = the block covers the whole silhouette, emptying the
    mask). Dropout entries are the number of fingers reset to baseline.
    """
    test_manifests = list(test_manifests)
    results = {"occlusion": [], "tactile_dropout": []}
    for severity in occlusion_severities:
        frames_by_seq = {}
        for m in test_manifests:
            frames = read_sequence(m.path)
            if severity >= 1.0:
                spec = _full_occlusion_spec(frames)
                frames_by_seq[m.sequence_id] = apply_corruption(frames, spec)
            else:
                frames_by_seq[m.sequence_id] = _partial_occlusion_frames(frames, severity)
        results["occlusion"].append(
            _corruption_summary(severity, test_manifests, bundle, selector_model,
                                frames_by_seq))
    for n_fingers in dropout_fingers:
        frames_by_seq = {}
        spec = CorruptionSpec(kind="tactile_dropout",
                              fingers=tuple(range(int(n_fingers))), seed=seed)
        for m in test_manifests:
            frames = read_sequence(m.path)
            frames_by_seq[m.sequence_id] = apply_corruption(frames, spec)
        results["tactile_dropout"].append(
            _corruption_summary(float(n_fingers), test_manifests, bundle,
                                selector_model, frames_by_seq))
    return results


def _corruption_summary(severity, manifests, bundle, selector_model, frames_by_seq):
    seqs = run_sequences(manifests, bundle, selector_model,
                         frames_by_sequence=frames_by_seq)
    selected = np.concatenate([s.selected for s in seqs])
    labels = np.concatenate([s.labels for s in seqs])
    summary = {
        "severity": severity,
        "frames": int(len(selected)),
        "selection_share": {name: float(np.mean(selected == k))
                            for k, name in enumerate(CANDIDATE_NAMES)},
        "selection_accuracy": float(np.mean(selected == labels)),
        "mean_positional_cm": {},
        "mean_angular_rad": {},
        "mean_add_m2": {},
    }
    for method in list(CANDIDATE_NAMES) + ["selectlstm", "oracle"]:
        for metric, key, scale in (("positional", "mean_positional_cm", 100.0),
                                   ("angular", "mean_angular_rad", 1.0),
                                   ("add", "mean_add_m2", 1.0)):
            vals = np.concatenate([s.errors[method][metric] for s in seqs])
            summary[key][method] = float(np.mean(vals) * scale)
    return summary


# (kind, level): occlusion level is the block size relative to the visible
# bbox, dropout level is the number of fingers reset to baseline
SELECTOR_AUGMENT_VARIANTS = (("clean", None), ("occlusion", 0.6),
                             ("occlusion", 1.0), ("dropout", 3), ("dropout", 5))


def _corrupted_frames(frames, kind, level, rng):
    if kind == "occlusion":
        if level >= 1.0:
            return apply_corruption(frames, _full_occlusion_spec(frames))
        return _partial_occlusion_frames(frames, level)
    fingers = tuple(sorted(rng.choice(NUM_FINGERS, size=int(level),
                                      replace=False).tolist()))
    return apply_corruption(frames, CorruptionSpec(kind="tactile_dropout",
                                                   fingers=fingers))


def selector_training_windows(manifests, bundle: EstimatorBundle,
                              length: int = 20, stride: int = 1,
                              augment: bool = True, seed: int = 0):
    """Windowed selector inputs and oracle labels from frozen estimators.

    With ``augment`` each sequence also contributes corrupted variants
    (partial and full occlusion blocks, partial and full tactile dropout),
    so the labels teach the fallback policy: corrupted vision frames are
    labeled tactile and dead-tactile frames are labeled vision, which the
    selector never observes on clean data alone.

    Returns (inputs (W, length, 277), labels (W, length)).
    """
    from .dataio import sample_windows

    manifests = list(manifests)
    variants = SELECTOR_AUGMENT_VARIANTS if augment else (("clean", None),)
    rng = np.random.default_rng(seed)
    inputs, labels = [], []
    for kind, level in variants:
        if kind == "clean":
            frames_by_seq = None
        else:
            frames_by_seq = {m.sequence_id: _corrupted_frames(
                read_sequence(m.path), kind, level, rng) for m in manifests}
        seqs = run_sequences(manifests, bundle, selector_model=None,
                             frames_by_sequence=frames_by_seq)
        for s in seqs:
            x = build_selector_input(s.candidate_poses, s.fused_features,
                                     expected_length=None)
            for win in sample_windows(len(s.gt), length=length, stride=stride):
                idx = np.asarray(win)
                inputs.append(x[idx])
                labels.append(s.labels[idx])
    if not inputs:
        raise InvalidArgumentError("no training windows (sequences too short?)")
    return np.stack(inputs), np.stack(labels)


def save_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
