"""Acceptance suite: one test per shipped criterion, one PASS/FAIL line each.

The end-to-end criteria (4-6) share a single CLI pipeline run over a
4000-frame synthetic dataset; budget is 45 minutes on one CPU core.
Criterion 8 needs a real full-scale dataset and is skipped unless
POSEFUSION_FULL_DATASET points at one.
"""

import json
import os
import time

import numpy as np
import pytest
import torch

from posefusion import cli
from posefusion.dataio import list_sequences, read_sequence, split_dataset, write_sequence
from posefusion.estimators import EstimatorBundle, TrainConfig, loss_LA, train_estimators
from posefusion.evaluation import evaluate
from posefusion.geometry import (
    ModelPointCloud,
    Pose,
    Quaternion,
    add_distance,
    angular_error,
    positional_error,
    random_pose,
)
from posefusion.synth import SceneAssets, SceneConfig, generate_dataset, generate_sequence

# pinned pipeline configuration for the end-to-end criteria
DATASET_SEED = 11
NUM_SEQUENCES = 40
FRAMES_PER_SEQUENCE = 100
TRAIN_ARGS = ["--epochs", "10", "--lr", "1e-3", "--seed", "0"]
SELECTOR_ARGS = ["--epochs", "15", "--stride", "1", "--seed", "0"]
PIPELINE_BUDGET_S = 45 * 60


def announce(capsys, criterion: str, passed: bool, detail: str = ""):
    with capsys.disabled():
        state = "PASS" if passed else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"\n[acceptance] {criterion}: {state}{suffix}")
    assert passed, f"{criterion}{suffix}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """gen -> train -> train-selector -> eval, once for the whole session."""
    root = tmp_path_factory.mktemp("acceptance")
    data = root / "data"
    est = root / "est.pt"
    sel = root / "sel.pt"
    rep = root / "rep.json"
    t0 = time.perf_counter()
    assert cli.main(["gen", "--data", str(data), "--seed", str(DATASET_SEED),
                     "--sequences", str(NUM_SEQUENCES),
                     "--frames", str(FRAMES_PER_SEQUENCE), "--quiet"]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(est),
                     "--quiet", *TRAIN_ARGS]) == 0
    assert cli.main(["train-selector", "--data", str(data), "--estimators",
                     str(est), "--out", str(sel), "--quiet", *SELECTOR_ARGS]) == 0
    assert cli.main(["eval", "--data", str(data), "--estimators", str(est),
                     "--selector", str(sel), "--out", str(rep), "--quiet"]) == 0
    elapsed = time.perf_counter() - t0
    return {"data": data, "est": est, "sel": sel,
            "report": json.loads(rep.read_text()), "elapsed": elapsed,
            "root": root}


def test_criterion_1_metric_exactness(capsys):
    t0 = time.perf_counter()
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5)
                        for z in (-0.5, 0.5)])
    cube = ModelPointCloud("cube", corners)
    ident = Pose.identity()
    ok = True
    # identical poses: all three metrics exactly zero
    ok &= add_distance(ident, ident, cube) == 0.0
    ok &= angular_error(Quaternion.identity(), Quaternion.identity()) == 0.0
    ok &= positional_error(ident, ident) == 0.0
    # hand-derived: pi rotation about z maps each corner (x,y,z)->(-x,-y,z),
    # squared distance 4(x^2+y^2)=2 per corner, sum 16, /(2*8) = 1.0
    rot_pi = Pose(np.zeros(3), Quaternion.from_axis_angle([0, 0, 1], np.pi))
    ok &= abs(add_distance(rot_pi, ident, cube) - 1.0) < 1e-9
    # hand-derived: pure translation d gives ||d||^2/2
    shift = Pose(np.array([0.1, 0.0, 0.0]), Quaternion.identity())
    ok &= abs(add_distance(shift, ident, cube) - 0.005) < 1e-9
    # angular: 90 degrees about z -> pi/2; double cover exact
    q90 = Quaternion(np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4))
    ok &= abs(angular_error(Quaternion.identity(), q90) - np.pi / 2) < 1e-9
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.normal(size=4)
        q = Quaternion(*(v / np.linalg.norm(v)))
        ok &= abs(angular_error(q, -q)) < 1e-6
    # positional: 3-4-5 triangle
    p345 = Pose(np.array([0.03, 0.04, 0.0]), Quaternion.identity())
    ok &= abs(positional_error(p345, ident) - 0.05) < 1e-9
    elapsed = time.perf_counter() - t0
    announce(capsys, "criterion 1 metric exactness", bool(ok) and elapsed < 1.0,
             f"{elapsed:.3f}s")


def test_criterion_2_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(4, 30))
        pts = torch.from_numpy(rng.normal(scale=0.3, size=(n, 3)))
        pred = torch.from_numpy(np.concatenate([
            rng.normal(scale=0.2, size=3), rng.normal(size=4)])[None])
        pred.requires_grad_(True)
        gt = torch.from_numpy(random_pose(rng).as_vector()[None])
        loss = loss_LA(pred, gt, pts)
        loss.backward()
        step = 1e-5
        for k in range(7):
            d = torch.zeros_like(pred)
            d[0, k] = step
            with torch.no_grad():
                num = (loss_LA(pred + d, gt, pts) -
                       loss_LA(pred - d, gt, pts)) / (2 * step)
            denom = max(abs(num.item()), 1e-8)
            worst = max(worst, abs(pred.grad[0, k].item() - num.item()) / denom)
    elapsed = time.perf_counter() - t0
    announce(capsys, "criterion 2 gradient fidelity",
             worst < 1e-4 and elapsed < 30.0,
             f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_3_oracle_bound(capsys, tmp_path):
    # untrained (seeded random) estimators over a fresh dataset: the bound
    # must hold as an identity regardless of estimator quality
    cfg = SceneConfig(seed=77)
    manifests = generate_dataset(cfg, 2, 15, tmp_path / "d")
    assets = SceneAssets.build(cfg)
    torch.manual_seed(0)
    bundle = EstimatorBundle(stats=manifests[0].tactile_stats,
                             object_models={cfg.object_id: assets.model.points})
    report = evaluate(manifests, bundle)
    overall = report["overall"]
    ok = all(overall["oracle"]["mean_add_m2"] <= overall[m]["mean_add_m2"]
             for m in ("tactile", "vision", "fusion"))
    announce(capsys, "criterion 3 oracle bound", ok,
             f"oracle {overall['oracle']['mean_add_m2']:.6f} m^2")


def test_criterion_4_end_to_end(capsys, pipeline):
    summary = json.loads((pipeline["data"] / "summary.json").read_text())
    n_frames = summary["num_sequences"] * summary["frames_per_sequence"]
    occ_hist = summary["occlusion_rate_hist"]
    occluded_share = sum(occ_hist[1:]) / n_frames
    contact_hist = summary["contact_count_hist"]
    low_contact_share = sum(contact_hist[:2]) / n_frames
    overall = pipeline["report"]["overall"]
    selection = pipeline["report"]["selection"]
    sel_pos = overall["selectlstm"]["mean_positional_cm"]
    checks = {
        "dataset >= 4k frames": n_frames >= 4000,
        ">= 30% occluded frames": occluded_share >= 0.30,
        ">= 30% frames with <= 1 contact": low_contact_share >= 0.30,
        "(a) selectlstm <= fusion positional":
            sel_pos <= overall["fusion"]["mean_positional_cm"],
        "(b) within 25% of oracle":
            sel_pos <= 1.25 * overall["oracle"]["mean_positional_cm"],
        "(c) selection accuracy > 45%": selection["accuracy"] > 0.45,
        "runtime < 45 min": pipeline["elapsed"] < PIPELINE_BUDGET_S,
    }
    detail = (f"sel {sel_pos:.3f}cm fusion "
              f"{overall['fusion']['mean_positional_cm']:.3f}cm oracle "
              f"{overall['oracle']['mean_positional_cm']:.3f}cm acc "
              f"{selection['accuracy']:.3f} occ {occluded_share:.2f} "
              f"low-contact {low_contact_share:.2f} "
              f"{pipeline['elapsed'] / 60:.1f}min; "
              + "; ".join(k for k, v in checks.items() if not v))
    announce(capsys, "criterion 4 end-to-end synthetic", all(checks.values()),
             detail)


def test_criterion_5_corruption_robustness(capsys, pipeline):
    out = pipeline["root"] / "exp.json"
    assert cli.main(["experiment", "--data", str(pipeline["data"]),
                     "--estimators", str(pipeline["est"]),
                     "--selector", str(pipeline["sel"]), "--out", str(out),
                     "--severities", "1.0", "--dropout-fingers", "5",
                     "--quiet"]) == 0
    report = json.loads(out.read_text())
    occ = report["occlusion"][-1]
    drop = report["tactile_dropout"][-1]
    best_occ = min(occ["mean_positional_cm"][m]
                   for m in ("tactile", "vision", "fusion"))
    best_drop = min(drop["mean_positional_cm"][m]
                    for m in ("tactile", "vision", "fusion"))
    checks = {
        "tactile share >= 70% under full occlusion":
            occ["selection_share"]["tactile"] >= 0.70,
        "vision share >= 70% under full dropout":
            drop["selection_share"]["vision"] >= 0.70,
        "post-selection <= 1.1x best (occlusion)":
            occ["mean_positional_cm"]["selectlstm"] <= 1.1 * best_occ,
        "post-selection <= 1.1x best (dropout)":
            drop["mean_positional_cm"]["selectlstm"] <= 1.1 * best_drop,
    }
    detail = (f"occ tactile {occ['selection_share']['tactile']:.2f}, drop "
              f"vision {drop['selection_share']['vision']:.2f}; "
              + "; ".join(k for k, v in checks.items() if not v))
    announce(capsys, "criterion 5 corruption robustness", all(checks.values()),
             detail)


def test_criterion_6_degradation_trend(capsys, pipeline):
    out = pipeline["root"] / "mat.json"
    assert cli.main(["matrix", "--data", str(pipeline["data"]),
                     "--estimators", str(pipeline["est"]),
                     "--selector", str(pipeline["sel"]), "--out", str(out),
                     "--quiet"]) == 0
    report = json.loads(out.read_text())

    def occ_mean(method, row):
        vals = [v for v in report["grids"][f"{method}/positional"][row]
                if v is not None]
        return sum(vals) / len(vals)

    def contact_mean(method, col):
        grid = report["grids"][f"{method}/positional"]
        vals = [grid[i][col] for i in range(4) if grid[i][col] is not None]
        return sum(vals) / len(vals)

    vision_low, vision_high = occ_mean("vision", 0), occ_mean("vision", 3)
    tactile_low, tactile_high = contact_mean("tactile", 0), contact_mean("tactile", 3)
    checks = {
        "vision worse at high occlusion": vision_high > vision_low,
        "tactile worse at low contact": tactile_low > tactile_high,
    }
    detail = (f"vision {vision_low * 100:.2f}->{vision_high * 100:.2f}cm, "
              f"tactile {tactile_high * 100:.2f}(4-5)->{tactile_low * 100:.2f}(0-1)cm")
    announce(capsys, "criterion 6 degradation trend", all(checks.values()), detail)


def test_criterion_7_determinism_and_roundtrips(capsys, tmp_path):
    cfg = SceneConfig(seed=88)
    # byte-identical regeneration
    generate_dataset(cfg, 2, 6, tmp_path / "a")
    generate_dataset(cfg, 2, 6, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a")
                   for p in (tmp_path / "a").rglob("*") if p.is_file())
    bytes_ok = all((tmp_path / "a" / rel).read_bytes() ==
                   (tmp_path / "b" / rel).read_bytes() for rel in files)
    # lossless frame round trip
    frames = generate_sequence(cfg, 4, sequence_seed=1)
    manifest = write_sequence(frames, tmp_path / "seq")
    back = read_sequence(tmp_path / "seq")
    frames_ok = all(
        np.array_equal(x.rgb, y.rgb) and np.array_equal(x.depth, y.depth)
        and np.array_equal(x.tactile.electrodes, y.tactile.electrodes)
        and np.array_equal(x.gt_pose.as_vector(), y.gt_pose.as_vector())
        for x, y in zip(frames, back))
    # bit-identical training and lossless checkpoint round trip
    manifests = generate_dataset(cfg, 2, 6, tmp_path / "train")
    assets = SceneAssets.build(cfg)
    models = {cfg.object_id: assets.model.points}
    tc = TrainConfig(lr=1e-3, batch_size=8, epochs=1)
    b1 = train_estimators(manifests, models, tc, seed=2)
    b2 = train_estimators(manifests, models, tc, seed=2)
    train_ok = b1.log == b2.log and all(
        torch.equal(p, q) for p, q in zip(b1.parameters(), b2.parameters()))
    b1.save(tmp_path / "est.pt")
    b3 = EstimatorBundle.load(tmp_path / "est.pt")
    ckpt_ok = all(torch.equal(p, q)
                  for p, q in zip(b1.parameters(), b3.parameters()))
    ok = bytes_ok and frames_ok and train_ok and ckpt_ok
    announce(capsys, "criterion 7 determinism and round trips", ok,
             f"bytes={bytes_ok} frames={frames_ok} train={train_ok} "
             f"checkpoint={ckpt_ok}")


@pytest.mark.skipif("POSEFUSION_FULL_DATASET" not in os.environ,
                    reason="full-scale dataset not available")
def test_criterion_8_full_scale(capsys, pipeline, tmp_path):
    root = os.environ["POSEFUSION_FULL_DATASET"]
    manifests = list_sequences(root)
    _, test_set = split_dataset(manifests, 0.6, seed=0)
    bundle = EstimatorBundle.load(pipeline["est"])
    from posefusion.selector import SelectorCheckpoint
    selector = SelectorCheckpoint.load(pipeline["sel"]).model
    report = evaluate(test_set, bundle, selector)
    wins = 0
    objects = report["per_object"]["selectlstm"].keys()
    for obj in objects:
        ours = report["per_object"]["selectlstm"][obj]
        best = all(ours[m] <= report["per_object"][other][obj][m]
                   for other in ("tactile", "vision", "fusion")
                   for m in ("mean_positional_cm", "mean_angular_rad"))
        wins += int(best)
    ok = wins > len(list(objects)) / 2
    announce(capsys, "criterion 8 full-scale ordinal", ok,
             f"best in {wins}/{len(list(objects))} object rows")
