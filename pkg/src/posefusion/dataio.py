"""Dataset records, on-disk sequence format, splits, windows, preprocessing.

Directory layout::

    <dataset>/<sequence_id>/manifest.json
    <dataset>/<sequence_id>/frames/<index>.bin

Each ``.bin`` frame file is self-describing: a 4-byte magic ``PFF1``,
a little-endian uint32 header length, a JSON header listing scalar
fields and array blobs (name, dtype, shape, encoding, offset, nbytes),
then the blobs. Images are PNG-encoded (lossless); everything else is
raw little-endian row-major.
"""

from __future__ import annotations

import copy
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    CorruptDataError,
    EmptyMaskError,
    InvalidArgumentError,
    UndefinedOcclusionError,
    UnsupportedVersionError,
)
from .geometry import Pose
from .handgraph import NUM_FINGERS, TactileFrame, TactileStats

FORMAT_VERSION = 1
FRAME_MAGIC = b"PFF1"
IMAGE_HEIGHT = 480
IMAGE_WIDTH = 640
CROP_SIZE = 128
SCENARIO_TAGS = ("front", "upper", "under", "back", "close", "far", "dim")


@dataclass
class FrameRecord:
    """One time step of the multi-modal recording."""

    rgb: np.ndarray  # (480, 640, 3) uint8
    depth: np.ndarray  # (480, 640) uint16 millimeters, 0 = invalid
    object_mask_visible: np.ndarray  # (480, 640) bool
    object_mask_full: np.ndarray  # (480, 640) bool, silhouette ignoring hand
    palm_pose: Pose
    fingertip_poses: list  # 5 Poses relative to palm
    tactile: TactileFrame
    gt_pose: Pose  # object in camera frame
    occlusion_rate: float
    contact_count: int
    object_id: str
    scenario_tag: str
    timestamp: float

    def validate(self) -> None:
        if self.rgb.shape != (IMAGE_HEIGHT, IMAGE_WIDTH, 3) or self.rgb.dtype != np.uint8:
            raise InvalidArgumentError(f"rgb must be (480, 640, 3) uint8, got "
                                       f"{self.rgb.shape} {self.rgb.dtype}")
        if self.depth.shape != (IMAGE_HEIGHT, IMAGE_WIDTH) or self.depth.dtype != np.uint16:
            raise InvalidArgumentError("depth must be (480, 640) uint16 millimeters")
        for name in ("object_mask_visible", "object_mask_full"):
            m = getattr(self, name)
            if m.shape != (IMAGE_HEIGHT, IMAGE_WIDTH) or m.dtype != bool:
                raise InvalidArgumentError(f"{name} must be (480, 640) bool")
        if len(self.fingertip_poses) != NUM_FINGERS:
            raise InvalidArgumentError("expected 5 fingertip poses")
        if self.contact_count != self.tactile.contact_count:
            raise InvalidArgumentError(
                f"contact_count={self.contact_count} disagrees with tactile flags "
                f"({self.tactile.contact_count})")
        rate = compute_occlusion_rate(self.object_mask_full, self.object_mask_visible)
        if abs(rate - self.occlusion_rate) > 1e-6:
            raise InvalidArgumentError(
                f"stored occlusion_rate {self.occlusion_rate:.8f} disagrees with "
                f"masks ({rate:.8f})")

    def copy(self) -> "FrameRecord":
        return FrameRecord(
            rgb=self.rgb.copy(),
            depth=self.depth.copy(),
            object_mask_visible=self.object_mask_visible.copy(),
            object_mask_full=self.object_mask_full.copy(),
            palm_pose=self.palm_pose,
            fingertip_poses=list(self.fingertip_poses),
            tactile=self.tactile.copy(),
            gt_pose=self.gt_pose,
            occlusion_rate=self.occlusion_rate,
            contact_count=self.contact_count,
            object_id=self.object_id,
            scenario_tag=self.scenario_tag,
            timestamp=self.timestamp,
        )


@dataclass
class SequenceManifest:
    """Index of one stored sequence."""

    sequence_id: str
    object_id: str
    scenario_tag: str
    frame_count: int
    frame_files: list  # relative paths under the sequence dir
    frame_nbytes: list
    frame_offsets: list  # cumulative byte offsets, monotone
    tactile_stats: TactileStats | None = None
    format_version: int = FORMAT_VERSION
    path: Path | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "sequence_id": self.sequence_id,
            "object_id": self.object_id,
            "scenario_tag": self.scenario_tag,
            "frame_count": self.frame_count,
            "frame_files": self.frame_files,
            "frame_nbytes": self.frame_nbytes,
            "frame_offsets": self.frame_offsets,
            "tactile_stats": self.tactile_stats.to_dict() if self.tactile_stats else None,
        }

    @staticmethod
    def from_dict(d: dict, path: Path | None = None) -> "SequenceManifest":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"sequence format version {version} (supported: {FORMAT_VERSION})")
        stats = d.get("tactile_stats")
        return SequenceManifest(
            sequence_id=d["sequence_id"],
            object_id=d["object_id"],
            scenario_tag=d["scenario_tag"],
            frame_count=d["frame_count"],
            frame_files=d["frame_files"],
            frame_nbytes=d["frame_nbytes"],
            frame_offsets=d["frame_offsets"],
            tactile_stats=TactileStats.from_dict(stats) if stats else None,
            format_version=version,
            path=path,
        )


@dataclass
class CorruptionSpec:
    """Description of one injected corruption."""

    kind: str  # "occlusion_block" | "tactile_dropout"
    block: tuple | None = None  # (x, y, w, h) pixels
    fingers: tuple = ()  # affected finger indices 0..4
    frame_range: tuple | None = None  # (start, stop) or None for all
    noise_std: float = 1.0  # fresh baseline noise for dropped fingers
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("occlusion_block", "tactile_dropout"):
            raise InvalidArgumentError(f"unknown corruption kind {self.kind!r}")
        if self.kind == "occlusion_block":
            if self.block is None:
                raise InvalidArgumentError("occlusion_block requires a block")
            x, y, w, h = self.block
            if w < 0 or h < 0:
                raise InvalidArgumentError("block size must be non-negative")
            if x < 0 or y < 0 or x + w > IMAGE_WIDTH or y + h > IMAGE_HEIGHT:
                raise InvalidArgumentError(
                    f"block {self.block} exceeds the 640x480 image bounds")
        if self.kind == "tactile_dropout":
            for f in self.fingers:
                if not 0 <= f < NUM_FINGERS:
                    raise InvalidArgumentError(f"finger index {f} outside 0..4")


# ---------------------------------------------------------------------------
# Frame (de)serialization


def _encode_png(arr: np.ndarray) -> bytes:
    ok, buf = cv2.imencode(".png", arr)
    if not ok:
        raise CorruptDataError("PNG encoding failed")
    return buf.tobytes()


def _frame_blobs(frame: FrameRecord):
    """Yield (name, encoding, dtype, shape, payload_bytes)."""
    mask_vis = frame.object_mask_visible.astype(np.uint8)
    mask_full = frame.object_mask_full.astype(np.uint8)
    poses = np.stack(
        [frame.palm_pose.as_vector()]
        + [p.as_vector() for p in frame.fingertip_poses]
        + [frame.gt_pose.as_vector()],
        axis=0,
    )  # (7, 7): palm, 5 fingertips, gt
    yield ("rgb", "png", "uint8", frame.rgb.shape, _encode_png(frame.rgb))
    yield ("depth", "png", "uint16", frame.depth.shape, _encode_png(frame.depth))
    yield ("mask_visible", "png", "uint8", mask_vis.shape, _encode_png(mask_vis))
    yield ("mask_full", "png", "uint8", mask_full.shape, _encode_png(mask_full))
    yield ("poses", "raw", "<f8", poses.shape, np.ascontiguousarray(poses).tobytes())
    yield ("electrodes", "raw", "<f8", frame.tactile.electrodes.shape,
           np.ascontiguousarray(frame.tactile.electrodes).tobytes())
    yield ("baseline", "raw", "<f8", frame.tactile.baseline.shape,
           np.ascontiguousarray(frame.tactile.baseline).tobytes())
    yield ("contact_flags", "raw", "uint8", (NUM_FINGERS,),
           frame.tactile.contact_flags.astype(np.uint8).tobytes())


def write_frame(frame: FrameRecord, path: Path) -> int:
    """Serialize one frame; returns the file size in bytes."""
    arrays = []
    payloads = []
    offset = 0
    for name, encoding, dtype, shape, payload in _frame_blobs(frame):
        arrays.append({
            "name": name, "encoding": encoding, "dtype": dtype,
            "shape": list(shape), "offset": offset, "nbytes": len(payload),
        })
        payloads.append(payload)
        offset += len(payload)
    header = {
        "version": FORMAT_VERSION,
        "scalars": {
            "occlusion_rate": frame.occlusion_rate,
            "contact_count": frame.contact_count,
            "object_id": frame.object_id,
            "scenario_tag": frame.scenario_tag,
            "timestamp": frame.timestamp,
        },
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(FRAME_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for payload in payloads:
            f.write(payload)
    return 8 + len(header_bytes) + offset


def read_frame(path: Path) -> FrameRecord:
    """Deserialize one frame, verifying integrity."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != FRAME_MAGIC:
        raise CorruptDataError(f"{path}: bad magic or truncated header")
    header_len = struct.unpack("<I", data[4:8])[0]
    if len(data) < 8 + header_len:
        raise CorruptDataError(f"{path}: truncated header")
    header = json.loads(data[8:8 + header_len].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"{path}: frame format version {header.get('version')}")
    blob_start = 8 + header_len
    blobs = {}
    for spec in header["arrays"]:
        lo = blob_start + spec["offset"]
        hi = lo + spec["nbytes"]
        if hi > len(data):
            raise CorruptDataError(f"{path}: truncated blob {spec['name']!r}")
        payload = data[lo:hi]
        if spec["encoding"] == "png":
            arr = cv2.imdecode(np.frombuffer(payload, np.uint8), cv2.IMREAD_UNCHANGED)
            if arr is None:
                raise CorruptDataError(f"{path}: undecodable PNG blob {spec['name']!r}")
        else:
            arr = np.frombuffer(payload, dtype=np.dtype(spec["dtype"]))
            arr = arr.reshape(spec["shape"]).copy()
        blobs[spec["name"]] = arr
    s = header["scalars"]
    poses = blobs["poses"]
    tactile = TactileFrame(
        blobs["electrodes"], blobs["baseline"], blobs["contact_flags"].astype(bool))
    return FrameRecord(
        rgb=np.ascontiguousarray(blobs["rgb"]),
        depth=blobs["depth"].astype(np.uint16),
        object_mask_visible=blobs["mask_visible"].astype(bool),
        object_mask_full=blobs["mask_full"].astype(bool),
        palm_pose=Pose.from_vector(poses[0], normalize=False),
        fingertip_poses=[Pose.from_vector(poses[i], normalize=False) for i in range(1, 6)],
        tactile=tactile,
        gt_pose=Pose.from_vector(poses[6], normalize=False),
        occlusion_rate=s["occlusion_rate"],
        contact_count=s["contact_count"],
        object_id=s["object_id"],
        scenario_tag=s["scenario_tag"],
        timestamp=s["timestamp"],
    )


def write_sequence(frames, path, sequence_id: str | None = None,
                   tactile_stats: TactileStats | None = None,
                   validate: bool = True) -> SequenceManifest:
    """Write a list of FrameRecords as one sequence directory."""
    frames = list(frames)
    if not frames:
        raise InvalidArgumentError("cannot write an empty sequence")
    path = Path(path)
    if sequence_id is None:
        sequence_id = path.name
    (path / "frames").mkdir(parents=True, exist_ok=True)
    files, nbytes, offsets = [], [], []
    offset = 0
    for i, frame in enumerate(frames):
        if validate:
            frame.validate()
        rel = f"frames/{i:05d}.bin"
        size = write_frame(frame, path / rel)
        files.append(rel)
        nbytes.append(size)
        offsets.append(offset)
        offset += size
    manifest = SequenceManifest(
        sequence_id=sequence_id,
        object_id=frames[0].object_id,
        scenario_tag=frames[0].scenario_tag,
        frame_count=len(frames),
        frame_files=files,
        frame_nbytes=nbytes,
        frame_offsets=offsets,
        tactile_stats=tactile_stats,
        path=path,
    )
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    return manifest


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    with open(path / "manifest.json") as f:
        return SequenceManifest.from_dict(json.load(f), path=path)


def read_sequence(path):
    """Read all frames of a sequence directory, verifying the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    frames = []
    for i, (rel, size) in enumerate(zip(manifest.frame_files, manifest.frame_nbytes)):
        fp = path / rel
        try:
            actual = fp.stat().st_size
        except FileNotFoundError as e:
            raise CorruptDataError(f"frame {i}: missing file {fp}") from e
        if actual != size:
            raise CorruptDataError(
                f"frame {i}: size {actual} != manifest size {size} ({fp})")
        try:
            frames.append(read_frame(fp))
        except CorruptDataError as e:
            raise CorruptDataError(f"frame {i}: {e}") from e
    if len(frames) != manifest.frame_count:
        raise CorruptDataError(
            f"manifest frame_count {manifest.frame_count} != {len(frames)} frames")
    return frames


def list_sequences(dataset_root):
    """All sequence manifests under a dataset root, sorted by id."""
    root = Path(dataset_root)
    manifests = [read_manifest(p.parent) for p in sorted(root.glob("*/manifest.json"))]
    if not manifests:
        raise InvalidArgumentError(f"no sequences found under {root}")
    return manifests


# ---------------------------------------------------------------------------
# Splits and windows


def split_dataset(manifests, ratio: float, seed: int):
    """Split sequences into train/test at sequence granularity."""
    manifests = list(manifests)
    if not 0.0 < ratio < 1.0:
        raise InvalidArgumentError(f"ratio must be in (0, 1), got {ratio}")
    if len(manifests) < 2:
        raise InvalidArgumentError("need at least 2 sequences to split")
    order = sorted(manifests, key=lambda m: m.sequence_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(order))
    n_train = int(round(ratio * len(order)))
    clipped = min(max(n_train, 1), len(order) - 1)
    if clipped != n_train:
        warnings.warn(
            f"split ratio {ratio} with {len(order)} sequences rounded to "
            f"{clipped}/{len(order) - clipped}", RuntimeWarning)
    train = [order[i] for i in sorted(perm[:clipped])]
    test = [order[i] for i in sorted(perm[clipped:])]
    return train, test


def selector_holdout(train_manifests, fraction: float = 0.25):
    """Split the training sequences into estimator and selector subsets.

    The selector must be supervised on sequences the estimators never
    trained on: the per-frame best-candidate labels otherwise reflect
    the estimators' overfit behavior instead of how they generalize,
    and the selector learns the wrong policy. Returns
    (estimator_set, selector_set); deterministic given the input order.
    """
    train_manifests = list(train_manifests)
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError(f"fraction must be in (0, 1), got {fraction}")
    if len(train_manifests) < 2:
        raise InvalidArgumentError("need at least 2 training sequences to hold out")
    k = min(max(int(round(fraction * len(train_manifests))), 1),
            len(train_manifests) - 1)
    return train_manifests[:-k], train_manifests[-k:]


def sample_windows(sequence, length: int = 20, stride: int = 1):
    """Consecutive-frame index windows; empty list if the sequence is short."""
    if isinstance(sequence, SequenceManifest):
        n = sequence.frame_count
    elif isinstance(sequence, int):
        n = sequence
    else:
        n = len(sequence)
    if length < 1 or stride < 1:
        raise InvalidArgumentError("length and stride must be positive")
    if n < length:
        return []
    return [range(s, s + length) for s in range(0, n - length + 1, stride)]


# ---------------------------------------------------------------------------
# Vision preprocessing and occlusion annotation


def crop_and_resize(frame: FrameRecord, margin: float = 0.1) -> np.ndarray:
    """Tight mask crop, expanded by ``margin``, resampled to 128x128x4.

    Channels: RGB scaled to [0, 1] and depth in meters (invalid -> 0).
    """
    ys, xs = np.nonzero(frame.object_mask_visible)
    if ys.size == 0:
        raise EmptyMaskError("visible object mask is empty")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    my = int(round((y1 - y0) * margin))
    mx = int(round((x1 - x0) * margin))
    y0 = max(0, y0 - my)
    y1 = min(IMAGE_HEIGHT, y1 + my)
    x0 = max(0, x0 - mx)
    x1 = min(IMAGE_WIDTH, x1 + mx)
    rgb = frame.rgb[y0:y1, x0:x1].astype(np.float32) / 255.0
    depth = frame.depth[y0:y1, x0:x1].astype(np.float32) / 1000.0
    rgb = cv2.resize(rgb, (CROP_SIZE, CROP_SIZE), interpolation=cv2.INTER_LINEAR)
    depth = cv2.resize(depth, (CROP_SIZE, CROP_SIZE), interpolation=cv2.INTER_LINEAR)
    return np.dstack([rgb, depth]).astype(np.float32)


def zero_crop() -> np.ndarray:
    """The all-zero crop fed to the vision branch when the mask is empty."""
    return np.zeros((CROP_SIZE, CROP_SIZE, 4), dtype=np.float32)


def compute_occlusion_rate(mask_full: np.ndarray, mask_visible: np.ndarray) -> float:
    """1 − |visible ∩ full| / |full|, in [0, 1]."""
    full = np.asarray(mask_full, dtype=bool)
    visible = np.asarray(mask_visible, dtype=bool) & full
    total = int(np.sum(full))
    if total == 0:
        raise UndefinedOcclusionError("full object mask is empty")
    return 1.0 - float(np.sum(visible)) / total


# ---------------------------------------------------------------------------
# Corruption injectors (§ robustness experiments)


def inject_occlusion(frame: FrameRecord, spec: CorruptionSpec) -> FrameRecord:
    """White pixel block: RGB white, depth invalid, visible mask cleared."""
    if spec.kind != "occlusion_block":
        raise InvalidArgumentError(f"expected occlusion_block spec, got {spec.kind!r}")
    out = frame.copy()
    x, y, w, h = spec.block
    if w == 0 or h == 0:
        return out
    out.rgb[y:y + h, x:x + w] = 255
    out.depth[y:y + h, x:x + w] = 0
    out.object_mask_visible[y:y + h, x:x + w] = False
    out.occlusion_rate = compute_occlusion_rate(
        out.object_mask_full, out.object_mask_visible)
    return out


def inject_tactile_dropout(frame: FrameRecord, spec: CorruptionSpec) -> FrameRecord:
    """Reset affected fingers to baseline + fresh noise and clear their flags."""
    if spec.kind != "tactile_dropout":
        raise InvalidArgumentError(f"expected tactile_dropout spec, got {spec.kind!r}")
    out = frame.copy()
    rng = np.random.default_rng((spec.seed, int(frame.timestamp * 1e6) & 0xFFFFFFFF))
    for f in spec.fingers:
        noise = rng.normal(scale=spec.noise_std, size=out.tactile.baseline[f].shape)
        out.tactile.electrodes[f] = out.tactile.baseline[f] + noise
        out.tactile.contact_flags[f] = False
    out.contact_count = out.tactile.contact_count
    return out


def convert_objectinhand(source_dir, out_dir) -> None:
    """Converter stub for the published real-hand recording release.

    Maps the external release (ROS-exported RGB-D, BioTac electrode CSVs,
    TF poses, annotation masks) into this package's sequence layout.
    Requires the release files locally; not implemented in this build.
    """
    raise NotImplementedError(
        "ObjectInHand conversion requires the published release; "
        "see the README for the expected sequence layout to target")


def apply_corruption(frames, spec: CorruptionSpec):
    """Apply a spec to the frames in its frame_range; others are copied."""
    start, stop = spec.frame_range if spec.frame_range else (0, len(frames))
    injector = inject_occlusion if spec.kind == "occlusion_block" else inject_tactile_dropout
    out = []
    for i, frame in enumerate(frames):
        out.append(injector(frame, spec) if start <= i < stop else frame.copy())
    return out
