"""Skeleton ingestion: NTU text parsing, synthetic motions, modalities, batching."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .tensor import InvalidInputError, load_tensor, save_tensor, tensor_to_bytes


class ParseError(ValueError):
    """Malformed skeleton file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(ValueError):
    """Structurally valid file with unsupported contents."""


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------

# Kinect-v2 joint tree, (child, parent) pairs, 0-based, rooted at the spine
# base (joint 0).
_NTU25_EDGES = [
    (1, 0), (20, 1), (2, 20), (3, 2),
    (4, 20), (5, 4), (6, 5), (7, 6), (22, 7), (21, 22),
    (8, 20), (9, 8), (10, 9), (11, 10), (24, 11), (23, 24),
    (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18),
]

# Kinect-v1 20-joint tree, rooted at the hip center.
_UCLA20_EDGES = [
    (1, 0), (2, 1), (3, 2),
    (4, 2), (5, 4), (6, 5), (7, 6),
    (8, 2), (9, 8), (10, 9), (11, 10),
    (12, 0), (13, 12), (14, 13), (15, 14),
    (16, 0), (17, 16), (18, 17), (19, 18),
]


@dataclass(frozen=True)
class SkeletonTopology:
    """Spanning tree over the joints as (child, parent) pairs."""

    edges: tuple[tuple[int, int], ...]
    root: int
    num_joints: int
    name: str = "custom"

    def __post_init__(self):
        parents = self.parents()
        seen = {self.root}
        # every non-root joint must have exactly one parent and the edges
        # must reach all joints (tree property)
        children = [c for c, _ in self.edges]
        if len(set(children)) != len(children):
            raise InvalidInputError("topology has a joint with two parents")
        if len(self.edges) != self.num_joints - 1:
            raise InvalidInputError(
                f"{len(self.edges)} edges cannot span {self.num_joints} joints")
        frontier = [self.root]
        while frontier:
            p = frontier.pop()
            for c, q in self.edges:
                if q == p and c not in seen:
                    seen.add(c)
                    frontier.append(c)
        if len(seen) != self.num_joints:
            raise InvalidInputError("topology edges do not form a spanning tree")
        del parents

    def parents(self) -> np.ndarray:
        par = np.full(self.num_joints, -1, dtype=np.int64)
        for child, parent in self.edges:
            par[child] = parent
        return par

    @classmethod
    def ntu25(cls) -> "SkeletonTopology":
        return cls(tuple(_NTU25_EDGES), root=0, num_joints=25, name="ntu25")

    @classmethod
    def ucla20(cls) -> "SkeletonTopology":
        return cls(tuple(_UCLA20_EDGES), root=0, num_joints=20, name="ucla20")

    @classmethod
    def for_joint_count(cls, v: int) -> "SkeletonTopology":
        if v == 25:
            return cls.ntu25()
        if v == 20:
            return cls.ucla20()
        raise InvalidInputError(f"no built-in topology for V={v} joints")


# ---------------------------------------------------------------------------
# Sequences and modalities
# ---------------------------------------------------------------------------

@dataclass
class SkeletonSequence:
    """Raw 3D joint sequence, joints[3, T, V] in meters."""

    joints: np.ndarray
    label: Optional[int] = None
    subject: Optional[int] = None
    camera: Optional[int] = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float32)
        if self.joints.ndim != 3 or self.joints.shape[0] != 3:
            raise InvalidInputError(
                f"joints must have shape [3, T, V], got {self.joints.shape}")
        if not np.isfinite(self.joints).all():
            raise InvalidInputError("joint coordinates contain NaN/Inf")

    @property
    def num_frames(self) -> int:
        return self.joints.shape[1]

    @property
    def num_joints(self) -> int:
        return self.joints.shape[2]


@dataclass
class ModalityBundle:
    """The four derived streams, each [C, T, V] (or [N, C, T, V] batched)."""

    joint: np.ndarray
    bone: np.ndarray
    joint_motion: np.ndarray
    bone_motion: np.ndarray

    ORDER = ("bone", "joint", "bone_motion", "joint_motion")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"joint": self.joint, "bone": self.bone,
                "joint_motion": self.joint_motion, "bone_motion": self.bone_motion}

    def ordered(self) -> list[np.ndarray]:
        d = self.as_dict()
        return [d[k] for k in self.ORDER]


def derive_modalities(seq: SkeletonSequence, topo: SkeletonTopology) -> ModalityBundle:
    """Bones along the tree, frame differences for the motions.

    bone[:, t, v] = joint[:, t, v] - joint[:, t, parent(v)] with the root
    bone zero; motions are forward differences zero-padded at the final
    frame.
    """
    if seq.num_joints != topo.num_joints:
        raise InvalidInputError(
            f"sequence has {seq.num_joints} joints, topology covers {topo.num_joints}")
    joints = seq.joints
    parents = topo.parents()
    bone = np.zeros_like(joints)
    for v in range(topo.num_joints):
        if parents[v] >= 0:
            bone[:, :, v] = joints[:, :, v] - joints[:, :, parents[v]]
    joint_motion = np.zeros_like(joints)
    joint_motion[:, :-1] = joints[:, 1:] - joints[:, :-1]
    bone_motion = np.zeros_like(bone)
    bone_motion[:, :-1] = bone[:, 1:] - bone[:, :-1]
    return ModalityBundle(joint=joints.copy(), bone=bone,
                          joint_motion=joint_motion, bone_motion=bone_motion)


# ---------------------------------------------------------------------------
# NTU .skeleton text parsing
# ---------------------------------------------------------------------------

def parse_ntu(raw: bytes | str) -> SkeletonSequence:
    """Parse the NTU `.skeleton` text layout; first tracked body only."""
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    lines = text.splitlines()
    pos = 0

    def next_line(what: str) -> str:
        nonlocal pos
        if pos >= len(lines):
            raise ParseError(f"unexpected end of file while reading {what}", pos + 1)
        line = lines[pos]
        pos += 1
        return line

    def read_int(what: str) -> int:
        line = next_line(what)
        try:
            return int(line.split()[0])
        except (ValueError, IndexError):
            raise ParseError(f"expected integer {what}, got {line!r}", pos)

    num_frames = read_int("frame count")
    if num_frames <= 0:
        raise ParseError(f"frame count must be positive, got {num_frames}", pos)
    frames: list[np.ndarray] = []
    for _ in range(num_frames):
        num_bodies = read_int("body count")
        frame_joints = None
        for body in range(num_bodies):
            next_line("body info")
            num_joints = read_int("joint count")
            if num_joints != 25:
                raise FormatError(
                    f"expected 25 joints per body, file declares {num_joints}")
            coords = np.empty((25, 3), dtype=np.float32)
            for j in range(num_joints):
                line = next_line("joint coordinates")
                parts = line.split()
                if len(parts) < 3:
                    raise ParseError(f"joint line has {len(parts)} fields, need >= 3", pos)
                try:
                    coords[j] = [float(parts[0]), float(parts[1]), float(parts[2])]
                except ValueError:
                    raise ParseError(f"non-numeric joint coordinates: {line!r}", pos)
            if body == 0:
                frame_joints = coords
        if frame_joints is not None:
            frames.append(frame_joints)
    if not frames:
        raise ParseError("no frames with a tracked body", pos)
    stackedTV = np.stack(frames, axis=0)  # [T, 25, 3]
    return SkeletonSequence(joints=stackedTV.transpose(2, 0, 1))


def label_from_filename(name: str) -> Optional[int]:
    """NTU convention: `A###` in the stem is the 1-based action class."""
    stem = os.path.basename(name)
    idx = stem.find("A")
    while idx != -1:
        digits = stem[idx + 1:idx + 4]
        if len(digits) == 3 and digits.isdigit():
            return int(digits) - 1
        idx = stem.find("A", idx + 1)
    return None


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _rest_pose(topo: SkeletonTopology) -> np.ndarray:
    """Deterministic spread-out rest pose grown along the tree."""
    pose = np.zeros((3, topo.num_joints), dtype=np.float32)
    parents = topo.parents()
    order = [topo.root]
    while len(order) < topo.num_joints:
        for c in range(topo.num_joints):
            if c not in order and parents[c] in order:
                order.append(c)
    for v in order:
        p = parents[v]
        if p < 0:
            continue
        angle = 2.0 * np.pi * v / topo.num_joints
        offset = np.array([np.cos(angle), np.sin(angle), 0.25 * np.cos(3 * angle)])
        pose[:, v] = pose[:, p] + 0.25 * offset
    return pose


def synthesize(classes: int, samples_per_class: int = 50, num_joints: int = 25,
               frames: int = 48, seed: int = 0, noise: float = 0.03,
               ) -> tuple[list[SkeletonSequence], dict]:
    """Deterministic labeled motions: per-class limb oscillations plus noise.

    Each class moves its own joint subset along its own axis at its own
    frequency, so class-conditional mean trajectories are well separated
    relative to the noise scale.
    """
    if classes < 2:
        raise InvalidInputError(f"need at least 2 classes, got {classes}")
    topo = SkeletonTopology.for_joint_count(num_joints)
    rest = _rest_pose(topo)
    rng = np.random.default_rng(seed)

    class_params = []
    chunk = num_joints / classes
    for c in range(classes):
        # one contiguous joint chunk per class: index ranges follow limb
        # chains on the built-in topologies, so bones/motions stay coherent
        moving = list(range(int(round(c * chunk)), int(round((c + 1) * chunk))))
        class_params.append({
            "frequency": float(1.0 + c),
            "axis": int(c % 3),
            "amplitude": 0.5,
            "moving_joints": moving,
        })

    sequences: list[SkeletonSequence] = []
    t_grid = np.arange(frames, dtype=np.float32) / frames
    for c in range(classes):
        p = class_params[c]
        mask = np.zeros(num_joints, dtype=np.float32)
        mask[p["moving_joints"]] = 1.0
        joint_phase = 2.0 * np.pi * np.arange(num_joints) / num_joints
        for _ in range(samples_per_class):
            amp = p["amplitude"] * rng.uniform(0.9, 1.1)
            jitter = rng.uniform(0.0, 0.5)
            wave = np.sin(2.0 * np.pi * p["frequency"] * t_grid[:, None]
                          + joint_phase[None, :] + jitter)  # [T, V]
            joints = np.broadcast_to(rest[:, None, :], (3, frames, num_joints)).copy()
            joints[p["axis"]] += amp * (wave * mask[None, :]).astype(np.float32)
            joints += rng.normal(0.0, noise, size=joints.shape).astype(np.float32)
            sequences.append(SkeletonSequence(joints=joints.astype(np.float32), label=c))
    params = {
        "classes": classes,
        "samples_per_class": samples_per_class,
        "num_joints": num_joints,
        "frames": frames,
        "seed": seed,
        "noise": noise,
        "class_params": class_params,
    }
    return sequences, params


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resample_frames(joints: np.ndarray, target_t: int) -> np.ndarray:
    """Linear resampling at positions i*T/target; zero-pads the T=1 edge."""
    if target_t < 1:
        raise InvalidInputError(f"target_T must be >= 1, got {target_t}")
    c, t, v = joints.shape
    if t == target_t:
        return joints.copy()
    if t == 1:
        out = np.zeros((c, target_t, v), dtype=joints.dtype)
        out[:, 0] = joints[:, 0]
        return out
    positions = np.arange(target_t, dtype=np.float64) * (t / target_t)
    lo = np.floor(positions).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    frac = (positions - lo).astype(joints.dtype)
    return (joints[:, lo] * (1.0 - frac)[None, :, None]
            + joints[:, hi] * frac[None, :, None]).astype(joints.dtype)


def center_sequence(joints: np.ndarray, root: int) -> np.ndarray:
    """Subtract the first-frame root joint from every frame."""
    return joints - joints[:, 0:1, root:root + 1]


def preprocess_sequences(sequences: Sequence[SkeletonSequence], target_t: int,
                         topo: Optional[SkeletonTopology] = None,
                         ) -> tuple[ModalityBundle, np.ndarray]:
    """Center, resample, derive modalities, and stack along a batch axis."""
    if not sequences:
        raise InvalidInputError("preprocess requires a non-empty sequence set")
    if topo is None:
        topo = SkeletonTopology.for_joint_count(sequences[0].num_joints)
    stacks = {k: [] for k in ("joint", "bone", "joint_motion", "bone_motion")}
    labels = []
    for seq in sequences:
        joints = center_sequence(seq.joints, topo.root)
        joints = resample_frames(joints, target_t)
        bundle = derive_modalities(SkeletonSequence(joints=joints, label=seq.label), topo)
        for k, arr in bundle.as_dict().items():
            stacks[k].append(arr)
        labels.append(-1 if seq.label is None else seq.label)
    batched = {k: np.stack(v, axis=0) for k, v in stacks.items()}
    for arr in batched.values():
        if not np.isfinite(arr).all():
            raise InvalidInputError("preprocessed batch contains NaN/Inf")
    return ModalityBundle(**batched), np.asarray(labels, dtype=np.int64)


def preprocess_batch(sequences: Sequence[SkeletonSequence], target_t: int,
                     batch_size: int, topo: Optional[SkeletonTopology] = None,
                     ) -> Iterator[tuple[ModalityBundle, np.ndarray]]:
    """Yield fixed-size batches of modality tensors in input order."""
    bundle, labels = preprocess_sequences(sequences, target_t, topo)
    n = labels.shape[0]
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        yield (ModalityBundle(**{k: v[sl] for k, v in bundle.as_dict().items()}),
               labels[sl])


# ---------------------------------------------------------------------------
# Dataset on disk + cache
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(_canonical_json(manifest).encode("utf-8")).hexdigest()


def save_synth_dataset(out_dir: str, sequences: Sequence[SkeletonSequence],
                       params: dict, train_fraction: float = 0.8) -> dict:
    """Write per-sample tensor blobs plus a deterministic manifest."""
    os.makedirs(os.path.join(out_dir, "samples"), exist_ok=True)
    rng = np.random.default_rng(params["seed"])
    by_class: dict[int, list[int]] = {}
    for i, seq in enumerate(sequences):
        by_class.setdefault(int(seq.label), []).append(i)
    split = {}
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        cut = int(round(train_fraction * len(idx)))
        for j, i in enumerate(idx):
            split[int(i)] = "train" if j < cut else "test"
    samples = []
    for i, seq in enumerate(sequences):
        rel = f"samples/s_{i:05d}.sgt"
        save_tensor(os.path.join(out_dir, rel), seq.joints)
        samples.append({"file": rel, "label": int(seq.label), "split": split[i]})
    manifest = {"format_version": 1, "kind": "synth", **params, "samples": samples}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def load_dataset(in_dir: str) -> tuple[list[SkeletonSequence], list[SkeletonSequence], dict]:
    """Load a saved dataset; returns (train split, test split, manifest)."""
    manifest_path = os.path.join(in_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise InvalidInputError(f"no manifest.json under {in_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    train, test = [], []
    for entry in manifest["samples"]:
        joints = load_tensor(os.path.join(in_dir, entry["file"])).data
        seq = SkeletonSequence(joints=joints, label=entry["label"])
        (train if entry["split"] == "train" else test).append(seq)
    return train, test, manifest


def default_cache_dir(explicit: Optional[str] = None) -> Optional[str]:
    return explicit or os.environ.get("SPIKEGRAPH_CACHE")


def _cache_key(raw: bytes, params: dict) -> str:
    h = hashlib.sha256()
    h.update(raw)
    h.update(_canonical_json(params).encode("utf-8"))
    return h.hexdigest()


def load_skeleton_dir(data_dir: str, cache_dir: Optional[str] = None,
                      ) -> list[SkeletonSequence]:
    """Scan a directory of `.skeleton` files; labels decoded from filenames.

    Parsed joint tensors are cached as SGT1 blobs keyed by the file content
    hash when a cache directory is configured.
    """
    cache_dir = default_cache_dir(cache_dir)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    sequences = []
    names = sorted(n for n in os.listdir(data_dir) if n.endswith(".skeleton"))
    for name in names:
        path = os.path.join(data_dir, name)
        with open(path, "rb") as fh:
            raw = fh.read()
        label = label_from_filename(name)
        joints = None
        cache_path = None
        if cache_dir:
            key = _cache_key(raw, {"parser": "ntu", "version": 1})
            cache_path = os.path.join(cache_dir, key + ".sgt")
            if os.path.exists(cache_path):
                joints = load_tensor(cache_path).data
        if joints is None:
            joints = parse_ntu(raw).joints
            if cache_path:
                save_tensor(cache_path, joints)
        sequences.append(SkeletonSequence(joints=joints, label=label))
    return sequences
