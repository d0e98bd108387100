"""Skeleton sequences: NTU ``.skeleton`` I/O, temporal resampling, normalization,
synthetic motion generation and the on-disk dataset cache."""

from __future__ import annotations

import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, TextIO, Union

import numpy as np

from . import container
from .graph import TOPOLOGIES, TORSO

NTU_JOINTS = 25
DEFAULT_T = 64

# NTU-60 / NTU-120 cross-subject training performers
NTU60_TRAIN_SUBJECTS = frozenset([1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38])
NTU120_TRAIN_SUBJECTS = NTU60_TRAIN_SUBJECTS | frozenset(
    [45, 46, 47, 49, 50, 52, 53, 54, 55, 56, 57, 58, 59, 70, 74, 78, 80, 81, 82, 83, 84, 85, 86,
     89, 91, 92, 93, 94, 95, 97, 98, 100, 103]
)
NTU_TRAIN_CAMERAS = frozenset([2, 3])

SPLIT_KINDS = ("cross-subject", "cross-view", "cross-setup", "synthetic")


class SkeletonParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        where = ""
        if source:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip())
        self.line = line
        self.source = source


@dataclass(frozen=True, eq=False)
class SkeletonSequence:
    """A (3, m, t) array of joint coordinates with optional label and capture metadata."""

    coords: np.ndarray
    label: Optional[int] = None
    subject: Optional[int] = None
    view: Optional[int] = None
    setup: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.coords)
        if c.ndim != 3 or c.shape[0] != 3:
            raise ValueError(f"coords must be (3, m, t), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coords contain non-finite values")

    @property
    def m(self) -> int:
        return self.coords.shape[1]

    @property
    def t(self) -> int:
        return self.coords.shape[2]


@dataclass(frozen=True)
class DatasetSplit:
    train: List[SkeletonSequence]
    test: List[SkeletonSequence]
    kind: str = "synthetic"
    topology: str = "ntu25"

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"unknown split kind {self.kind!r}")
        if {id(s) for s in self.train} & {id(s) for s in self.test}:
            raise ValueError("train and test share sequences")

    def arrays(self, part: str):
        seqs = self.train if part == "train" else self.test
        x = np.stack([s.coords for s in seqs]) if seqs else np.zeros((0, 3, 0, 0))
        y = np.array([-1 if s.label is None else s.label for s in seqs], dtype=np.int64)
        return x, y

    def manifest(self) -> dict:
        def counts(seqs):
            out = {}
            for s in seqs:
                key = str(s.label)
                out[key] = out.get(key, 0) + 1
            return dict(sorted(out.items()))

        return {
            "kind": self.kind,
            "topology": self.topology,
            "train": len(self.train),
            "test": len(self.test),
            "train_per_class": counts(self.train),
            "test_per_class": counts(self.test),
        }


# ---------------------------------------------------------------------------
# NTU .skeleton text format


class _Lines:
    def __init__(self, stream: TextIO, source):
        self._it = iter(stream)
        self.lineno = 0
        self.source = source

    def fields(self, what: str) -> List[str]:
        for raw in self._it:
            self.lineno += 1
            parts = raw.split()
            if parts:
                return parts
        raise SkeletonParseError(f"truncated file: expected {what}", self.lineno + 1, self.source)

    def integer(self, what: str) -> int:
        parts = self.fields(what)
        try:
            return int(parts[0])
        except ValueError:
            raise SkeletonParseError(f"expected integer {what}, got {parts[0]!r}", self.lineno, self.source) from None


def parse_ntu_skeleton(stream: Union[str, TextIO], source: Optional[str] = None) -> List[SkeletonSequence]:
    """Parse NTU RGB+D ``.skeleton`` text into one sequence per tracked body.

    Bodies are keyed by their tracking id in order of first appearance. Frames
    in which a body is absent are zero-filled and listed under
    ``meta["missing_frames"]``; all-zero joints are flagged in
    ``meta["zero_joints"]`` (count) and kept as-is.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = _Lines(stream, source)
    n_frames = lines.integer("frame count")
    if n_frames <= 0:
        raise SkeletonParseError(f"sequence has {n_frames} frames", lines.lineno, source)
    bodies: dict = {}
    for f in range(n_frames):
        n_bodies = lines.integer(f"body count for frame {f}")
        for _ in range(n_bodies):
            info = lines.fields("body info line")
            body_id = info[0]
            n_joints = lines.integer("joint count")
            if n_joints != NTU_JOINTS:
                raise SkeletonParseError(f"joint count {n_joints} != {NTU_JOINTS}", lines.lineno, source)
            frame = np.empty((3, NTU_JOINTS))
            for j in range(NTU_JOINTS):
                parts = lines.fields(f"joint {j}")
                if len(parts) < 3:
                    raise SkeletonParseError("joint line has fewer than 3 fields", lines.lineno, source)
                try:
                    frame[:, j] = [float(v) for v in parts[:3]]
                except ValueError:
                    raise SkeletonParseError(f"unparsable coordinate in {parts[:3]}", lines.lineno, source) from None
            if not np.all(np.isfinite(frame)):
                raise SkeletonParseError("non-finite coordinate", lines.lineno, source)
            bodies.setdefault(body_id, {})[f] = frame
    meta_from_name = ntu_name_metadata(source) if source else {}
    out = []
    for body_id, frames in bodies.items():
        coords = np.zeros((3, NTU_JOINTS, n_frames))
        for f, fr in frames.items():
            coords[:, :, f] = fr
        missing = [f for f in range(n_frames) if f not in frames]
        zero_joints = int(np.sum(np.all(coords == 0, axis=0)))
        out.append(
            SkeletonSequence(
                coords,
                label=meta_from_name.get("label"),
                subject=meta_from_name.get("subject"),
                view=meta_from_name.get("view"),
                setup=meta_from_name.get("setup"),
                meta={"body_id": body_id, "missing_frames": missing, "zero_joints": zero_joints},
            )
        )
    return out


def write_ntu_skeleton(seqs: Sequence[SkeletonSequence]) -> str:
    """Serialize sequences (one body each, equal t) to ``.skeleton`` text.

    Only x, y, z are meaningful; the remaining per-joint and per-body fields
    are written as zeros.  Coordinates use ``repr`` so parsing is exact.
    """
    if not seqs:
        raise ValueError("nothing to write")
    t = seqs[0].t
    if any(s.t != t or s.m != NTU_JOINTS for s in seqs):
        raise ValueError("all sequences must share t and have 25 joints")
    rows = [str(t)]
    for f in range(t):
        present = [(i, s) for i, s in enumerate(seqs) if f not in s.meta.get("missing_frames", ())]
        rows.append(str(len(present)))
        for i, s in present:
            body_id = s.meta.get("body_id", str(i))
            rows.append(f"{body_id} 0 0 0 0 0 0 0 0 2")
            rows.append(str(NTU_JOINTS))
            for j in range(NTU_JOINTS):
                x, y, z = s.coords[:, j, f]
                rows.append(f"{float(x)!r} {float(y)!r} {float(z)!r} 0 0 0 0 0 0 0 0 2")
    return "\n".join(rows) + "\n"


_NTU_NAME = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


def ntu_name_metadata(name) -> dict:
    """Setup, camera, performer and 0-based action label from an NTU file name."""
    m = _NTU_NAME.search(Path(str(name)).name)
    if not m:
        return {}
    s, c, p, _, a = (int(g) for g in m.groups())
    return {"setup": s, "view": c, "subject": p, "label": a - 1}


def load_ntu_directory(path, t_fixed: int = DEFAULT_T, kind: str = "cross-subject", two_body: bool = False,
                       root: int = 0, torso: int = 20) -> DatasetSplit:
    """Read every ``*.skeleton`` under ``path`` into a normalized, resampled split."""
    files = sorted(Path(path).glob("*.skeleton"))
    if not files:
        raise SkeletonParseError(f"no .skeleton files under {path}")
    seqs = []
    for fp in files:
        bodies = parse_ntu_skeleton(fp.read_text(), source=str(fp))
        seq = merge_bodies(bodies) if two_body else bodies[0]
        seq = normalize(resample_temporal(seq, t_fixed), root=root, torso=torso)
        seqs.append(seq)
    return ntu_split(seqs, kind)


def merge_bodies(bodies: Sequence[SkeletonSequence]) -> SkeletonSequence:
    """Concatenate the first two bodies along the joint axis (m -> 2m); pads with zeros."""
    first = bodies[0]
    second = bodies[1].coords if len(bodies) > 1 else np.zeros_like(first.coords)
    return replace(first, coords=np.concatenate([first.coords, second], axis=1),
                   meta={**first.meta, "second_body_missing": len(bodies) < 2})


def ntu_split(seqs: Sequence[SkeletonSequence], kind: str) -> DatasetSplit:
    if kind == "cross-subject":
        big = any((s.subject or 0) > 40 for s in seqs)
        subjects = NTU120_TRAIN_SUBJECTS if big else NTU60_TRAIN_SUBJECTS
        is_train = [s.subject in subjects for s in seqs]
    elif kind == "cross-view":
        is_train = [s.view in NTU_TRAIN_CAMERAS for s in seqs]
    elif kind == "cross-setup":
        is_train = [s.setup is not None and s.setup % 2 == 0 for s in seqs]
    else:
        raise ValueError(f"NTU split kind must be cross-subject/view/setup, got {kind!r}")
    train = [s for s, tr in zip(seqs, is_train) if tr]
    test = [s for s, tr in zip(seqs, is_train) if not tr]
    return DatasetSplit(train, test, kind=kind, topology="ntu25")


# ---------------------------------------------------------------------------
# preprocessing


def resample_temporal(seq: SkeletonSequence, t_fixed: int = DEFAULT_T) -> SkeletonSequence:
    """Linearly interpolate onto ``t_fixed`` evenly spaced frames; endpoints are kept exactly."""
    if t_fixed < 2:
        raise ValueError(f"t_fixed must be >= 2, got {t_fixed}")
    x = seq.coords
    t = x.shape[2]
    if t == t_fixed:
        return replace(seq, coords=x.copy())
    if t == 1:
        return replace(seq, coords=np.repeat(x, t_fixed, axis=2))
    pos = np.linspace(0.0, t - 1, t_fixed)
    lo = np.minimum(np.floor(pos).astype(int), t - 2)
    frac = pos - lo
    out = x[:, :, lo] * (1.0 - frac) + x[:, :, lo + 1] * frac
    out[:, :, 0] = x[:, :, 0]
    out[:, :, -1] = x[:, :, -1]
    return replace(seq, coords=out)


def normalize(seq: SkeletonSequence, root: int = 0, torso: int = 20) -> SkeletonSequence:
    """Center the root joint at the origin in every frame and divide by the mean torso length."""
    x = seq.coords
    centered = x - x[:, root : root + 1, :]
    length = np.linalg.norm(centered[:, torso, :], axis=0).mean()
    if not length > 0:
        raise ValueError("torso length is zero; cannot normalize")
    return replace(seq, coords=centered / length)


# ---------------------------------------------------------------------------
# synthetic benchmark

TOY9_REST = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.8, 0.05],
        [0.3, 0.4, 0.05],
        [0.55, 0.25, 0.15],
        [-0.3, 0.4, 0.05],
        [-0.55, 0.25, 0.15],
        [0.15, -0.8, 0.0],
        [-0.15, -0.8, 0.0],
    ]
).T  # (3, 9)


def rest_pose(topology: str) -> np.ndarray:
    """A (3, m) neutral pose: the stick figure for ``toy9``, otherwise a seeded tree layout."""
    if topology == "toy9":
        return TOY9_REST.copy()
    m, edges = TOPOLOGIES[topology]
    rng = np.random.default_rng(12345)
    adj = {i: [] for i in range(m)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    pose = np.zeros((3, m))
    seen, frontier = {0}, [0]
    while frontier:
        node = frontier.pop(0)
        for nb in sorted(adj[node]):
            if nb not in seen:
                step = rng.normal(size=3)
                pose[:, nb] = pose[:, node] + 0.25 * step / np.linalg.norm(step)
                seen.add(nb)
                frontier.append(nb)
    return pose


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    per_class: int = 50
    topology: str = "toy9"
    t: int = 32
    noise: float = 0.0
    seed: int = 0
    train_fraction: float = 0.7


def _class_programs(cfg: SynthConfig, m: int, rng: np.random.Generator):
    programs = []
    for c in range(cfg.classes):
        active = rng.random(m) < 0.6
        active[0] = False
        if not active.any():
            active[1 + c % (m - 1)] = True
        amp = np.where(active, rng.uniform(0.15, 0.4, size=m), 0.0)
        dirs = rng.normal(size=(3, m))
        dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
        programs.append(
            {
                "freq": 1.0 + (c % 4) + rng.uniform(0.0, 0.5),
                "joint_freq": rng.integers(1, 3, size=m).astype(float),
                "phase": rng.uniform(0.0, 2 * np.pi, size=m),
                "amp": amp,
                "dirs": dirs,
            }
        )
    return programs


def synth_dataset(cfg: SynthConfig = SynthConfig()) -> DatasetSplit:
    """Labelled oscillatory motions, one trajectory program per class.

    Each class animates a random subset of joints with its own frequencies,
    phases and directions. Each sequence jitters amplitude, phase and tempo,
    adds a global offset (removed again by normalization) and finally
    Gaussian noise of standard deviation ``cfg.noise``. Splits are stratified
    per class and fully determined by ``cfg.seed``.
    """
    if cfg.classes < 2:
        raise ValueError("need at least 2 classes")
    m = TOPOLOGIES[cfg.topology][0]
    root, torso = TORSO.get(cfg.topology, (0, 1))
    class_rng = np.random.default_rng([cfg.seed, 0])
    sample_rng = np.random.default_rng([cfg.seed, 1])
    split_rng = np.random.default_rng([cfg.seed, 2])
    programs = _class_programs(cfg, m, class_rng)
    base = rest_pose(cfg.topology)
    s = np.arange(cfg.t) / cfg.t
    train, test = [], []
    for c, prog in enumerate(programs):
        seqs = []
        for _ in range(cfg.per_class):
            amp = prog["amp"] * sample_rng.uniform(0.85, 1.15)
            shift = sample_rng.uniform(-0.25, 0.25)
            tempo = sample_rng.uniform(0.95, 1.05)
            offset = sample_rng.normal(scale=0.5, size=(3, 1, 1))
            arg = 2 * np.pi * prog["freq"] * tempo * prog["joint_freq"][:, None] * s[None, :]
            wave = np.sin(arg + prog["phase"][:, None] + shift)  # (m, t)
            coords = base[:, :, None] + prog["dirs"][:, :, None] * (amp[:, None] * wave)[None]
            seq = normalize(SkeletonSequence(coords + offset, label=c), root=root, torso=torso)
            if cfg.noise > 0:
                seq = replace(seq, coords=seq.coords + sample_rng.normal(scale=cfg.noise, size=seq.coords.shape))
            seqs.append(seq)
        order = split_rng.permutation(cfg.per_class)
        n_train = int(round(cfg.train_fraction * cfg.per_class))
        train.extend(seqs[i] for i in sorted(order[:n_train]))
        test.extend(seqs[i] for i in sorted(order[n_train:]))
    return DatasetSplit(train, test, kind="synthetic", topology=cfg.topology)


# ---------------------------------------------------------------------------
# dataset cache

CACHE_MAGIC = b"SKAEDATA"


def dumps_split(split: DatasetSplit, dtype: str = "<f8") -> bytes:
    entries, arrays = [], []
    for part, seqs in (("train", split.train), ("test", split.test)):
        for s in seqs:
            entries.append(
                {"split": part, "label": s.label, "subject": s.subject, "view": s.view, "setup": s.setup,
                 "meta": s.meta}
            )
            arrays.append(s.coords)
    labels = sorted({e["label"] for e in entries if e["label"] is not None})
    header = {"kind": split.kind, "topology": split.topology, "entries": entries, "labels": labels}
    return container.pack(CACHE_MAGIC, header, arrays, dtype)


def loads_split(data: bytes) -> DatasetSplit:
    header, arrays = container.unpack(data, CACHE_MAGIC)
    train, test = [], []
    for e, a in zip(header["entries"], arrays):
        seq = SkeletonSequence(a.astype(np.float64), label=e["label"], subject=e["subject"], view=e["view"],
                               setup=e["setup"], meta=e["meta"])
        (train if e["split"] == "train" else test).append(seq)
    return DatasetSplit(train, test, kind=header["kind"], topology=header["topology"])


def save_split(path, split: DatasetSplit, dtype: str = "<f8") -> None:
    Path(path).write_bytes(dumps_split(split, dtype))


def load_split(path) -> DatasetSplit:
    return loads_split(Path(path).read_bytes())
