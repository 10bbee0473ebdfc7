"""On-disk formats for episodes, gaze and control logs, attention maps and images,
plus dataset-level utilities (splits, label filtering, map precomputation).

Episode directory layout::

    manifest.json     format version, intrinsics, frame count, per-frame file
                      references, command and label tables, expert bookkeeping
    poses.txt         header + one line per frame: frame r00..r22 tx ty tz
    gaze.txt          header + one line per frame: frame X Y Z valid
    controls.txt      header + one line per frame: frame steer throttle brake speed
    frames/NNNNNN.ppm binary portable pixmap (P6 RGB / P5 grey, maxval 255)
    maps/NNNNNN.amap  ground-truth fixation maps (optional)
    saliency/NNNNNN.amap  gaze-network maps (optional)

Text logs write floats with ``repr`` so they round-trip bit-exactly.  AMAP files
are ``b"AMAP"``, u32 width, u32 height (little-endian), u8 empty flag, then
float32 row-major values.

A dataset is a directory of episode directories plus ``split.json`` holding
``{"train": [...], "test": [...]}`` episode ids.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .attention import AttentionMap, GazeRecord, MapConfig, frame_attention_map
from .commands import HighLevelCommand, gaze_branch_for
from .geometry import CameraExtrinsics, CameraIntrinsics, WorldPoint
from .synth import LABELS, Episode

log = logging.getLogger(__name__)

FORMAT_NAME = "gazedrive-episode"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
SPLIT_FILE = "split.json"
POSES_HEADER = "frame r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"
GAZE_HEADER = "frame X Y Z valid"
CONTROLS_HEADER = "frame steer throttle brake speed"
AMAP_MAGIC = b"AMAP"
AMAP_HEADER = struct.Struct("<4sIIB")
MAP_DIRS = {"truth": "maps", "predicted": "saliency"}


class DatasetFormatError(ValueError):
    """Malformed or inconsistent file; the message names the file and line or offset."""


class FormatVersionError(DatasetFormatError):
    pass


# --------------------------------------------------------------------------- images


def _ppm_tokens(data: bytes, path, count: int):
    """Read ``count`` whitespace-separated header tokens (``#`` comments allowed).

    Returns the tokens and the offset of the single whitespace byte after the last.
    """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}: truncated header at offset {pos}")
        tokens.append(data[start:pos].decode("ascii", "replace"))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise DatasetFormatError(f"{path}: missing whitespace after header at offset {pos}")
    return tokens, pos + 1


def encode_pnm(image: np.ndarray) -> bytes:
    """(H, W, 3) -> P6 or (H, W) -> P5, values in [0, 1] quantised to 8 bits."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min(initial=0.0) < 0.0 or img.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    H, W = img.shape[:2]
    pixels = np.round(img * 255.0).astype(np.uint8)
    return magic + f"\n{W} {H}\n255\n".encode("ascii") + pixels.tobytes()


def decode_pnm(data: bytes, path="<bytes>") -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    (w, h, maxval), pos = _ppm_tokens(data[2:], path, 3)
    pos += 2
    try:
        W, H, M = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: non-integer header field ({exc})") from None
    if W <= 0 or H <= 0:
        raise DatasetFormatError(f"{path}: bad dimensions {W}x{H}")
    if M != 255:
        raise DatasetFormatError(f"{path}: unsupported maxval {M}")
    channels = 3 if magic == b"P6" else 1
    need = W * H * channels
    body = data[pos:]
    if len(body) != need:
        raise DatasetFormatError(f"{path}: expected {need} pixel bytes at offset {pos}, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape((H, W, 3) if channels == 3 else (H, W))


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def load_image(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes(), path)


# --------------------------------------------------------------------------- attention maps


def encode_map(amap: AttentionMap) -> bytes:
    return AMAP_HEADER.pack(AMAP_MAGIC, amap.width, amap.height, int(amap.empty)) + np.ascontiguousarray(
        amap.values, dtype="<f4"
    ).tobytes()


def decode_map(data: bytes, path="<bytes>") -> AttentionMap:
    if len(data) < AMAP_HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, W, H, empty = AMAP_HEADER.unpack_from(data, 0)
    if magic != AMAP_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if W == 0 or H == 0:
        raise DatasetFormatError(f"{path}: bad dimensions {W}x{H} at offset 4")
    if empty not in (0, 1):
        raise DatasetFormatError(f"{path}: bad empty flag {empty} at offset 12")
    need = AMAP_HEADER.size + 4 * W * H
    if len(data) != need:
        raise DatasetFormatError(f"{path}: expected {need} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=AMAP_HEADER.size).astype(np.float64).reshape(H, W)
    try:
        return AttentionMap(values, empty=bool(empty))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


def save_map(path, amap: AttentionMap) -> None:
    Path(path).write_bytes(encode_map(amap))


def load_map(path) -> AttentionMap:
    return decode_map(Path(path).read_bytes(), path)


# --------------------------------------------------------------------------- text logs


def _fmt(v: float) -> str:
    return repr(float(v))


def _read_table(path, header: str, ncols: int) -> List[List[str]]:
    """Rows of a header-plus-records log; checks column counts and frame numbering."""
    try:
        lines = Path(path).read_text(encoding="ascii").splitlines()
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: missing file") from None
    if not lines or lines[0].split() != header.split():
        raise DatasetFormatError(f"{path}:1: expected header {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != ncols:
            raise DatasetFormatError(f"{path}:{lineno}: expected {ncols} fields, found {len(fields)}")
        rows.append((lineno, fields))
    return rows


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetFormatError(f"{where}: bad number {text!r}") from None
    if not math.isfinite(value):
        raise DatasetFormatError(f"{where}: non-finite number {text!r}")
    return value


def _parse_int(text: str, where: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DatasetFormatError(f"{where}: bad integer {text!r}") from None


def parse_gaze_line(line: str, where: str = "<gaze>") -> GazeRecord:
    """``"frame X Y Z valid"`` -> GazeRecord; ``valid`` is 0 or 1."""
    fields = line.split()
    if len(fields) != 5:
        raise DatasetFormatError(f"{where}: expected 5 fields, found {len(fields)}")
    frame = _parse_int(fields[0], where)
    point = WorldPoint(*(_parse_float(f, where) for f in fields[1:4]))
    if fields[4] not in ("0", "1"):
        raise DatasetFormatError(f"{where}: valid flag must be 0 or 1, got {fields[4]!r}")
    return GazeRecord(frame, point, fields[4] == "1")


def format_gaze_line(rec: GazeRecord) -> str:
    return " ".join([str(int(rec.frame_index)), *(_fmt(v) for v in rec.point), "1" if rec.valid else "0"])


def _check_frame(frame: int, expected: int, where: str) -> None:
    if frame != expected:
        raise DatasetFormatError(f"{where}: expected frame {expected}, found {frame}")


def read_gaze_log(path) -> List[GazeRecord]:
    out = []
    for lineno, fields in _read_table(path, GAZE_HEADER, 5):
        where = f"{path}:{lineno}"
        rec = parse_gaze_line(" ".join(fields), where)
        _check_frame(rec.frame_index, len(out), where)
        out.append(rec)
    return out


def write_gaze_log(path, gaze: Sequence[GazeRecord]) -> None:
    Path(path).write_text("\n".join([GAZE_HEADER, *(format_gaze_line(g) for g in gaze)]) + "\n", encoding="ascii")


def write_controls(path, controls: np.ndarray) -> None:
    lines = [CONTROLS_HEADER]
    lines += [" ".join([str(t), *(_fmt(v) for v in row)]) for t, row in enumerate(np.asarray(controls))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_controls(path) -> np.ndarray:
    rows = []
    for lineno, fields in _read_table(path, CONTROLS_HEADER, 5):
        where = f"{path}:{lineno}"
        _check_frame(_parse_int(fields[0], where), len(rows), where)
        rows.append([_parse_float(f, where) for f in fields[1:]])
    return np.array(rows, dtype=np.float64).reshape(len(rows), 4)


def write_poses(path, extrinsics: Sequence[CameraExtrinsics]) -> None:
    lines = [POSES_HEADER]
    for t, ext in enumerate(extrinsics):
        vals = list(np.asarray(ext.rotation).ravel()) + list(np.asarray(ext.translation).ravel())
        lines.append(" ".join([str(t), *(_fmt(v) for v in vals)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_poses(path) -> List[CameraExtrinsics]:
    out = []
    for lineno, fields in _read_table(path, POSES_HEADER, 13):
        where = f"{path}:{lineno}"
        _check_frame(_parse_int(fields[0], where), len(out), where)
        vals = np.array([_parse_float(f, where) for f in fields[1:]])
        try:
            out.append(CameraExtrinsics(vals[:9].reshape(3, 3), vals[9:]))
        except ValueError as exc:
            raise DatasetFormatError(f"{where}: {exc}") from None
    return out


# --------------------------------------------------------------------------- episodes


def frame_name(t: int, suffix: str) -> str:
    return f"{t:06d}.{suffix}"


def save_episode(path, episode: Episode) -> Path:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    refs = []
    for t, img in enumerate(episode.images):
        ref = f"frames/{frame_name(t, 'ppm')}"
        save_image(root / ref, img)
        refs.append(ref)
    write_poses(root / "poses.txt", episode.extrinsics)
    write_gaze_log(root / "gaze.txt", episode.gaze)
    write_controls(root / "controls.txt", episode.controls)
    intr = episode.intrinsics
    manifest = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "intrinsics": {"f": intr.f, "width": intr.width, "height": intr.height},
        "frame_count": len(episode),
        "framerate": float(episode.framerate),
        "frames": refs,
        "commands": [HighLevelCommand(c).name for c in episode.commands],
        "labels": list(episode.labels),
        "progress": [float(v) for v in episode.progress],
        "target_speed": [float(v) for v in episode.target_speed],
        "relevant": [int(v) for v in episode.relevant],
    }
    # written last: a directory with a manifest is complete
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return root


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        text = mpath.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatasetFormatError(f"{mpath}: missing manifest") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{mpath}: not an episode manifest")
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{mpath}: unsupported format version {version!r} (expected {FORMAT_VERSION})")
    n = manifest.get("frame_count")
    if not isinstance(n, int) or n < 0:
        raise DatasetFormatError(f"{mpath}: bad frame_count {n!r}")
    for key in ("frames", "commands", "labels", "progress", "target_speed", "relevant"):
        if len(manifest.get(key, ())) != n:
            raise DatasetFormatError(f"{mpath}: {key} has {len(manifest.get(key, ()))} entries, frame_count is {n}")
    return manifest


def _count_check(what: str, path, found: int, n: int) -> None:
    if found != n:
        raise DatasetFormatError(f"{path}: {what} has {found} records, manifest frame_count is {n}")


def load_episode(path) -> Episode:
    root = Path(path)
    manifest = read_manifest(root)
    n = manifest["frame_count"]
    mi = manifest["intrinsics"]
    try:
        intr = CameraIntrinsics(float(mi["f"]), int(mi["width"]), int(mi["height"]))
        commands = [HighLevelCommand.parse(c) for c in manifest["commands"]]
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{root / MANIFEST}: {exc}") from None
    labels = list(manifest["labels"])
    unknown = set(labels) - set(LABELS)
    if unknown:
        raise DatasetFormatError(f"{root / MANIFEST}: unknown labels {sorted(unknown)}")
    extrinsics = read_poses(root / "poses.txt")
    _count_check("poses", root / "poses.txt", len(extrinsics), n)
    gaze = read_gaze_log(root / "gaze.txt")
    _count_check("gaze log", root / "gaze.txt", len(gaze), n)
    controls = read_controls(root / "controls.txt")
    _count_check("control log", root / "controls.txt", len(controls), n)
    images = np.zeros((n, intr.height, intr.width, 3))
    for t, ref in enumerate(manifest["frames"]):
        fpath = root / ref
        if not fpath.is_file():
            raise DatasetFormatError(f"{fpath}: referenced frame {t} is missing")
        img = load_image(fpath)
        if img.shape[:2] != (intr.height, intr.width):
            raise DatasetFormatError(f"{fpath}: size {img.shape[1]}x{img.shape[0]} does not match intrinsics")
        images[t] = img if img.ndim == 3 else img[..., None]
    return Episode(
        intr,
        extrinsics,
        images,
        gaze,
        controls,
        commands,
        labels,
        framerate=float(manifest["framerate"]),
        progress=np.array(manifest["progress"], dtype=np.float64),
        target_speed=np.array(manifest["target_speed"], dtype=np.float64),
        relevant=np.array(manifest["relevant"], dtype=np.int64),
    )


def episodes_equal(a: Episode, b: Episode) -> bool:
    """Bitwise equality of every numeric field (NaN equal to NaN)."""

    def same(x, y):
        x, y = np.asarray(x), np.asarray(y)
        return x.shape == y.shape and x.dtype.kind == y.dtype.kind and np.array_equal(x, y, equal_nan=x.dtype.kind == "f")

    return (
        a.intrinsics == b.intrinsics
        and len(a) == len(b)
        and all(ea == eb for ea, eb in zip(a.extrinsics, b.extrinsics))
        and same(a.images, b.images)
        and same([g.frame_index for g in a.gaze], [g.frame_index for g in b.gaze])
        and same([tuple(g.point) for g in a.gaze], [tuple(g.point) for g in b.gaze])
        and [g.valid for g in a.gaze] == [g.valid for g in b.gaze]
        and same(a.controls, b.controls)
        and [int(c) for c in a.commands] == [int(c) for c in b.commands]
        and list(a.labels) == list(b.labels)
        and a.framerate == b.framerate
        and same(a.progress, b.progress)
        and same(a.target_speed, b.target_speed)
        and same(a.relevant, b.relevant)
    )


# --------------------------------------------------------------------------- map directories


def map_dir(episode_path, kind: str = "truth") -> Path:
    try:
        return Path(episode_path) / MAP_DIRS[kind]
    except KeyError:
        raise ValueError(f"unknown map kind {kind!r}; expected one of {sorted(MAP_DIRS)}") from None


def write_episode_maps(episode_path, maps: Sequence[AttentionMap], kind: str = "truth") -> Path:
    out = map_dir(episode_path, kind)
    out.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(maps):
        save_map(out / frame_name(t, "amap"), m)
    return out


def load_episode_maps(episode_path, kind: str = "truth") -> List[AttentionMap]:
    n = read_manifest(episode_path)["frame_count"]
    d = map_dir(episode_path, kind)
    maps = []
    for t in range(n):
        p = d / frame_name(t, "amap")
        if not p.is_file():
            raise DatasetFormatError(f"{p}: missing {kind} map for frame {t}")
        maps.append(load_map(p))
    return maps


def _ordered_map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def fixation_maps(episode: Episode, cfg: MapConfig = MapConfig(), jobs: int = 1) -> List[AttentionMap]:
    """Ground-truth map for every frame (per-frame work may run on ``jobs`` threads)."""
    return _ordered_map(lambda t: frame_attention_map(episode, t, cfg), range(len(episode)), jobs)


def precompute_maps(dataset, model, kind: str = "predicted") -> Counter:
    """Write one gaze-network map per frame of every episode in ``dataset``.

    The branch is chosen by each frame's recorded command (NoCommand uses the
    Follow branch).  Returns the per-branch frame counts.
    """
    from .model.data import predict_episode_maps

    usage: Counter = Counter()
    for eid in dataset.episode_ids:
        episode = dataset.episode(eid)
        maps = predict_episode_maps(model, episode)
        write_episode_maps(dataset.path(eid), maps, kind)
        usage.update(gaze_branch_for(c).name for c in episode.commands)
    return usage


# --------------------------------------------------------------------------- datasets and splits


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    test: tuple
    filter: str = "all"

    FILTERS = ("all", "driving")

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        if self.filter not in self.FILTERS:
            raise ValueError(f"filter must be one of {self.FILTERS}, got {self.filter!r}")
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"episodes in both train and test: {sorted(overlap)}")

    def to_dict(self):
        return {"train": list(self.train), "test": list(self.test)}


class Dataset:
    """A directory of episode directories (each with a manifest) and an optional split file."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetFormatError(f"{self.root}: not a directory")
        self.episode_ids = sorted(p.name for p in self.root.iterdir() if (p / MANIFEST).is_file())
        if not self.episode_ids:
            raise DatasetFormatError(f"{self.root}: no episodes found")
        self._cache: Dict[str, Episode] = {}

    def path(self, eid: str) -> Path:
        return self.root / eid

    def episode(self, eid: str) -> Episode:
        if eid not in self._cache:
            self._cache[eid] = load_episode(self.path(eid))
        return self._cache[eid]

    def labels(self, eid: str) -> List[str]:
        return list(read_manifest(self.path(eid))["labels"])

    def split(self, filter: str = "all") -> DatasetSplit:
        p = self.root / SPLIT_FILE
        if not p.is_file():
            return DatasetSplit(tuple(self.episode_ids), (), filter)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
            split = DatasetSplit(d["train"], d["test"], filter)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(f"{p}: bad split file ({exc})") from None
        missing = (set(split.train) | set(split.test)) - set(self.episode_ids)
        if missing:
            raise DatasetFormatError(f"{p}: unknown episodes {sorted(missing)}")
        return split


def write_split(root, split: DatasetSplit) -> None:
    (Path(root) / SPLIT_FILE).write_text(json.dumps(split.to_dict(), indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FrameView:
    """Selected ``(episode id, frame index)`` pairs with their labels."""

    keys: tuple
    labels: tuple

    def __len__(self):
        return len(self.keys)

    def by_episode(self) -> Dict[str, List[int]]:
        out: Dict[str, List[int]] = {}
        for eid, t in self.keys:
            out.setdefault(eid, []).append(t)
        return out


def label_filter(labels: Sequence[str], mode: str = "all") -> List[int]:
    """Indices kept by the filter; unknown labels are an error."""
    unknown = set(labels) - set(LABELS)
    if unknown:
        raise ValueError(f"unknown activity labels {sorted(unknown)}")
    if mode == "all":
        return list(range(len(labels)))
    if mode == "driving":
        return [i for i, lab in enumerate(labels) if lab == "driving"]
    raise ValueError(f"unknown filter {mode!r}")


def filter_split(labels_by_episode, split: DatasetSplit, part: str = "train") -> FrameView:
    """Frames of the split's ``part`` episodes that pass its label filter.

    ``labels_by_episode`` is a :class:`Dataset` or a mapping ``id -> labels``.
    """
    if part not in ("train", "test"):
        raise ValueError("part must be 'train' or 'test'")
    get = labels_by_episode.labels if isinstance(labels_by_episode, Dataset) else labels_by_episode.__getitem__
    keys, labels = [], []
    for eid in getattr(split, part):
        labs = list(get(eid))
        for t in label_filter(labs, split.filter):
            keys.append((eid, t))
            labels.append(labs[t])
    return FrameView(tuple(keys), tuple(labels))


def traffic_fraction(labels: Sequence[str]) -> float:
    label_filter(labels)
    return sum(lab == "traffic" for lab in labels) / len(labels) if labels else math.nan
