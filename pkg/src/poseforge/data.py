"""Pose files, image formats, dataset layout and loading.

Pose files follow the TartanAir ground-truth convention: one pose per line,
``tx ty tz qx qy qz qw`` (quaternion scalar-LAST).  Internally quaternions are
scalar-first; this module is the only place the order flips.  Parsed
quaternions are normalised and canonicalised to a non-negative scalar part.

Datasets on disk are a directory of:

    manifest.txt   key=value scene metadata (intrinsics, classes, bounds)
    poses.txt      ground-truth poses, one per image
    images/        view_%04d.ppm  (binary P6)
    labels/        view_%04d.pgm  (binary P5)

Everything is written in dependency-free formats that round-trip exactly at
8-bit image precision and full float precision for poses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .geometry import Camera, Pose, canonicalize_quaternion, normalize_quaternion

log = logging.getLogger("poseforge.data")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    pose: Pose
    labels: np.ndarray | None  # (H, W) integer class ids, or None for pose-only data


@dataclass
class Dataset:
    name: str
    samples: list[Sample]
    n_classes: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __len__(self) -> int:
        return len(self.samples)

    def camera(self, pose: Pose) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)


# -- pose files ---------------------------------------------------------------


def parse_pose_line(line: str, lineno: int) -> Pose:
    tokens = line.split()
    if len(tokens) != 7:
        raise ParseError(f"line {lineno}: expected 7 fields 'tx ty tz qx qy qz qw', got {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: non-numeric field ({exc})") from None
    x = np.array(values[:3])
    qx, qy, qz, qw = values[3:]
    q = np.array([qw, qx, qy, qz])  # scalar-last on disk, scalar-first in memory
    n = np.linalg.norm(q)
    if n < 1e-6:
        raise DataError(f"line {lineno}: quaternion norm {n:.3e} below 1e-6")
    return Pose(x, canonicalize_quaternion(q / n))


def parse_pose_file(path) -> list[Pose]:
    poses = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            poses.append(parse_pose_line(line, lineno))
    return poses


def write_pose_file(path, poses: list[Pose]) -> None:
    with open(path, "w") as fh:
        for p in poses:
            qw, qx, qy, qz = p.q
            fields = list(p.x) + [qx, qy, qz, qw]
            fh.write(" ".join(f"{v:.17g}" for v in fields) + "\n")


# -- netpbm images ------------------------------------------------------------


def write_ppm(path, image: np.ndarray, ascii_format: bool = False) -> None:
    """(3, H, W) floats in [0, 1] to 8-bit PPM (binary P6, or ASCII P3)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected (3, H, W) image, got shape {image.shape}")
    u8 = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1:]
    pixels = u8.transpose(1, 2, 0)
    if ascii_format:
        with open(path, "w") as fh:
            fh.write(f"P3\n{w} {h}\n255\n")
            for row in pixels:
                fh.write(" ".join(str(v) for v in row.reshape(-1)) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode())
            fh.write(pixels.tobytes())


def write_pgm(path, values: np.ndarray, ascii_format: bool = False, maxval: int = 255) -> None:
    """(H, W) integers to 8-bit PGM (binary P5, or ASCII P2)."""
    if values.ndim != 2:
        raise DataError(f"expected (H, W) map, got shape {values.shape}")
    if values.min() < 0 or values.max() > maxval:
        raise DataError(f"values outside [0, {maxval}] cannot be stored in 8-bit PGM")
    u8 = values.astype(np.uint8)
    h, w = values.shape
    if ascii_format:
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n{maxval}\n")
            for row in u8:
                fh.write(" ".join(str(v) for v in row) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            fh.write(u8.tobytes())


def _read_netpbm_header(fh) -> tuple[bytes, int, int, int]:
    def token():
        out = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise DataError("truncated netpbm header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if out:
                    return out
                continue
            out += ch

    magic = token()
    w, h, maxval = int(token()), int(token()), int(token())
    return magic, w, h, maxval


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_netpbm_header(fh)
        if magic != b"P6":
            raise DataError(f"{path}: expected binary PPM (P6), got {magic!r}")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return img.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_netpbm_header(fh)
        if magic != b"P5":
            raise DataError(f"{path}: expected binary PGM (P5), got {magic!r}")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


# -- manifests ----------------------------------------------------------------


def write_manifest(path, entries: dict[str, str]) -> None:
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path} line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


# -- dataset write/load -------------------------------------------------------


def write_dataset(root, scene, samples: list[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    cam = scene.cameras[0]
    entries = {
        "width": str(cam.width),
        "height": str(cam.height),
        "fx": repr(float(cam.fx)),
        "fy": repr(float(cam.fy)),
        "cx": repr(float(cam.cx)),
        "cy": repr(float(cam.cy)),
        "n_classes": str(scene.n_classes),
        "n_views": str(len(samples)),
        "near": repr(float(scene.near)),
        "far": repr(float(scene.far)),
        "seed": str(scene.seed),
    }
    for c, color in enumerate(scene.class_colors):
        entries[f"color_{c}"] = ",".join(repr(float(v)) for v in color)
    write_manifest(root / "manifest.txt", entries)
    write_pose_file(root / "poses.txt", [s.pose for s in samples])
    for i, s in enumerate(samples):
        write_ppm(root / "images" / f"view_{i:04d}.ppm", s.image)
        write_pgm(root / "labels" / f"view_{i:04d}.pgm", s.labels)


def pad_to_multiple(image: np.ndarray, labels: np.ndarray | None, multiple: int = 32):
    """Zero-pad bottom/right so H and W divide ``multiple``; labels pad as 0."""
    h, w = image.shape[1:]
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph == 0 and pw == 0:
        return image, labels
    image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
    if labels is not None:
        labels = np.pad(labels, ((0, ph), (0, pw)))
    return image, labels


def load_dataset(
    root,
    split_ratio: float = 0.1,
    split_seed: int = 0,
    default_near: float | None = None,
    default_far: float | None = None,
) -> tuple[Dataset, Dataset]:
    """Load a dataset directory and split it deterministically.

    The split permutes sample indices with a generator seeded by
    ``split_seed`` and holds out the last ``round(n * split_ratio)`` samples
    for validation, so membership is stable across runs.  Ray bounds come
    from the manifest when present, otherwise from the ``default_near`` and
    ``default_far`` fallbacks.
    """
    root = Path(root)
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DataError(f"{root}: no manifest.txt (intrinsics are mandatory, never defaulted)")
    man = read_manifest(manifest_path)
    for key in ("width", "height", "fx", "fy", "cx", "cy", "n_classes"):
        if key not in man:
            raise DataError(f"{manifest_path}: missing required key {key!r}")
    near = float(man["near"]) if "near" in man else default_near
    far = float(man["far"]) if "far" in man else default_far
    if near is None or far is None:
        raise DataError(f"{manifest_path}: no near/far bounds and no fallback configured")

    poses = parse_pose_file(root / "poses.txt")
    image_paths = sorted((root / "images").glob("view_*.ppm"))
    label_dir = root / "labels"
    label_paths = sorted(label_dir.glob("view_*.pgm")) if label_dir.exists() else []
    if len(image_paths) != len(poses):
        raise DataError(f"{root}: {len(image_paths)} images but {len(poses)} poses")
    if label_paths and len(label_paths) != len(image_paths):
        raise DataError(f"{root}: {len(label_paths)} label maps but {len(image_paths)} images")

    n_classes = int(man["n_classes"])
    samples = []
    for i, (img_path, pose) in enumerate(zip(image_paths, poses)):
        image = read_ppm(img_path)
        labels = read_pgm(label_paths[i]) if label_paths else None
        if labels is not None and labels.max() >= n_classes:
            raise DataError(f"{label_paths[i]}: label {labels.max()} outside [0, {n_classes})")
        image, labels = pad_to_multiple(image, labels)
        samples.append(Sample(image=image, pose=pose, labels=labels))

    n = len(samples)
    n_val = int(round(n * split_ratio))
    if split_ratio > 0 and n_val == 0 and n > 0:
        n_val = 1
    if n_val == 0:
        log.warning("validation split is empty (ratio %s); schedulers will monitor training loss", split_ratio)
    perm = np.random.default_rng(split_seed).permutation(n)
    val_idx = set(perm[n - n_val :].tolist())

    padded_h, padded_w = samples[0].image.shape[1:] if samples else (int(man["height"]), int(man["width"]))
    common = dict(
        n_classes=n_classes,
        fx=float(man["fx"]),
        fy=float(man["fy"]),
        cx=float(man["cx"]),
        cy=float(man["cy"]),
        width=padded_w,
        height=padded_h,
        near=near,
        far=far,
    )
    train = Dataset(name=root.name, samples=[s for i, s in enumerate(samples) if i not in val_idx], **common)
    val = Dataset(name=root.name, samples=[s for i, s in enumerate(samples) if i in val_idx], **common)
    return train, val


def class_colors_from_manifest(man: dict[str, str]) -> np.ndarray:
    n = int(man["n_classes"])
    colors = np.zeros((n, 3))
    for c in range(n):
        key = f"color_{c}"
        if key in man:
            colors[c] = [float(v) for v in man[key].split(",")]
    return colors
