"""Environment construction: IDX loading, colored binary environments, linear SEM data."""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagic(IdxError):
    pass


class TruncatedFile(IdxError):
    pass


class CountMismatch(IdxError):
    pass


class ColorScheme(str, Enum):
    B01 = "b01"  # foreground strokes carry the color
    B11 = "b11"  # background carries the color


@dataclass
class EnvMeta:
    p_c: float = 0.0
    scheme: str = "b01"
    label_flip: float = 0.0
    seed: int = 0
    kind: str = "classification"
    sigma_e: float | None = None
    source: str = ""


@dataclass(eq=False)
class EnvironmentData:
    """One environment's arrays.

    ``is_test`` marks held-out data that must never reach a gradient; ``consumed``
    is set by the continual harness once the environment's training phase ends.
    """

    features: np.ndarray
    labels: np.ndarray
    meta: EnvMeta = field(default_factory=EnvMeta)
    color: np.ndarray | None = None
    is_test: bool = False
    consumed: bool = False

    def __post_init__(self):
        if len(self.features) < 1:
            raise ValueError("an environment needs at least one sample")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")

    def __len__(self):
        return len(self.features)

    def check_trainable(self) -> None:
        if self.is_test:
            raise PermissionError("test environment data cannot be used for training")
        if self.consumed:
            raise PermissionError("environment data was consumed by a previous phase")

    def training_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        self.check_trainable()
        return self.features, self.labels


# -- IDX --------------------------------------------------------------------

def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: header shorter than 4 bytes")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise BadMagic(f"{path}: unsupported magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFile(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise TruncatedFile(f"{path}: expected {n} payload bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images scaled to [0, 1] as ``[n, rows, cols]`` and integer labels ``[n]``."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def find_idx_pair(root, train: bool = True) -> tuple[Path, Path] | None:
    """Locate MNIST-style ``*-images-idx3-ubyte[.gz]`` / ``*-labels-idx1-ubyte[.gz]`` files."""
    root = Path(root)
    if not root.is_dir():
        return None
    prefix = "train" if train else "t10k"
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return img, lab
    return None


# -- fallback patterns -------------------------------------------------------

# seven-segment layout: (x0, y0, x1, y1) in a unit box, y growing downwards
_SEGMENTS = np.array([
    (0.0, 0.0, 1.0, 0.0),  # top
    (1.0, 0.0, 1.0, 0.5),  # upper right
    (1.0, 0.5, 1.0, 1.0),  # lower right
    (0.0, 1.0, 1.0, 1.0),  # bottom
    (0.0, 0.5, 0.0, 1.0),  # lower left
    (0.0, 0.0, 0.0, 0.5),  # upper left
    (0.0, 0.5, 1.0, 0.5),  # middle
])
_DIGIT_SEGMENTS = [
    (0, 1, 2, 3, 4, 5), (1, 2), (0, 1, 6, 4, 3), (0, 1, 6, 2, 3), (5, 6, 1, 2),
    (0, 5, 6, 2, 3), (0, 5, 4, 3, 2, 6), (0, 1, 2), (0, 1, 2, 3, 4, 5, 6), (0, 1, 2, 3, 5, 6),
]


def synthetic_pattern_fallback(n: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic digit-like glyphs (seven-segment strokes with jitter) and labels 0-9.

    Classes are balanced: sample ``i`` has label ``i % 10`` before shuffling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size))
    chunk = 2048
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        m = hi - lo
        width = rng.uniform(7.0, 11.0, m)
        height = rng.uniform(13.0, 18.0, m)
        cx = size / 2 + rng.uniform(-3.0, 3.0, m)
        cy = size / 2 + rng.uniform(-2.5, 2.5, m)
        slant = rng.uniform(-0.25, 0.25, m)
        thick = rng.uniform(1.0, 2.0, m)
        dist = np.full((m, size, size), np.inf)
        for s, (x0, y0, x1, y1) in enumerate(_SEGMENTS):
            on = np.array([s in _DIGIT_SEGMENTS[c] for c in labels[lo:hi]])
            # drop a random stroke now and then so glyphs are not perfectly clean
            on &= rng.random(m) > 0.04
            if not on.any():
                continue
            def to_px(u, v):
                py = cy + (v - 0.5) * height
                px = cx + (u - 0.5) * width - slant * (v - 0.5) * height
                return px, py
            ax, ay = to_px(x0, y0)
            bx, by = to_px(x1, y1)
            dx, dy = (bx - ax)[:, None, None], (by - ay)[:, None, None]
            rx, ry = xx[None] - ax[:, None, None], yy[None] - ay[:, None, None]
            t = np.clip((rx * dx + ry * dy) / (dx * dx + dy * dy), 0.0, 1.0)
            d = np.hypot(rx - t * dx, ry - t * dy)
            d[~on] = np.inf
            dist = np.minimum(dist, d)
        ink = np.clip(1.0 - (dist - thick[:, None, None]) / 1.2, 0.0, 1.0)
        ink *= rng.uniform(0.7, 1.0, (m, 1, 1))
        ink += np.clip(rng.normal(0.0, 0.04, ink.shape), 0.0, None) * (ink > 0)
        images[lo:hi] = np.clip(ink, 0.0, 1.0)
    return images, labels


# -- colored environments ----------------------------------------------------

EMNIST_ZERO_LETTERS = set("acegikmoqsuvy")


def binarize_labels(labels: np.ndarray, rule: str = "parity") -> np.ndarray:
    """Preliminary binary label from dataset classes.

    ``parity``: odd class index -> 1 (MNIST/KMNIST digits; for FashionMNIST this is
    exactly the t-shirt/pullover/coat/shirt/bag -> 0 split). ``emnist_letters``: letters
    1..26 with the listed vowel-like set mapped to 0.
    """
    labels = np.asarray(labels)
    if rule == "parity":
        return (labels % 2).astype(np.int64)
    if rule == "emnist_letters":
        letters = np.array([chr(ord("a") + int(k) - 1) for k in labels])
        return np.array([0 if c in EMNIST_ZERO_LETTERS else 1 for c in letters], dtype=np.int64)
    raise ValueError(f"unknown binarize rule {rule!r}")


BACKGROUND_THRESHOLD = 0.1


def colorize(images: np.ndarray, z: np.ndarray, scheme: ColorScheme | str) -> np.ndarray:
    """Two-channel (red, green) images, ``[n, 2, H, W]``; z = 0 -> green, z = 1 -> red."""
    scheme = ColorScheme(scheme)
    n = len(images)
    out = np.zeros((n, 2) + images.shape[1:])
    red = z.astype(bool)
    if scheme is ColorScheme.B01:
        out[red, 0] = images[red]
        out[~red, 1] = images[~red]
    else:
        background = images < BACKGROUND_THRESHOLD
        out[:, 0] = images
        out[:, 1] = images
        chan = np.where(red, 0, 1)
        idx = np.arange(n)
        colored = out[idx, chan]
        colored[background] = 1.0
        out[idx, chan] = colored
    return out


def make_colored_env(images: np.ndarray, classes: np.ndarray, p_label_flip: float, p_c: float,
                     scheme: ColorScheme | str = "b01", rule: str = "parity", n: int | None = None,
                     seed: int = 0) -> EnvironmentData:
    """Colored binary environment whose color agrees with the label with probability ``1 - p_c``."""
    for name, p in (("p_label_flip", p_label_flip), ("p_c", p_c)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    total = len(images)
    n = total if n is None else n
    if n > total:
        raise ValueError(f"requested {n} samples from a base set of {total}")
    idx = rng.choice(total, size=n, replace=False) if n < total else rng.permutation(total)
    base = images[idx]
    y = binarize_labels(classes[idx], rule)
    y = y ^ (rng.random(n) < p_label_flip)
    z = y ^ (rng.random(n) < p_c)
    colored = colorize(base, z, scheme)
    meta = EnvMeta(p_c=p_c, scheme=ColorScheme(scheme).value, label_flip=p_label_flip, seed=seed,
                   kind="classification")
    return EnvironmentData(colored.reshape(n, -1), y.astype(np.int64), meta, color=z.astype(np.int64))


def pc_schedule(n_envs: int, lo: float = 0.1, hi: float = 0.2) -> list[float]:
    """Color-flip probabilities for a training sequence, from ``hi`` down to ``lo``."""
    if n_envs == 1:
        return [lo]
    return [float(v) for v in np.linspace(hi, lo, n_envs)]


# -- structural equation model -------------------------------------------------

def synth_sem(n: int, sigma_e: float, sigma_1: float = 1.0, seed: int = 0, dim: int = 4,
              noise_free_y: bool = False) -> EnvironmentData:
    """Regression environment ``x1 -> y -> x2`` with per-block dimension ``dim``.

    ``y = x1 + eps_y`` with ``eps_y ~ N(0, sigma_e^2)``; ``x2 = y + N(0, 1)``. The
    invariant regressor is the identity on x1 and zero on x2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma_e <= 0 or sigma_1 <= 0:
        raise ValueError("noise scales must be positive")
    rng = np.random.default_rng(seed)
    x1 = rng.normal(0.0, sigma_1, (n, dim))
    eps_y = rng.normal(0.0, sigma_e, (n, dim))
    if noise_free_y:
        eps_y[:] = 0.0
    y = x1 + eps_y
    x2 = y + rng.normal(0.0, 1.0, (n, dim))
    meta = EnvMeta(kind="regression", seed=seed, sigma_e=sigma_e)
    return EnvironmentData(np.concatenate([x1, x2], axis=1), y, meta)


# -- cache -------------------------------------------------------------------

def save_env(env: EnvironmentData, directory, name: str) -> Path:
    """Write ``<name>.npz`` plus a ``<name>.json`` manifest of the metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"features": env.features, "labels": env.labels}
    if env.color is not None:
        arrays["color"] = env.color
    np.savez_compressed(directory / f"{name}.npz", **arrays)
    manifest = {"meta": asdict(env.meta), "n": len(env), "dim": int(env.features.shape[1]),
                "is_test": env.is_test}
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_env(directory, name: str) -> EnvironmentData:
    directory = Path(directory)
    manifest = json.loads((directory / f"{name}.json").read_text())
    with np.load(directory / f"{name}.npz") as data:
        color = data["color"] if "color" in data else None
        return EnvironmentData(data["features"], data["labels"], EnvMeta(**manifest["meta"]),
                               color=color, is_test=manifest["is_test"])


def base_dataset(data_dir: str | os.PathLike | None, n: int, seed: int, train: bool = True):
    """IDX images when ``data_dir`` holds them, else the synthetic glyph fallback."""
    if data_dir:
        pair = find_idx_pair(data_dir, train)
        if pair is not None:
            images, labels = load_idx(*pair)
            return images, labels, "idx"
    images, labels = synthetic_pattern_fallback(n, seed=seed)
    return images, labels, "fallback"
