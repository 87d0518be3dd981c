"""Feature maps, patch addressing and PNG I/O.

Layout conventions used across the package:

* a feature map is an ``(height, width, channels)`` array, row-major by
  ``(y, x, c)``;
* the linear index of pixel ``(x, y)`` is ``i = y * width + x``;
* patches are ``p x p`` windows centred on every pixel, flattened in
  ``(dy, dx, c)`` order, so ``d = p * p * channels``;
* samples falling outside the map are replicated from the nearest edge
  pixel (clamp-to-edge).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image


class ImageIOError(OSError):
    """Raised when an image cannot be read or written."""


class Position(NamedTuple):
    x: int
    y: int


def check_feature_map(X, dtype=np.float64, name="X") -> np.ndarray:
    """Validate ``X`` as an ``(H, W, C)`` finite feature map.

    2-D input is promoted to a single channel. Returns a C-contiguous
    array of ``dtype``.
    """
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {X.shape}")
    if min(X.shape) < 1:
        raise ValueError(f"{name} must be non-empty, got shape {X.shape}")
    X = np.ascontiguousarray(X, dtype=dtype)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or Inf")
    return X


def check_patch_size(patch_size: int) -> int:
    patch_size = int(patch_size)
    if patch_size < 1 or patch_size % 2 == 0:
        raise ValueError(f"patch_size must be a positive odd integer, got {patch_size}")
    return patch_size


def replicate_pad(X: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return X
    return np.pad(X, ((radius, radius), (radius, radius), (0, 0)), mode="edge")


def fold_padding(G: np.ndarray, radius: int) -> np.ndarray:
    """Adjoint of :func:`replicate_pad`: sum gradient mass back onto edge pixels."""
    if radius == 0:
        return G
    r = radius
    H = G.shape[0] - 2 * r
    W = G.shape[1] - 2 * r
    cols = G[:, r:r + W].copy()
    cols[:, 0] += G[:, :r].sum(axis=1)
    cols[:, -1] += G[:, r + W:].sum(axis=1)
    out = cols[r:r + H].copy()
    out[0] += cols[:r].sum(axis=0)
    out[-1] += cols[r + H:].sum(axis=0)
    return out


@dataclass(frozen=True, eq=False)
class PatchView:
    """Every ``p x p`` patch of a feature map, one per pixel.

    The source array is copied and marked read-only, so a view is safe
    to share between threads.
    """

    source: np.ndarray
    patch_size: int = 7
    dtype: type = np.float64
    _padded: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        src = check_feature_map(self.source, dtype=self.dtype, name="source").copy()
        src.flags.writeable = False
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "patch_size", check_patch_size(self.patch_size))
        padded = replicate_pad(src, self.radius)
        padded.flags.writeable = False
        object.__setattr__(self, "_padded", padded)

    @property
    def radius(self) -> int:
        return self.patch_size // 2

    @property
    def height(self) -> int:
        return self.source.shape[0]

    @property
    def width(self) -> int:
        return self.source.shape[1]

    @property
    def channels(self) -> int:
        return self.source.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape[:2]

    @property
    def n_patches(self) -> int:
        return self.height * self.width

    @property
    def dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def padded(self) -> np.ndarray:
        return self._padded

    def index(self, pos: Position) -> int:
        self._check(pos)
        return pos.y * self.width + pos.x

    def position(self, index: int) -> Position:
        if not 0 <= index < self.n_patches:
            raise IndexError(f"patch index {index} out of range [0, {self.n_patches})")
        y, x = divmod(int(index), self.width)
        return Position(x, y)

    def extract(self, pos: Position) -> np.ndarray:
        x, y = self._check(pos)
        p = self.patch_size
        return self._padded[y:y + p, x:x + p].reshape(-1).copy()

    def matrix(self, stride: int = 1) -> np.ndarray:
        """All patches as rows, optionally subsampled on a ``stride`` grid."""
        p = self.patch_size
        win = np.lib.stride_tricks.sliding_window_view(self._padded, (p, p), axis=(0, 1))
        # (H, W, C, p, p) -> (H, W, p, p, C)
        win = win[::stride, ::stride].transpose(0, 1, 3, 4, 2)
        return win.reshape(-1, self.dim)

    def _check(self, pos) -> tuple[int, int]:
        x, y = int(pos[0]), int(pos[1])
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"position {(x, y)} outside {self.width}x{self.height} map")
        return x, y


def extract_patch(view: PatchView, pos: Position) -> np.ndarray:
    return view.extract(pos)


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into a float32 map in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(img)
            elif mode in ("P", "RGBA", "LA"):
                arr = np.asarray(img.convert("RGB" if mode != "LA" else "L"))
            else:
                raise ImageIOError(f"{path}: unsupported image mode {mode!r} (need 8-bit gray/RGB)")
    except ImageIOError:
        raise
    except (OSError, ValueError) as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    if arr.dtype != np.uint8:
        raise ImageIOError(f"{path}: unsupported bit depth {arr.dtype}")
    return check_feature_map(arr.astype(np.float32) / np.float32(255.0), dtype=np.float32)


def to_bytes(X: np.ndarray) -> np.ndarray:
    X = check_feature_map(X)
    return np.rint(np.clip(X, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(X: np.ndarray, path) -> None:
    arr = to_bytes(X)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0])
    elif arr.shape[2] == 3:
        img = Image.fromarray(arr)
    else:
        raise ImageIOError(f"{path}: cannot save {arr.shape[2]}-channel map as PNG")
    try:
        img.save(Path(path), format="PNG")
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc
