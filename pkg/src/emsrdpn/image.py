"""Image I/O, bicubic degradation, Y-channel conversion and patch sampling.

Images are ``(h, w, c)`` float64 arrays with samples in ``[0, 1]``; ``c`` is
1 or 3. Conversion to and from 8-bit happens only in :func:`load_image` and
:func:`save_image`.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SUPPORTED_SCALES = (2, 3, 4, 8)
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


# --------------------------------------------------------------------------
# I/O


def _read_netpbm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                 rb"(?:#[^\n]*\n\s*)*(\d+)\s", raw)
    if not m:
        raise OSError(f"{path}: not a binary PPM/PGM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise OSError(f"{path}: only 8-bit netpbm is supported (maxval={maxval})")
    c = 3 if magic == b"P6" else 1
    body = raw[m.end():]
    if len(body) < w * h * c:
        raise OSError(f"{path}: truncated pixel data ({len(body)} of {w * h * c} bytes)")
    return np.frombuffer(body[:w * h * c], dtype=np.uint8).reshape(h, w, c)


def load_image(path) -> np.ndarray:
    """Read a PNG or binary PPM/PGM into an ``(h, w, c)`` float array."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm"):
        arr = _read_netpbm(path)
    elif suffix == ".png":
        from PIL import Image as PILImage

        try:
            with PILImage.open(path) as im:
                im.load()
                if im.mode in ("L", "RGB"):
                    arr = np.asarray(im)
                elif im.mode in ("LA", "I", "I;16", "P", "1"):
                    arr = np.asarray(im.convert("L" if im.mode != "P" else "RGB"))
                else:
                    arr = np.asarray(im.convert("RGB"))
        except (OSError, SyntaxError) as exc:
            raise OSError(f"{path}: cannot decode PNG ({exc})") from exc
    else:
        raise OSError(f"{path}: unsupported image format {suffix!r}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write ``img`` as PNG or PPM/PGM (chosen by suffix), atomically."""
    path = Path(path)
    data = to_uint8(img)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    suffix = path.suffix.lower()
    tmp = path.with_name(f".{path.name}.tmp")
    if suffix in (".ppm", ".pgm"):
        magic = b"P6" if c == 3 else b"P5"
        if (c == 3) != (suffix == ".ppm"):
            raise OSError(f"{path}: {c}-channel image cannot be stored as {suffix}")
        tmp.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + data.tobytes())
    elif suffix == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(data[:, :, 0] if c == 1 else data).save(tmp, format="PNG")
    else:
        raise OSError(f"{path}: unsupported image format {suffix!r}")
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# resampling


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` resampling matrix for one axis.

    Downscaling widens the kernel by the inverse scale (antialiasing).
    Out-of-range taps are clamped to the nearest edge sample and every row is
    normalised to sum to one.
    """
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kscale * cubic(kscale * (centers[:, None] - idx))
    wts /= wts.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return mat


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = resize_weights(h, out_h)
    cols = resize_weights(w, out_w)
    tmp = np.einsum("oh,hwc->owc", rows, img)
    return np.einsum("pw,owc->opc", cols, tmp)


def center_crop(img: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = img.shape[:2]
    top, left = (H - h) // 2, (W - w) // 2
    return img[top:top + h, left:left + w]


def crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[:2]
    return center_crop(img, h - h % s, w - w % s)


def degrade(hr: np.ndarray, s: int) -> np.ndarray:
    """Bicubic ``s``-fold downsampling of ``hr`` after cropping it to a multiple of ``s``."""
    if s not in SUPPORTED_SCALES:
        raise ValueError(f"unsupported scale {s}; expected one of {SUPPORTED_SCALES}")
    h, w = hr.shape[:2]
    if h < s or w < s:
        raise ValueError(f"image {h}x{w} is smaller than scale {s}")
    hr = crop_to_multiple(hr, s)
    return bicubic_resize(hr, hr.shape[0] // s, hr.shape[1] // s)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Studio-swing BT.601 luma in ``[16/255, 235/255]``; gray input passes through."""
    if img.shape[-1] == 1:
        return img
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    return ((65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)[..., None]


# --------------------------------------------------------------------------
# dihedral augmentation


def dihedral(arr: np.ndarray, code: int, axes=(0, 1)) -> np.ndarray:
    """Apply element ``code`` (0..7) of D4: ``code % 4`` quarter turns, then a
    vertical flip when ``code >= 4``."""
    if not 0 <= code < 8:
        raise ValueError(f"augment code must be in 0..7, got {code}")
    out = np.rot90(arr, code % 4, axes=axes)
    if code >= 4:
        out = np.flip(out, axis=axes[0])
    return out


def dihedral_inverse(arr: np.ndarray, code: int, axes=(0, 1)) -> np.ndarray:
    out = np.flip(arr, axis=axes[0]) if code >= 4 else arr
    return np.rot90(out, -(code % 4), axes=axes)


@dataclass(frozen=True)
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int


def augment(pair: PatchPair, code: int) -> PatchPair:
    return PatchPair(np.ascontiguousarray(dihedral(pair.lr, code)),
                     np.ascontiguousarray(dihedral(pair.hr, code)), pair.scale)


# --------------------------------------------------------------------------
# datasets


def _list_images(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


@dataclass
class DatasetManifest:
    """HR images with per-scale LR counterparts.

    With ``on_the_fly`` the LR images are produced by :func:`degrade` instead
    of being read from disk.
    """

    hr_paths: list[Path]
    lr_paths: list[dict[int, Path]]
    scales: tuple[int, ...]
    on_the_fly: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.hr_paths)

    def name(self, i: int) -> str:
        return self.hr_paths[i].stem

    def hr(self, i: int) -> np.ndarray:
        key = ("hr", i)
        if key not in self._cache:
            self._cache[key] = _as_rgb(load_image(self.hr_paths[i]))
        return self._cache[key]

    def pair(self, i: int, s: int) -> tuple[np.ndarray, np.ndarray]:
        """LR image and the HR image cropped to exactly ``s`` times its size."""
        key = ("pair", i, s)
        if key not in self._cache:
            hr = self.hr(i)
            if self.on_the_fly:
                lr = degrade(hr, s)
            else:
                lr = _as_rgb(load_image(self.lr_paths[i][s]))
            h, w = lr.shape[:2]
            if hr.shape[0] < s * h or hr.shape[1] < s * w:
                raise ValueError(f"{self.hr_paths[i]}: HR smaller than {s}x its LR image")
            self._cache[key] = (lr, center_crop(hr, s * h, s * w))
        return self._cache[key]

    @classmethod
    def from_images(cls, hr_images: list[np.ndarray], scales) -> "DatasetManifest":
        """In-memory manifest with on-the-fly degradation."""
        m = cls([Path(f"mem{i}") for i in range(len(hr_images))],
                [{} for _ in hr_images], tuple(scales), on_the_fly=True)
        for i, img in enumerate(hr_images):
            m._cache[("hr", i)] = _as_rgb(img)
        return m


def _as_rgb(img: np.ndarray) -> np.ndarray:
    return np.repeat(img, 3, axis=2) if img.shape[2] == 1 else img


def build_manifest(root, scales, strict: bool = True, on_the_fly: bool = False) -> DatasetManifest:
    """Scan ``root/HR`` and ``root/LR_x{s}`` for images with matching basenames.

    In strict mode a missing LR file is an error; otherwise the record keeps
    only the scales it has.
    """
    root = Path(root)
    hr = _list_images(root / "HR")
    if not hr:
        raise FileNotFoundError(f"no HR images under {root / 'HR'}")
    lr_dirs = {s: _list_images(root / f"LR_x{s}") for s in scales}
    hr_paths, lr_paths = [], []
    for stem, path in hr.items():
        entry = {s: lr_dirs[s][stem] for s in scales if stem in lr_dirs[s]}
        if not on_the_fly and len(entry) < len(scales):
            missing = sorted(set(scales) - set(entry))
            if strict:
                raise FileNotFoundError(f"{path.name}: missing LR image for scales {missing}")
            log.warning("%s: no LR image for scales %s", path.name, missing)
        hr_paths.append(path)
        lr_paths.append(entry)
    return DatasetManifest(hr_paths, lr_paths, tuple(scales), on_the_fly)


def sample_patch(manifest: DatasetManifest, rng: np.random.Generator, s: int, p: int) -> PatchPair:
    """Uniform image, uniform LR window of size ``p``, uniform D4 augmentation."""
    i = int(rng.integers(len(manifest)))
    lr, hr = manifest.pair(i, s)
    h, w = lr.shape[:2]
    if p > h or p > w:
        raise ValueError(f"patch size {p} exceeds LR image {h}x{w} ({manifest.name(i)})")
    y0 = int(rng.integers(h - p + 1))
    x0 = int(rng.integers(w - p + 1))
    pair = PatchPair(lr[y0:y0 + p, x0:x0 + p], hr[s * y0:s * (y0 + p), s * x0:s * (x0 + p)], s)
    return augment(pair, int(rng.integers(8)))


def synthetic_scene(h: int = 96, w: int = 96, seed: int = 0) -> np.ndarray:
    """Deterministic RGB test image with edges, stripes, discs and smooth shading."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    for ch in range(3):
        img[..., ch] = 0.25 + 0.2 * (xx / w) + 0.15 * rng.random() * (yy / h)
    period = rng.uniform(5, 9)
    angle = rng.uniform(0, np.pi)
    stripes = (np.sin((np.cos(angle) * xx + np.sin(angle) * yy) * 2 * np.pi / period) > 0)
    band = (yy > h * 0.55) & (xx < w * 0.6)
    img[band] = np.where(stripes[band, None], 0.85, 0.15) * rng.uniform(0.6, 1.0, 3)
    for _ in range(4):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(h * 0.08, h * 0.2)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[disc] = rng.uniform(0.05, 0.95, 3)
    x0, y0 = int(rng.integers(w // 2)), int(rng.integers(h // 2))
    img[y0:y0 + h // 4, x0:x0 + 2, :] = 1.0
    return np.clip(img, 0.0, 1.0)
