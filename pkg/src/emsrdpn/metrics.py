"""Training loss and Y-channel PSNR/SSIM with border cropping."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .image import rgb_to_y
from .tensor import ShapeError, Tensor, record_custom, tally


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at ties is zero."""
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor.wrap(np.asarray(np.abs(diff).mean(), dtype=pred.dtype).reshape(1, 1, 1, 1))
    tally(call="mae")

    def back(grads):
        g = np.sign(diff) * (grads[0].reshape(()) / n)
        return [g.astype(pred.dtype, copy=False), -g.astype(pred.dtype, copy=False)]

    record_custom("mae", [pred, target], out, back)
    return out


def _prepare(a: np.ndarray, b: np.ndarray, crop: int) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValueError(f"image dims differ: {a.shape} vs {b.shape}")
    ya, yb = rgb_to_y(a)[..., 0], rgb_to_y(b)[..., 0]
    if crop:
        ya, yb = ya[crop:-crop, crop:-crop], yb[crop:-crop, crop:-crop]
    if ya.size == 0:
        raise ValueError(f"image {a.shape[:2]} is empty after cropping {crop} pixels")
    return ya, yb


def psnr(a: np.ndarray, b: np.ndarray, s: int, crop: int | None = None) -> float:
    """PSNR in dB on the Y channel, ignoring a border of ``crop`` (default ``s``) pixels.

    Returns ``math.inf`` for identical inputs.
    """
    ya, yb = _prepare(a, b, s if crop is None else crop)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    tmp = win @ g
    win = np.lib.stride_tricks.sliding_window_view(tmp, k, axis=1)
    return win @ g


def ssim(a: np.ndarray, b: np.ndarray, s: int, crop: int | None = None,
         size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM on the Y channel, averaged over valid window positions."""
    ya, yb = _prepare(a, b, s if crop is None else crop)
    if min(ya.shape) < size:
        raise ValueError(f"image {ya.shape} smaller than the {size}x{size} SSIM window after crop")
    if np.array_equal(ya, yb):
        return 1.0
    c1, c2 = k1 ** 2, k2 ** 2
    g = gaussian_window(size, sigma)
    mu_a, mu_b = _filter_valid(ya, g), _filter_valid(yb, g)
    var_a = _filter_valid(ya * ya, g) - mu_a ** 2
    var_b = _filter_valid(yb * yb, g) - mu_b ** 2
    cov = _filter_valid(ya * yb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalRow:
    image: str
    scale: int
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    crop: int | None = None

    def add(self, image: str, scale: int, psnr_db: float, ssim_value: float) -> None:
        self.rows.append(EvalRow(image, scale, psnr_db, ssim_value))

    def scales(self) -> list[int]:
        return sorted({r.scale for r in self.rows})

    def mean(self, scale: int) -> tuple[float, float]:
        rows = [r for r in self.rows if r.scale == scale]
        return (sum(r.psnr_db for r in rows) / len(rows), sum(r.ssim for r in rows) / len(rows))

    def to_text(self) -> str:
        lines = [f"{'image':<24} {'scale':>5} {'psnr_db':>10} {'ssim':>8}"]
        for r in self.rows:
            lines.append(f"{r.image:<24} {'x' + str(r.scale):>5} {r.psnr_db:>10.4f} {r.ssim:>8.4f}")
        for s in self.scales():
            p, q = self.mean(s)
            lines.append(f"{'mean':<24} {'x' + str(s):>5} {p:>10.4f} {q:>8.4f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        """Infinite PSNR is written as the string ``"inf"`` to stay valid JSON."""
        def enc(v: float):
            return "inf" if math.isinf(v) else v

        doc = {
            "crop": self.crop,
            "rows": [{"image": r.image, "scale": r.scale, "psnr_db": enc(r.psnr_db), "ssim": r.ssim}
                     for r in self.rows],
            "mean": [{"scale": s, "psnr_db": enc(self.mean(s)[0]), "ssim": self.mean(s)[1]}
                     for s in self.scales()],
        }
        return json.dumps(doc, indent=2) + "\n"
