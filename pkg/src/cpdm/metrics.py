"""Full-reference quality metrics on metric-space images (values in [0, 1]).

SSIM uses the usual configuration: 11x11 Gaussian window with sigma 1.5,
K1 = 0.01, K2 = 0.03, L = 1, statistics over valid window positions only,
computed per channel and averaged. Identical images give PSNR ``inf``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import ImageTensor, SpaceError

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImageTensor):
        if img.space != "metric":
            raise SpaceError("metrics require metric-space images")
        img = img.data
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def quantize_8bit(img) -> np.ndarray:
    """Round-trip through 8-bit storage, matching what a written PNG holds."""
    return np.rint(np.clip(_as_array(img), 0.0, 1.0) * 255.0) / 255.0


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(img, w.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, w)


def ssim_map(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim < 2 or a.shape[-1] < WINDOW or a.shape[-2] < WINDOW:
        raise ValueError(f"SSIM needs images at least {WINDOW}x{WINDOW}, got {a.shape}")
    w = gaussian_window()
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a**2
    var_b = _filter(b * b, w) - mu_b**2
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> float:
    m = ssim_map(a, b)
    per_channel = m.reshape(-1, m.shape[-2] * m.shape[-1]).mean(axis=1)
    return float(per_channel.mean())


@dataclass
class MetricReport:
    dataset_name: str
    per_image: list[tuple[str, float, float, float]] = field(default_factory=list)

    COLUMNS = ("id", "psnr_db", "ssim", "mse")

    def add(self, image_id: str, a, b) -> None:
        self.per_image.append((image_id, psnr(a, b), ssim(a, b), mse(a, b)))

    @property
    def aggregate(self) -> dict[str, float]:
        if not self.per_image:
            return {"psnr_db": math.nan, "ssim": math.nan, "mse": math.nan}
        cols = list(zip(*self.per_image))
        return {name: float(np.mean(cols[i + 1])) for i, name in enumerate(self.COLUMNS[1:])}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for image_id, p, s, m in self.per_image:
            writer.writerow([image_id, f"{p:.6f}", f"{s:.6f}", f"{m:.8f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        rows = [(i, f"{p:.3f}", f"{s:.4f}", f"{m:.6f}") for i, p, s, m in self.per_image]
        agg = self.aggregate
        rows.append(("mean", f"{agg['psnr_db']:.3f}", f"{agg['ssim']:.4f}", f"{agg['mse']:.6f}"))
        widths = [max(len(str(r[k])) for r in rows + [self.COLUMNS]) for k in range(4)]
        line = "+".join("-" * (w + 2) for w in widths)
        fmt = " | ".join(f"{{:>{w}}}" for w in widths)
        out = [f"{self.dataset_name} ({len(self.per_image)} images)", fmt.format(*self.COLUMNS), line]
        out += [fmt.format(*r) for r in rows[:-1]]
        out += [line, fmt.format(*rows[-1])]
        return "\n".join(out)
