"""Paired raw/reference datasets and a synthetic degradation fixture.

Dataset layout on disk::

    <root>/manifest.json
    <root>/raw/<id>.png     degraded input y0
    <root>/ref/<id>.png     clean reference x0
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


@dataclass(frozen=True)
class PairedSample:
    id: str
    y0: torch.Tensor  # 3 x H x W, model space
    x0: torch.Tensor


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[str, str, str]]  # (raw_path, ref_path, id), relative to root
    image_size: tuple[int, int]
    meta: dict | None = None

    def ids(self) -> list[str]:
        return [p[2] for p in self.pairs]

    def write(self) -> Path:
        path = Path(self.root) / "manifest.json"
        doc = {
            "image_size": list(self.image_size),
            "pairs": [{"id": i, "raw": r, "ref": f} for r, f, i in self.pairs],
        }
        if self.meta:
            doc["meta"] = self.meta
        path.write_text(json.dumps(doc, indent=2))
        return path

    @classmethod
    def read(cls, root) -> "DatasetManifest":
        root = Path(root)
        if root.is_file():
            root = root.parent
        doc = json.loads((root / "manifest.json").read_text())
        pairs = [(e["raw"], e["ref"], e["id"]) for e in doc["pairs"]]
        ids = [p[2] for p in pairs]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{root}: duplicate ids in manifest")
        return cls(root, pairs, tuple(doc["image_size"]), doc.get("meta"))

    def subset(self, start: int = 0, stop: int | None = None) -> "DatasetManifest":
        return replace(self, pairs=self.pairs[start:stop])


@dataclass(frozen=True)
class DegradeParams:
    attenuation: tuple[float, float, float] = (1.2, 0.4, 0.1)
    haze_color: tuple[float, float, float] = (0.05, 0.35, 0.45)
    haze_strength: float = 0.3
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if len(self.attenuation) != 3 or min(self.attenuation) < 0:
            raise ValueError("attenuation must be three non-negative values")
        if len(self.haze_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.haze_color):
            raise ValueError("haze_color must be three values in [0, 1]")
        if not 0.0 <= self.haze_strength < 1.0:
            raise ValueError("haze_strength must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


IDENTITY_DEGRADE = DegradeParams((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0, 0.0)


# -- image files ------------------------------------------------------------


def read_png(path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Decode to float64 ``3 x H x W`` in [0, 1], bilinear-resized to ``size`` (H, W)."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def write_png(path, img) -> None:
    """Write a metric-space ``3 x H x W`` image as 8-bit RGB, round-to-nearest."""
    if torch.is_tensor(img):
        img = img.detach().cpu().double().numpy()
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.rint(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(u8, "RGB").save(path, format="PNG")


def load_dataset(manifest: DatasetManifest) -> list[PairedSample]:
    root = Path(manifest.root)
    samples = []
    for raw, ref, sid in manifest.pairs:
        for rel in (raw, ref):
            if not (root / rel).is_file():
                raise FileNotFoundError(f"missing dataset file {root / rel}")
        y0 = read_png(root / raw, manifest.image_size)
        x0 = read_png(root / ref, manifest.image_size)
        assert y0.shape == x0.shape
        samples.append(
            PairedSample(
                sid,
                torch.from_numpy(y0 * 2.0 - 1.0).float(),
                torch.from_numpy(x0 * 2.0 - 1.0).float(),
            )
        )
    return samples


def stack(samples: list[PairedSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch tensors ``(y0, x0)``."""
    return (torch.stack([s.y0 for s in samples]), torch.stack([s.x0 for s in samples]))


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


# -- synthetic degradation ----------------------------------------------------


def synth_degrade(x0: np.ndarray, p: DegradeParams) -> np.ndarray:
    """Attenuate per channel, blend toward a haze color, add sensor noise, clamp.

    ``x0`` is metric space with channels on axis -3.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.min() < 0.0 or x0.max() > 1.0:
        raise ValueError("synth_degrade expects a metric-space image in [0, 1]")
    att = np.exp(-np.asarray(p.attenuation, dtype=np.float64)).reshape(3, 1, 1)
    haze = np.asarray(p.haze_color, dtype=np.float64).reshape(3, 1, 1)
    y = x0 * att * (1.0 - p.haze_strength) + haze * p.haze_strength
    if p.noise_sigma > 0:
        y = y + np.random.default_rng(p.seed).normal(0.0, p.noise_sigma, size=y.shape)
    return np.clip(y, 0.0, 1.0)


def procedural_image(size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth random color field with a few flat-colored discs and boxes."""
    h, w = size
    grid = torch.from_numpy(rng.uniform(0.1, 0.9, size=(1, 3, 4, 4)))
    img = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=True)[0].numpy()
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        else:
            mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img = np.where(mask[None], color, img)
    return np.clip(img, 0.0, 1.0)


def jitter(p: DegradeParams, rng: np.random.Generator, seed: int) -> DegradeParams:
    if p.haze_strength == 0 and max(p.attenuation) == 0 and p.noise_sigma == 0:
        return replace(p, seed=seed)
    att = tuple(float(a * rng.uniform(0.75, 1.25)) for a in p.attenuation)
    haze = tuple(float(np.clip(c + rng.uniform(-0.05, 0.05), 0.0, 1.0)) for c in p.haze_color)
    strength = float(np.clip(p.haze_strength * rng.uniform(0.8, 1.2), 0.0, 0.95))
    sigma = float(p.noise_sigma * rng.uniform(0.5, 1.5))
    return DegradeParams(att, haze, strength, sigma, seed)


def make_synthetic_dataset(
    n: int,
    image_size,
    p: DegradeParams,
    seed: int,
    out_dir,
) -> DatasetManifest:
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(image_size, int):
        image_size = (image_size, image_size)
    image_size = tuple(int(s) for s in image_size)
    root = Path(out_dir)
    (root / "raw").mkdir(parents=True, exist_ok=True)
    (root / "ref").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n)
    width = max(4, len(str(n - 1)))
    pairs = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        sid = f"{i:0{width}d}"
        ref = procedural_image(image_size, rng)
        # quantize first so the raw image derives from exactly what ref/ stores
        ref = np.rint(ref * 255.0) / 255.0
        params = jitter(p, rng, int(rng.integers(2**31)))
        raw = synth_degrade(ref, params)
        write_png(root / "ref" / f"{sid}.png", ref)
        write_png(root / "raw" / f"{sid}.png", raw)
        pairs.append((f"raw/{sid}.png", f"ref/{sid}.png", sid))
    meta = {"generator": "synthetic", "n": n, "seed": seed, "degrade": asdict(p)}
    manifest = DatasetManifest(root, pairs, image_size, meta)
    manifest.write()
    return manifest
