"""Deterministic synthetic image classification data.

Each image is a noisy background with one 2x2-patch object at a random
patch-aligned position. Every object patch is a flat bright (+) or dark (-)
square, and all classes use two of each: only the *arrangement* of the
signs tells classes apart (top/bottom split, bottom/top, left/right,
diagonal, ...). A patch on its own carries no class information and token
counts are class-independent, so the network has to relate neighbouring
tokens through attention to solve the task.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


_ARRANGEMENTS = [
    [[1, 1], [-1, -1]],
    [[-1, -1], [1, 1]],
    [[1, -1], [1, -1]],
    [[1, -1], [-1, 1]],
    [[-1, 1], [-1, 1]],
    [[-1, 1], [1, -1]],
]


@dataclass
class SyntheticDataset:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    num_classes: int = 4
    train_size: int = 512
    val_size: int = 256
    calib_size: int = 128
    amplitude: float = 1.0
    noise: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.image_size // self.patch_size < 2:
            raise ConfigError("patch grid must be at least 2x2")
        if not 2 <= self.num_classes <= len(_ARRANGEMENTS):
            raise ConfigError(f"synthetic generator supports 2..{len(_ARRANGEMENTS)} classes")
        if min(self.train_size, self.val_size, self.calib_size) < 1:
            raise ConfigError("split sizes must be >= 1")

    def _sample(self, rng: np.random.Generator, n: int):
        grid = self.image_size // self.patch_size
        p = self.patch_size
        signs = np.asarray(_ARRANGEMENTS[:self.num_classes], dtype=np.float64) * self.amplitude
        x = rng.normal(0.0, self.noise, size=(n, self.channels, self.image_size, self.image_size))
        y = rng.integers(0, self.num_classes, size=n)
        pos = rng.integers(0, grid - 1, size=(n, 2)) * p
        for i in range(n):
            r0, c0 = pos[i]
            block = np.kron(signs[y[i]], np.ones((p, p)))
            x[i, :, r0:r0 + 2 * p, c0:c0 + 2 * p] += block
        return x, y.astype(np.int64)

    def generate(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """``{"train", "val", "calib"}`` splits drawn from one seeded stream (so disjoint)."""
        self.validate()
        rng = np.random.default_rng(self.seed)
        return {
            "train": self._sample(rng, self.train_size),
            "val": self._sample(rng, self.val_size),
            "calib": self._sample(rng, self.calib_size),
        }

    def to_dict(self) -> dict:
        return asdict(self)


def load_npz(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Splits from an ``.npz`` holding ``x_train, y_train, x_val, y_val`` (``x_calib/y_calib`` optional)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"dataset file not found: {path}")
    with np.load(path) as f:
        out = {s: (f[f"x_{s}"].astype(np.float64), f[f"y_{s}"].astype(np.int64))
               for s in ("train", "val", "calib") if f"x_{s}" in f}
    if "train" not in out or "val" not in out:
        raise ConfigError(f"{path}: needs x_train/y_train/x_val/y_val arrays")
    out.setdefault("calib", out["train"])
    return out
