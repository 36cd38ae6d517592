"""Deterministic object-centric feature maps standing in for a segmentation backbone."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .worldsim import MAX_RANGE, Observation

MAGIC = b"DAFM"


@dataclass(frozen=True)
class FeatureConfig:
    d_sam: int = 16
    H: int = 8
    W: int = 8
    max_range: float = MAX_RANGE

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.d_sam, self.H, self.W)


PAPER_FEATURES = FeatureConfig(d_sam=256, H=64, W=64)


def category_table(num_categories: int, d_sam: int, seed: int = 0) -> np.ndarray:
    """Seeded Gaussian vectors, L2-normalized; redrawn until all pairs are > 0.1 apart."""
    rng = np.random.default_rng(seed)
    while True:
        table = rng.standard_normal((num_categories, d_sam))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        diff = table[:, None, :] - table[None, :, :]
        dist = np.linalg.norm(diff, axis=-1) + np.eye(num_categories) * 10.0
        if dist.min() > 0.1:
            return table.astype(np.float32)


def extract(obs: Observation, table: np.ndarray, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Splat each landmark ray's category vector into a (d_sam, H, W) map.

    Ray i lands in column floor(i / W_o * W) and row floor(depth / R_max * H);
    its contribution is scaled by 1 - depth / R_max so nearer objects are louder.
    """
    out = np.zeros(cfg.shape, dtype=np.float32)
    n = len(obs)
    for i in np.nonzero(obs.category >= 0)[0]:
        d = float(obs.depth[i])
        row = min(int(d / cfg.max_range * cfg.H), cfg.H - 1)
        col = min(int(i / n * cfg.W), cfg.W - 1)
        out[:, row, col] += table[obs.category[i]] * np.float32(1.0 - d / cfg.max_range)
    return out


def write_dafm(path, fmap: np.ndarray) -> None:
    fmap = np.ascontiguousarray(fmap, dtype="<f4")
    if fmap.ndim != 3:
        raise ValueError("feature map must be (d_sam, H, W)")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", *fmap.shape))
        fh.write(fmap.tobytes())


def read_dafm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a DAFM file")
    dims = struct.unpack("<3I", raw[4:16])
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != dims[0] * dims[1] * dims[2]:
        raise ValueError(f"{path}: payload size does not match header {dims}")
    return data.reshape(dims).astype(np.float32)
