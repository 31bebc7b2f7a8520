"""Synthetic three-client segmentation benchmark.

Each image holds one elliptical "organ" and, with probability 0.7, a disc
"tumor" strictly inside it.  Clients differ in size, organ/tumor intensity
offset, and label space: only the tumor client annotates class 2; the others
label the tumor region as organ.

Binary export format (all integers unsigned big-endian)::

    magic   b"FSDS"
    u8      version (= 1)
    u32     H, W, number of clients
    per client:
      u32   client_id
      u8    has_tumor_labels
      u32   n_train, n_val, n_test
      per split (train, val, test):
        n*H*W  float64 big-endian images
        n*H*W  uint8 labels
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .param_math import UsageError

MAGIC = b"FSDS"
FORMAT_VERSION = 1
TUMOR_PROBABILITY = 0.7
ORGAN_INTENSITY = 0.5
TUMOR_INTENSITY = 0.8


@dataclass(frozen=True)
class ClientDatasetSpec:
    client_id: int
    n_total: int
    has_tumor_labels: bool = False
    intensity_shift: float = 0.0
    image_size: int = 32
    noise_sigma: float = 0.25
    organ_radius_range: tuple = (5, 10)
    tumor_radius_range: tuple = (2, 3)
    seed: int = 0
    name: str = ""


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return int(self.images.shape[0])


@dataclass
class ClientDataset:
    client_id: int
    train: Split
    val: Split
    test: Split
    label_space: tuple
    name: str = ""
    has_tumor_labels: bool = field(init=False)

    def __post_init__(self):
        self.has_tumor_labels = 2 in self.label_space

    @property
    def n_train(self) -> int:
        return len(self.train)


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = (6 * n) // 10
    n_val = (2 * n) // 10
    return n_train, n_val, n - n_train - n_val


def _draw_case(rng, spec):
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    lo, hi = spec.organ_radius_range
    ry, rx = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0.0, np.pi)
    reach = max(ry, rx)
    cy, cx = rng.uniform(reach, size - 1 - reach, size=2)
    c, s = np.cos(theta), np.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    organ = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0

    tumor = np.zeros_like(organ)
    if rng.uniform() < TUMOR_PROBABILITY:
        t_lo, t_hi = spec.tumor_radius_range
        radius = rng.uniform(t_lo, t_hi)
        inner = min(ry, rx) - radius
        for _ in range(50):
            if inner <= 0:
                break
            a = rng.uniform(0, 2 * np.pi)
            rr = inner * np.sqrt(rng.uniform())
            ty = cy + rr * (np.cos(a) * c - np.sin(a) * s)
            tx = cx + rr * (np.cos(a) * s + np.sin(a) * c)
            disc = (yy - ty) ** 2 + (xx - tx) ** 2 <= radius ** 2
            if disc.any() and not np.any(disc & ~organ):
                tumor = disc
                break
            radius *= 0.9
            inner = min(ry, rx) - radius

    image = rng.normal(0.0, spec.noise_sigma, (size, size))
    image[organ] += ORGAN_INTENSITY + spec.intensity_shift
    image[tumor] += TUMOR_INTENSITY - ORGAN_INTENSITY
    np.clip(image, -1.0, 1.0, out=image)

    labels = organ.astype(np.uint8)
    labels[tumor] = 2 if spec.has_tumor_labels else 1
    return image, labels


def generate(spec: ClientDatasetSpec) -> ClientDataset:
    """Deterministic dataset for one client, split 60/20/20 (floor, remainder to test)."""
    if spec.n_total < 5:
        raise UsageError("n_total must be >= 5")
    lo, hi = spec.organ_radius_range
    t_lo, t_hi = spec.tumor_radius_range
    if not (0 < lo <= hi and 0 < t_lo <= t_hi):
        raise UsageError("radius ranges must be positive and ordered")
    if 2 * hi + 2 > spec.image_size:
        raise UsageError(f"organ radius {hi} does not fit a {spec.image_size}px image")
    if t_hi >= lo:
        raise UsageError("tumor radius must be smaller than the smallest organ radius")

    rng = np.random.default_rng([spec.seed, spec.client_id])
    images = np.empty((spec.n_total, spec.image_size, spec.image_size))
    labels = np.empty((spec.n_total, spec.image_size, spec.image_size), dtype=np.uint8)
    for i in range(spec.n_total):
        images[i], labels[i] = _draw_case(rng, spec)

    n_train, n_val, _ = split_counts(spec.n_total)
    cut = [0, n_train, n_train + n_val, spec.n_total]
    splits = [Split(images[a:b].copy(), labels[a:b].copy()) for a, b in zip(cut, cut[1:])]
    label_space = (0, 1, 2) if spec.has_tumor_labels else (0, 1)
    return ClientDataset(spec.client_id, *splits, label_space=label_space, name=spec.name)


def default_benchmark(seed: int = 0) -> list[ClientDatasetSpec]:
    """Three clients sized so the train splits hold 48 / 165 / 18 cases.

    Besides the intensity shift, each site has its own acquisition noise:
    the large tumor-labelled site is clean, the two organ-only sites noisy.
    """
    return [
        ClientDatasetSpec(0, 80, False, 0.0, noise_sigma=0.4, seed=seed, name="A"),
        ClientDatasetSpec(1, 275, True, 0.1, noise_sigma=0.05, seed=seed, name="B"),
        ClientDatasetSpec(2, 30, False, -0.15, noise_sigma=0.45, seed=seed, name="C"),
    ]


def write_datasets(path, datasets: list[ClientDataset]) -> None:
    h, w = datasets[0].train.images.shape[1:]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack(">BIII", FORMAT_VERSION, h, w, len(datasets)))
        for ds in datasets:
            fh.write(struct.pack(">IBIII", ds.client_id, int(ds.has_tumor_labels),
                                 len(ds.train), len(ds.val), len(ds.test)))
            for split in (ds.train, ds.val, ds.test):
                fh.write(split.images.astype(">f8").tobytes())
                fh.write(split.labels.astype(np.uint8).tobytes())


def read_datasets(path) -> list[ClientDataset]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise UsageError(f"{path}: not a dataset file")
    version, h, w, n_clients = struct.unpack_from(">BIII", data, 4)
    if version != FORMAT_VERSION:
        raise UsageError(f"{path}: unsupported format version {version}")
    off = 4 + 13
    out = []
    for _ in range(n_clients):
        cid, tumor, *counts = struct.unpack_from(">IBIII", data, off)
        off += 17
        splits = []
        for n in counts:
            k = n * h * w
            images = np.frombuffer(data, ">f8", k, off).astype(np.float64).reshape(n, h, w)
            off += 8 * k
            labels = np.frombuffer(data, np.uint8, k, off).reshape(n, h, w).copy()
            off += k
            splits.append(Split(images, labels))
        out.append(ClientDataset(cid, *splits, label_space=(0, 1, 2) if tumor else (0, 1)))
    return out
