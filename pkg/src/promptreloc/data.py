"""Datasets: the PVDS binary format, normalization presets, synthetic tasks.

PVDS layout (little endian)::

    b"PVDS"  u32 version  u32 M  u32 H  u32 W  u32 C  u32 num_classes
    f32 images[M*H*W*C]  u32 labels[M]  u8 split[M]   (0 train, 1 val, 2 test)
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .vit import VitConfig, VitWeights

MAGIC = b"PVDS"
VERSION = 1
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<4s6I")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray      # (M, H, W, C) float32
    labels: np.ndarray      # (M,) int64
    split: np.ndarray       # (M,) uint8 codes into SPLITS
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        self.validate()

    def validate(self) -> None:
        M = self.images.shape[0] if self.images.ndim == 4 else -1
        if self.images.ndim != 4:
            raise ContractError(f"images must be (M, H, W, C), got {self.images.shape}")
        if self.labels.shape != (M,) or self.split.shape != (M,):
            raise ContractError("labels and split tags must have one entry per image")
        if M and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels must lie in [0, {self.num_classes})")
        if M and self.split.max() >= len(SPLITS):
            raise ContractError("unknown split tag")

    def __len__(self) -> int:
        return self.labels.size

    def indices(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.split == SPLITS.index(name))

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(name)
        return self.images[idx], self.labels[idx]


def save_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    M, H, W, C = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, M, H, W, C, ds.num_classes))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.split.astype("u1").tobytes())


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_dataset(buf, str(path))


def decode_dataset(buf: bytes, source: str = "<bytes>") -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{source}: truncated header at byte {len(buf)} (need {_HEADER.size})")
    magic, version, M, H, W, C, K = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{source}: bad magic at byte 0")
    if version != VERSION:
        raise DatasetFormatError(f"{source}: unsupported version {version} at byte 4")
    if K == 0:
        raise DatasetFormatError(f"{source}: num_classes must be positive (byte 24)")
    off = _HEADER.size
    sizes = [("images", 4 * M * H * W * C), ("labels", 4 * M), ("split", M)]
    parts = {}
    for name, n in sizes:
        if off + n > len(buf):
            raise DatasetFormatError(f"{source}: truncated {name} at byte {off} (need {n} bytes)")
        parts[name] = buf[off:off + n]
        off += n
    if off != len(buf):
        raise DatasetFormatError(f"{source}: {len(buf) - off} trailing bytes at byte {off}")
    images = np.frombuffer(parts["images"], dtype="<f4").reshape(M, H, W, C).astype(np.float32)
    labels = np.frombuffer(parts["labels"], dtype="<u4").astype(np.int64)
    split = np.frombuffer(parts["split"], dtype="u1").copy()
    bad = np.flatnonzero(labels >= K)
    if bad.size:
        raise DatasetFormatError(f"{source}: label out of range at byte {_HEADER.size + 4 * M * H * W * C + 4 * bad[0]}")
    bad = np.flatnonzero(split >= len(SPLITS))
    if bad.size:
        raise DatasetFormatError(f"{source}: bad split tag at byte {off - M + bad[0]}")
    return Dataset(images, labels, split, K)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationPreset:
    name: str
    mean: tuple
    std: tuple

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ContractError("mean and std lengths differ")
        if not all(s > 0 for s in self.std):
            raise ContractError("std must be positive")

    @property
    def channels(self) -> int:
        return len(self.mean)


def inception(channels: int = 3) -> NormalizationPreset:
    return NormalizationPreset("inception", (0.5,) * channels, (0.5,) * channels)


# conventional torchvision constants
IMAGENET = NormalizationPreset("imagenet", (0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


def preset(name: str, channels: int) -> NormalizationPreset:
    if name == "inception":
        return inception(channels)
    if name == "imagenet":
        return IMAGENET
    if name == "identity":
        return NormalizationPreset("identity", (0.0,) * channels, (1.0,) * channels)
    raise ContractError(f"unknown normalization preset {name!r}")


def normalize(images, p: NormalizationPreset) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape[-1] != p.channels:
        raise ContractError(f"images have {x.shape[-1]} channels, preset {p.name} has {p.channels}")
    return (x - np.asarray(p.mean)) / np.asarray(p.std)


def denormalize(images, p: NormalizationPreset) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape[-1] != p.channels:
        raise ContractError(f"images have {x.shape[-1]} channels, preset {p.name} has {p.channels}")
    return x * np.asarray(p.std) + np.asarray(p.mean)


# ---------------------------------------------------------------------------
# block-sensitive synthetic task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the block-sensitive task.

    An image carries ``num_factors`` hidden binary factors a_j.  Factor j
    owns two signal pixels; the "on" pixel shows sigma * signal when a_j = 1
    and the "off" pixel shows it when a_j = 0, with a random sign sigma, so
    the signal norm does not depend on the factors.  The label counts active
    factors: y = floor(num_classes * sum(a) / (num_factors + 1)).  Reading
    one factor needs an even function of its "on" pixel, which a pair of
    prompts with opposite keys at the sensitive block provides, so accuracy
    grows with the number of prompts placed there.
    """

    num_blocks: int = 6
    sensitive_block: int = 3
    embed_dim: int = 32
    num_classes: int = 2
    num_factors: int = 3
    n_train: int = 512
    n_val: int = 0
    n_test: int = 512
    signal: float = 1.0          # amplitude of an active factor
    signal_noise: float = 0.3
    query_gain: float = 3.0      # block-b query read-out of the signal subspace
    key_gain: float = 1.0
    value_gain: float = 1.0
    pool_gain: float = 0.5       # per-block copy of signal and readout into every token
    cls_norm: float = 1.0
    mlp_scale: float = 0.3

    def __post_init__(self):
        if not 1 <= self.sensitive_block <= self.num_blocks:
            raise ContractError(f"sensitive block {self.sensitive_block} outside [1, {self.num_blocks}]")
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.num_factors < 1 or self.num_factors + 1 < self.num_classes:
            raise ContractError("need num_factors >= num_classes - 1 >= 1")
        if 2 * (3 * self.num_factors + 2 * self.num_classes) + 3 > self.embed_dim:
            raise ContractError("embed_dim too small for the planted subspaces")

    def label_of(self, active_count):
        return np.asarray(active_count) * self.num_classes // (self.num_factors + 1)

    def vit_config(self) -> VitConfig:
        return VitConfig(num_blocks=self.num_blocks, embed_dim=self.embed_dim, num_heads=2,
                         patch_size=4, image_size=16, channels=1, num_classes=self.num_classes)


def _pair_basis(d: int, dims: dict, rng) -> tuple[dict, np.ndarray]:
    """Coordinate-pair directions (e_i - e_j)/sqrt(2) for each named subspace
    and a zero-mean nuisance basis on the remaining coordinates.

    Pair directions are orthogonal to the ones vector, so LayerNorm centering
    leaves them alone, and each subspace owns whole coordinates, so an
    elementwise LayerNorm gain can switch a subspace off.
    """
    subs, at = {}, 0
    for name, m in dims.items():
        sub = np.zeros((m, d))
        for i in range(m):
            sub[i, at], sub[i, at + 1] = 1 / np.sqrt(2), -1 / np.sqrt(2)
            at += 2
        subs[name] = sub
    rest = d - at
    q, _ = np.linalg.qr(np.concatenate([np.ones((rest, 1)), rng.standard_normal((rest, rest - 1))], axis=1))
    N = np.zeros((rest - 1, d))
    N[:, at:] = q[:, 1:].T
    return subs, N


def make_backbone(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[VitWeights, dict]:
    """Frozen weights whose block ``b`` alone can turn a prompt into label evidence.

    Residual stream subspaces: S carries the signed factors, K and V are read
    only from prompts, R is the class readout, N is nuisance.  Head 0 of
    block b matches queries from S against prompt keys from K and writes
    prompt values from V into R.  Head 1 of every block pools S and R
    uniformly across tokens, which carries evidence to the cls token.  The
    final LayerNorm gain is zero on S, K and V, so the classifier sees only R
    and N: without prompts at b the label is not decodable at all.
    """
    cfg = spec.vit_config()
    d, c, m, L = cfg.embed_dim, spec.num_classes, spec.num_factors, spec.num_blocks
    hd = cfg.head_dim
    subs, N = _pair_basis(d, {"S": 2 * m, "K": m, "V": c, "R": c}, rng)
    S, K, V, R = subs["S"], subs["K"], subs["V"], subs["R"]
    nn = N.shape[0]
    w = VitWeights.init(cfg, rng).to_arrays()
    npix = cfg.patch_size ** 2
    # pixels 0..2m-1 of each patch feed S ("on" slots first), the rest feed nuisance
    W = np.zeros((npix, d))
    W[:2 * m] = S
    W[2 * m:] = rng.standard_normal((npix - 2 * m, nn)) @ N / np.sqrt(nn)
    w["patch.W"] = W
    w["patch.b"] = np.zeros(d)
    w["pos"] = 0.1 * rng.standard_normal((cfg.num_patches, nn)) @ N
    w["cls"] = spec.cls_norm * (rng.standard_normal(nn) @ N) / np.sqrt(nn)
    SR = np.concatenate([S, R])
    for i in range(1, L + 1):
        p = f"blocks.{i}."
        Wqkv = np.zeros((d, 3 * d))
        if i == spec.sensitive_block:
            Wqkv[:, 0:m] = spec.query_gain * S[:m].T           # head 0 query  <- S (on slots)
            Wqkv[:, d:d + m] = spec.key_gain * K.T             # head 0 key    <- K
            Wqkv[:, 2 * d:2 * d + c] = spec.value_gain * V.T   # head 0 value  <- V
        # head 1 value copies S and R; its query and key are zero (uniform pooling)
        Wqkv[:, 2 * d + hd:2 * d + hd + 2 * m + c] = SR.T
        Wo = np.zeros((d, d))
        Wo[0:c] = R                                           # head 0 value -> R
        Wo[hd:hd + 2 * m + c] = spec.pool_gain * SR               # head 1 value -> S, R
        w[p + "attn.Wqkv"] = Wqkv
        w[p + "attn.bqkv"] = np.zeros(3 * d)
        w[p + "attn.Wo"] = Wo
        w[p + "attn.bo"] = np.zeros(d)
        h = cfg.mlp_dim
        w[p + "mlp.W1"] = spec.mlp_scale * N.T @ rng.standard_normal((nn, h)) / np.sqrt(nn)
        w[p + "mlp.b1"] = np.zeros(h)
        w[p + "mlp.W2"] = spec.mlp_scale * rng.standard_normal((h, nn)) @ N / np.sqrt(h)
        w[p + "mlp.b2"] = np.zeros(d)
    g = np.ones(d)
    g[:2 * (3 * m + c)] = 0.0                                 # hide S, K, V from the classifier
    w["norm.g"] = g
    w["head.W"] = 0.01 * rng.standard_normal((d, c))
    w["head.b"] = np.zeros(c)
    subspaces = {"S": S, "K": K, "V": V, "R": R, "N": N}
    return VitWeights.from_arrays(cfg, w), subspaces


def make_images(spec: SyntheticSpec, factors: np.ndarray, rng) -> np.ndarray:
    """Raw images in [0, 1]-ish range; Inception normalization maps them to unit scale.

    Every patch's first 2 * ``num_factors`` pixels hold the on/off slots,
    sigma * signal in the slot selected by a_j plus noise, with one sign per
    image and slot.  The remaining pixels are unit Gaussian clutter.
    """
    cfg = spec.vit_config()
    M, m = factors.shape
    g, P = cfg.image_size // cfg.patch_size, cfg.patch_size
    patches = rng.standard_normal((M, g * g, P * P))
    sigma = rng.choice([-1.0, 1.0], size=(M, 2 * m))
    slots = np.concatenate([factors, 1.0 - factors], axis=1)
    patches[:, :, :2 * m] = (spec.signal * (sigma * slots)[:, None, :]
                             + spec.signal_noise * rng.standard_normal((M, g * g, 2 * m)))
    img = patches.reshape(M, g, g, P, P).transpose(0, 1, 3, 2, 4).reshape(M, g * P, g * P, 1)
    return (0.5 + 0.5 * img).astype(np.float32)


def make_block_sensitive_task(spec: SyntheticSpec | None = None, seed: int = 0, **overrides):
    """(frozen backbone weights, Dataset) for a task that needs prompts at one block.

    Backbone and data come from independent streams of ``seed``, so the same
    (spec, seed) gives byte-identical outputs.
    """
    if spec is None:
        spec = SyntheticSpec(**overrides)
    elif overrides:
        spec = SyntheticSpec(**{**spec.__dict__, **overrides})
    root = np.random.SeedSequence([seed, spec.sensitive_block, spec.num_blocks])
    w_rng, d_rng = (np.random.default_rng(s) for s in root.spawn(2))
    weights, _ = make_backbone(spec, w_rng)
    M = spec.n_train + spec.n_val + spec.n_test
    factors = (d_rng.random((M, spec.num_factors)) < 0.5).astype(np.float64)
    labels = spec.label_of(factors.sum(axis=1).astype(np.int64))
    images = make_images(spec, factors, d_rng)
    split = np.repeat(np.arange(3, dtype=np.uint8), [spec.n_train, spec.n_val, spec.n_test])
    return weights, Dataset(images, labels, split, spec.num_classes)
