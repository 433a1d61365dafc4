"""Toy vision transformer with per-block prompt injection.

Prompts enter a block as extra key/value tokens.  Their attention logits
carry an additive ``log ||p||`` term (proportional attention with the prompt
norm as token size), so a prompt shrinking to zero leaves the block exactly
as if it were absent.  Prompts get no position encoding.

Token order inside a block is [cls, patches, prompts]; attention does not
depend on order, and prompt outputs are dropped after each block except in
:meth:`PromptedViT.forward_shallow`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

# a zero prompt gets a logit of about -690, i.e. exactly zero attention weight
_TINY = 1e-300

__all__ = ["VitConfig", "VitWeights", "PromptedViT", "prompt_init"]


@dataclass(frozen=True)
class VitConfig:
    num_blocks: int = 6
    embed_dim: int = 32
    num_heads: int = 2
    patch_size: int = 4
    image_size: int = 16
    channels: int = 1
    num_classes: int = 3
    mlp_ratio: float = 2.0
    drop_rate: float = 0.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("num_blocks", "embed_dim", "num_heads", "patch_size", "image_size",
                     "channels", "num_classes"):
            if int(getattr(self, name)) <= 0:
                raise ContractError(f"{name} must be a positive integer")
        if self.embed_dim % self.num_heads:
            raise ContractError("embed_dim must be divisible by num_heads")
        if self.image_size % self.patch_size:
            raise ContractError("image_size must be a multiple of patch_size")
        if self.mlp_ratio <= 0:
            raise ContractError("mlp_ratio must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    def to_dict(self) -> dict:
        return asdict(self)


def prompt_init(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Xavier-uniform prompt values, bound sqrt(6 / (d + d))."""
    r = np.sqrt(6.0 / (d + d))
    return rng.uniform(-r, r, size=(n, d))


def _xavier(rng, n_in, n_out):
    r = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-r, r, size=(n_in, n_out))


@dataclass
class VitWeights:
    """Named parameter arrays.  Only ``head.*`` is trainable by default."""

    cfg: VitConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    TRAINABLE_PREFIXES = ("head.",)

    @classmethod
    def init(cls, cfg: VitConfig, rng: np.random.Generator, head_scale: float = 1.0) -> "VitWeights":
        d, P, C = cfg.embed_dim, cfg.patch_size, cfg.channels
        arrays: dict[str, np.ndarray] = {
            "patch.W": _xavier(rng, P * P * C, d),
            "patch.b": np.zeros(d),
            "pos": 0.02 * rng.standard_normal((cfg.num_patches, d)),
            "cls": 0.02 * rng.standard_normal(d),
        }
        for i in range(1, cfg.num_blocks + 1):
            arrays.update({
                f"blocks.{i}.ln1.g": np.ones(d),
                f"blocks.{i}.ln1.b": np.zeros(d),
                f"blocks.{i}.attn.Wqkv": _xavier(rng, d, 3 * d),
                f"blocks.{i}.attn.bqkv": np.zeros(3 * d),
                f"blocks.{i}.attn.Wo": _xavier(rng, d, d),
                f"blocks.{i}.attn.bo": np.zeros(d),
                f"blocks.{i}.ln2.g": np.ones(d),
                f"blocks.{i}.ln2.b": np.zeros(d),
                f"blocks.{i}.mlp.W1": _xavier(rng, d, cfg.mlp_dim),
                f"blocks.{i}.mlp.b1": np.zeros(cfg.mlp_dim),
                f"blocks.{i}.mlp.W2": _xavier(rng, cfg.mlp_dim, d),
                f"blocks.{i}.mlp.b2": np.zeros(d),
            })
        arrays["norm.g"] = np.ones(d)
        arrays["norm.b"] = np.zeros(d)
        arrays["head.W"] = head_scale * _xavier(rng, d, cfg.num_classes)
        arrays["head.b"] = np.zeros(cfg.num_classes)
        return cls.from_arrays(cfg, arrays)

    @classmethod
    def from_arrays(cls, cfg: VitConfig, arrays: dict[str, np.ndarray]) -> "VitWeights":
        params = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=k.startswith(cls.TRAINABLE_PREFIXES),
                            name=k)
                  for k, v in arrays.items()}
        w = cls(cfg, params)
        w.validate()
        return w

    def validate(self) -> None:
        cfg = self.cfg
        d, h = cfg.embed_dim, cfg.mlp_dim
        expect = {
            "patch.W": (cfg.patch_size ** 2 * cfg.channels, d), "patch.b": (d,),
            "pos": (cfg.num_patches, d), "cls": (d,), "norm.g": (d,), "norm.b": (d,),
            "head.W": (d, cfg.num_classes), "head.b": (cfg.num_classes,),
        }
        for i in range(1, cfg.num_blocks + 1):
            expect.update({
                f"blocks.{i}.ln1.g": (d,), f"blocks.{i}.ln1.b": (d,),
                f"blocks.{i}.attn.Wqkv": (d, 3 * d), f"blocks.{i}.attn.bqkv": (3 * d,),
                f"blocks.{i}.attn.Wo": (d, d), f"blocks.{i}.attn.bo": (d,),
                f"blocks.{i}.ln2.g": (d,), f"blocks.{i}.ln2.b": (d,),
                f"blocks.{i}.mlp.W1": (d, h), f"blocks.{i}.mlp.b1": (h,),
                f"blocks.{i}.mlp.W2": (h, d), f"blocks.{i}.mlp.b2": (d,),
            })
        missing = set(expect) - set(self.params)
        if missing:
            raise ContractError(f"missing weights: {sorted(missing)[:5]}")
        for k, shp in expect.items():
            if self.params[k].shape != shp:
                raise ContractError(f"weight {k} has shape {self.params[k].shape}, expected {shp}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def copy(self) -> "VitWeights":
        return VitWeights.from_arrays(self.cfg, self.to_arrays())


def _as_assignments(dist, n: int) -> np.ndarray:
    a = np.asarray(getattr(dist, "assignments", dist), dtype=np.int64)
    if a.shape != (n,):
        raise ContractError(f"distribution has {a.shape} entries for {n} prompts")
    return a


def _as_prompt_tensor(prompts) -> Tensor:
    p = getattr(prompts, "tensor", prompts)
    return p if isinstance(p, Tensor) else Tensor(p)


class PromptedViT:
    """Forward passes of the frozen backbone under a prompt distribution."""

    def __init__(self, cfg: VitConfig, weights: VitWeights):
        if weights.cfg != cfg:
            raise ContractError("weights were built for a different config")
        self.cfg = cfg
        self.w = weights

    # -- pieces ----------------------------------------------------------
    def _images(self, image) -> np.ndarray:
        cfg = self.cfg
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 2:
            x = x[None, :, :, None]
        elif x.ndim == 3:
            x = x[None] if x.shape[-1] == cfg.channels and x.shape[0] == cfg.image_size else x[..., None]
        if x.ndim != 4 or x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ContractError(
                f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}), got {np.shape(image)}")
        return x

    def patchify(self, image) -> np.ndarray:
        x = self._images(image)
        B, P, g = x.shape[0], self.cfg.patch_size, self.cfg.image_size // self.cfg.patch_size
        x = x.reshape(B, g, P, g, P, self.cfg.channels).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(B, g * g, P * P * self.cfg.channels)

    def patch_embed(self, image) -> Tensor:
        """E_0: (B, n_e, d) patch tokens with position encodings added."""
        w = self.w
        return Tensor(self.patchify(image)) @ w["patch.W"] + w["patch.b"] + w["pos"]

    def _embed(self, image) -> Tensor:
        E0 = self.patch_embed(image)
        B = E0.shape[0]
        cls = Tensor(np.ones((B, 1, 1))) * self.w["cls"].reshape(1, 1, -1)
        return ad.concat([cls, E0], axis=1)

    def _ln(self, x: Tensor, g: Tensor, b: Tensor) -> Tensor:
        return ad.layer_norm(x, self.cfg.ln_eps) * g + b

    def _heads(self, t: Tensor) -> Tensor:
        # (..., T, d) -> (..., h, T, dh)
        cfg = self.cfg
        shp = t.shape
        t = t.reshape(*shp[:-1], cfg.num_heads, cfg.head_dim)
        nd = t.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return t.transpose(axes)

    def _block(self, x: Tensor, i: int, prompts: Tensor | None = None, key_bias: Tensor | None = None,
               trace: dict | None = None, rng=None) -> Tensor:
        """One pre-LN transformer block.

        ``x`` (B, T, d) are query and key tokens; ``key_bias`` (T,) is added to
        their logits.  ``prompts`` (n, d) are key/value-only tokens whose
        logits get ``log ||p||``.
        """
        cfg, w = self.cfg, self.w
        pre = f"blocks.{i}."
        d, dh = cfg.embed_dim, cfg.head_dim
        B, T, _ = x.shape
        Wqkv, bqkv = w[pre + "attn.Wqkv"], w[pre + "attn.bqkv"]
        h = self._ln(x, w[pre + "ln1.g"], w[pre + "ln1.b"])
        qkv = h @ Wqkv + bqkv
        q = self._heads(qkv[..., 0:d])
        k = self._heads(qkv[..., d:2 * d])
        v = self._heads(qkv[..., 2 * d:])
        scale = 1.0 / np.sqrt(dh)
        logits = (q @ k.transpose(0, 1, 3, 2)) * scale
        if key_bias is not None:
            logits = logits + key_bias.reshape(1, 1, 1, T)
        n = 0 if prompts is None else prompts.shape[0]
        if n:
            hp = self._ln(prompts, w[pre + "ln1.g"], w[pre + "ln1.b"])
            kv_p = hp @ Wqkv[:, d:] + bqkv[d:]
            kp = self._heads(kv_p[:, 0:d])          # (h, n, dh)
            vp = self._heads(kv_p[:, d:])
            logmass = (prompts * prompts).sum(axis=-1).clip(_TINY, np.inf).log() * 0.5
            lp = (q @ kp.transpose(0, 2, 1)) * scale + logmass.reshape(1, 1, 1, n)
            probs = ad.softmax(ad.concat([logits, lp], axis=-1), axis=-1)
            att = probs[..., :T] @ v + probs[..., T:] @ vp
        else:
            probs = ad.softmax(logits, axis=-1)
            att = probs @ v
        if trace is not None:
            trace.setdefault("probs", []).append(probs.data)
        att = att.transpose(0, 2, 1, 3).reshape(B, T, d)
        out = att @ w[pre + "attn.Wo"] + w[pre + "attn.bo"]
        out = self._dropout(out, rng)
        x = x + out
        h2 = self._ln(x, w[pre + "ln2.g"], w[pre + "ln2.b"])
        m = ad.gelu(h2 @ w[pre + "mlp.W1"] + w[pre + "mlp.b1"])
        m = self._dropout(m, rng) @ w[pre + "mlp.W2"] + w[pre + "mlp.b2"]
        return x + m

    def _dropout(self, t: Tensor, rng) -> Tensor:
        p = self.cfg.drop_rate
        if rng is None or p <= 0.0:
            return t
        keep = (rng.random(t.shape) >= p) / (1.0 - p)
        return t * keep

    def _head(self, x: Tensor) -> Tensor:
        w = self.w
        cls = x[:, 0, :]
        return self._ln(cls, w["norm.g"], w["norm.b"]) @ w["head.W"] + w["head.b"]

    # -- public forward passes -------------------------------------------
    def forward(self, image, prompts=None, dist=None, rng=None, trace: dict | None = None) -> Tensor:
        """Logits under an arbitrary distribution (prompt outputs discarded)."""
        x = self._embed(image)
        blocks = self._block_prompts(prompts, dist)
        for i in range(1, self.cfg.num_blocks + 1):
            x = self._block(x, i, prompts=blocks.get(i), trace=trace, rng=rng)
        return self._head(x)

    def forward_shallow(self, image, prompts, rng=None, trace: dict | None = None) -> Tensor:
        """All prompts at block 1 with their outputs retained through later blocks."""
        P = _as_prompt_tensor(prompts)
        x = self._embed(image)
        n = P.shape[0] if P.ndim == 2 else 0
        if n == 0:
            for i in range(1, self.cfg.num_blocks + 1):
                x = self._block(x, i, trace=trace, rng=rng)
            return self._head(x)
        self._check_prompt_dim(P)
        B, T0 = x.shape[0], x.shape[1]
        Pb = Tensor(np.ones((B, 1, 1))) * P.reshape(1, n, -1)
        x = ad.concat([x, Pb], axis=1)
        logmass = (P * P).sum(axis=-1).clip(_TINY, np.inf).log() * 0.5
        bias = ad.concat([Tensor(np.zeros(T0)), logmass], axis=0)
        for i in range(1, self.cfg.num_blocks + 1):
            x = self._block(x, i, key_bias=bias, trace=trace, rng=rng)
        return self._head(x)

    def cls_prompt_attention(self, image, prompts, dist) -> list[dict]:
        """Per block: head-averaged softmax weight from the cls token to each prompt.

        Returns one dict per block with ``prompts`` (indices placed there),
        ``weights`` (B, n_i) and ``row`` (B, heads, T) the full cls row.
        """
        a = _as_assignments(dist, _as_prompt_tensor(prompts).shape[0]) if prompts is not None else None
        trace: dict = {}
        with ad.no_grad():
            self.forward(image, prompts, dist, trace=trace)
        out = []
        T = 1 + self.cfg.num_patches
        for i, probs in enumerate(trace["probs"], start=1):
            idx = [] if a is None else [int(k) for k in np.flatnonzero(a == i)]
            row = probs[:, :, 0, :]
            out.append({"block": i, "prompts": idx, "weights": row[:, :, T:].mean(axis=1), "row": row})
        return out

    def loss(self, images, labels, prompts=None, dist=None, rng=None) -> Tensor:
        return ad.cross_entropy(self.forward(images, prompts, dist, rng=rng), labels)

    def loss_value(self, images, labels, prompts=None, dist=None) -> float:
        with ad.no_grad():
            return self.loss(images, labels, prompts, dist).item()

    def predict(self, images, prompts=None, dist=None, batch: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for s in range(0, len(images), batch):
                out.append(self.forward(images[s:s + batch], prompts, dist).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # -- helpers -----------------------------------------------------------
    def _check_prompt_dim(self, P: Tensor) -> None:
        if P.ndim != 2 or P.shape[1] != self.cfg.embed_dim:
            raise ContractError(f"prompts must be (N, {self.cfg.embed_dim}), got {P.shape}")

    def _block_prompts(self, prompts, dist) -> dict[int, Tensor]:
        if prompts is None:
            return {}
        P = _as_prompt_tensor(prompts)
        self._check_prompt_dim(P)
        a = _as_assignments(dist, P.shape[0])
        L = self.cfg.num_blocks
        if a.size and (a.min() < 0 or a.max() > L):
            raise ContractError(f"assignments must lie in [0, {L}]")
        out = {}
        for i in range(1, L + 1):
            idx = np.flatnonzero(a == i)
            if idx.size:
                out[i] = ad.take(P, idx, axis=0)
        return out
