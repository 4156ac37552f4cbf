"""Scalar energy over (context, action-trajectory) pairs.

Two interchangeable backbones score how well an action chunk fits an
encoded observation window: a flat MLP and a small transformer whose action
tokens cross-attend to the context. The same trunk, with the scalar head
swapped for an ``n*d_a`` output, serves as the diffusion baseline's noise
predictor, keeping parameter counts comparable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class EnergyModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "mlp"          # "mlp" | "transformer"
    d_obs: int = 6                 # per-step observation width
    window: int = 2                # observation history length h
    horizon: int = 8               # predicted action steps n
    d_action: int = 2
    d_embed: int = 64              # context embedding width
    enc_hidden: int = 128
    mlp_hidden: int = 256
    mlp_depth: int = 3
    tf_blocks: int = 2
    tf_width: int = 64
    tf_heads: int = 4
    tf_memory_slots: int = 4       # context vector is projected to this many KV slots
    tf_mlp_hidden: int = 256
    head: str = "scalar"           # "scalar" (energy) | "vector" (noise prediction)

    @property
    def flat_action_dim(self) -> int:
        return self.horizon * self.d_action

    @property
    def out_dim(self) -> int:
        return 1 if self.head == "scalar" else self.flat_action_dim


def sinusoidal_embedding(t: int, width: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos position code, used for diffusion timestep conditioning."""
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < width:
        emb = np.concatenate([emb, np.zeros(width - emb.size)])
    return emb


class EnergyModel:
    """Context encoder plus energy (or noise-prediction) decoder.

    Parameters live in an ordered name->Tensor dict; evaluation is pure, so
    concurrent reads are safe as long as nothing is training the weights.
    """

    MAGIC = b"EBPC"
    VERSION = 1

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        init = rng if rng is not None else None
        self._build(init)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, shape: tuple[int, ...], rng, scale: float | None = None):
        if rng is None:
            data = np.zeros(shape)
        else:
            if scale is None:
                fan_in = shape[0] if len(shape) > 1 else shape[0]
                scale = 1.0 / np.sqrt(max(fan_in, 1))
            data = rng.standard_normal(shape) * scale
        self.params[name] = Tensor(data, requires_grad=True)

    def _build(self, rng):
        cfg = self.cfg
        d_in = cfg.window * cfg.d_obs
        self._add("enc.0.w", (d_in, cfg.enc_hidden), rng)
        self._add("enc.0.b", (cfg.enc_hidden,), rng, scale=0.0)
        self._add("enc.1.w", (cfg.enc_hidden, cfg.d_embed), rng)
        self._add("enc.1.b", (cfg.d_embed,), rng, scale=0.0)

        if cfg.backbone == "mlp":
            width = cfg.mlp_hidden
            d0 = cfg.d_embed + cfg.flat_action_dim
            for i in range(cfg.mlp_depth):
                self._add(f"dec.{i}.w", (d0 if i == 0 else width, width), rng)
                self._add(f"dec.{i}.b", (width,), rng, scale=0.0)
            self._add("head.w", (width, cfg.out_dim), rng, scale=1e-3)
            self._add("head.b", (cfg.out_dim,), rng, scale=0.0)
        elif cfg.backbone == "transformer":
            w = cfg.tf_width
            self._add("tok.w", (cfg.d_action, w), rng)
            self._add("tok.b", (w,), rng, scale=0.0)
            self._add("pos", (cfg.horizon, w), rng, scale=0.02)
            self._add("mem.w", (cfg.d_embed, cfg.tf_memory_slots * w), rng)
            self._add("mem.b", (cfg.tf_memory_slots * w,), rng, scale=0.0)
            for b in range(cfg.tf_blocks):
                for nm in ("wq", "wk", "wv", "wo"):
                    self._add(f"blk{b}.attn.{nm}", (w, w), rng)
                self._add(f"blk{b}.mlp.0.w", (w, cfg.tf_mlp_hidden), rng)
                self._add(f"blk{b}.mlp.0.b", (cfg.tf_mlp_hidden,), rng, scale=0.0)
                self._add(f"blk{b}.mlp.1.w", (cfg.tf_mlp_hidden, w), rng)
                self._add(f"blk{b}.mlp.1.b", (w,), rng, scale=0.0)
            self._add("head.w", (w, cfg.out_dim), rng, scale=1e-3)
            self._add("head.b", (cfg.out_dim,), rng, scale=0.0)
        else:
            raise EnergyModelError(f"unknown backbone {cfg.backbone!r}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def encode(self, windows: np.ndarray) -> Tensor:
        """Map observation windows (B,h,d_obs) to context embeddings (B,d_embed)."""
        cfg = self.cfg
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 2:
            windows = windows[None]
        if windows.shape[1:] != (cfg.window, cfg.d_obs):
            raise EnergyModelError(
                f"window shape {windows.shape[1:]} != ({cfg.window}, {cfg.d_obs})"
            )
        x = Tensor(windows.reshape(windows.shape[0], -1))
        h = dc.gelu(x @ self.params["enc.0.w"] + self.params["enc.0.b"])
        return h @ self.params["enc.1.w"] + self.params["enc.1.b"]

    def _decode(self, z: Tensor, y: Tensor) -> Tensor:
        cfg = self.cfg
        if cfg.backbone == "mlp":
            h = dc.concatenate([z, y], axis=1)
            for i in range(cfg.mlp_depth):
                try:
                    h = dc.gelu(h @ self.params[f"dec.{i}.w"] + self.params[f"dec.{i}.b"])
                except dc.DiffcoreError as e:
                    raise EnergyModelError(f"decoder layer {i}: {e}") from e
            return h @ self.params["head.w"] + self.params["head.b"]

        B = y.shape[0]
        w, nh = cfg.tf_width, cfg.tf_heads
        dh = w // nh
        tokens = dc.reshape(y, (B, cfg.horizon, cfg.d_action))
        tokens = tokens @ self.params["tok.w"] + self.params["tok.b"] + self.params["pos"]
        mem = z @ self.params["mem.w"] + self.params["mem.b"]
        mem = dc.reshape(mem, (B, cfg.tf_memory_slots, w))

        def split_heads(t: Tensor, n_tok: int) -> Tensor:
            return dc.transpose(dc.reshape(t, (B, n_tok, nh, dh)), 1, 2)

        for b in range(cfg.tf_blocks):
            try:
                tn = dc.rms_normalize(tokens, axis=-1)
                mn = dc.rms_normalize(mem, axis=-1)
                q = split_heads(tn @ self.params[f"blk{b}.attn.wq"], cfg.horizon)
                k = split_heads(mn @ self.params[f"blk{b}.attn.wk"], cfg.tf_memory_slots)
                v = split_heads(mn @ self.params[f"blk{b}.attn.wv"], cfg.tf_memory_slots)
                scores = (q @ dc.transpose(k, -1, -2)) * (1.0 / np.sqrt(dh))
                att = dc.softmax(scores, axis=-1) @ v
                att = dc.reshape(dc.transpose(att, 1, 2), (B, cfg.horizon, w))
                tokens = tokens + att @ self.params[f"blk{b}.attn.wo"]
                hn = dc.rms_normalize(tokens, axis=-1)
                hid = dc.gelu(hn @ self.params[f"blk{b}.mlp.0.w"] + self.params[f"blk{b}.mlp.0.b"])
                tokens = tokens + hid @ self.params[f"blk{b}.mlp.1.w"] + self.params[f"blk{b}.mlp.1.b"]
            except dc.DiffcoreError as e:
                raise EnergyModelError(f"block {b}: {e}") from e
        pooled = dc.reduce_mean(tokens, axis=1)
        return pooled @ self.params["head.w"] + self.params["head.b"]

    def energy(self, z: Tensor, y: Tensor) -> Tensor:
        """Per-sample scalar energies, shape (B,)."""
        if self.cfg.head != "scalar":
            raise EnergyModelError("energy() requires the scalar head")
        out = self._decode(z, y)
        return dc.reshape(out, (out.shape[0],))

    def predict(self, z: Tensor, y: Tensor) -> Tensor:
        """Vector-head output (B, n*d_a); the diffusion baseline's noise estimate."""
        if self.cfg.head != "vector":
            raise EnergyModelError("predict() requires the vector head")
        return self._decode(z, y)

    def energy_grad(self, z: Tensor, y: Tensor, create_graph: bool = False) -> Tensor:
        """Gradient of summed energy w.r.t. y; rows are per-sample gradients."""
        e = self.energy(z, y)
        return dc.grad(dc.reduce_sum(e), [y], create_graph=create_graph)[0]

    # -- checkpoint io ------------------------------------------------------
    # Layout (little-endian): magic "EBPC", u32 version, u32 json length,
    # config json (sorted keys), u32 tensor count, then per tensor a u16
    # name length + name, u8 ndim, u32 dims; finally all payloads as
    # contiguous float64 in table order.

    def save(self, path) -> None:
        desc = json.dumps(asdict(self.cfg), sort_keys=True, separators=(",", ":")).encode()
        with open(path, "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<I", self.VERSION))
            f.write(struct.pack("<I", len(desc)))
            f.write(desc)
            f.write(struct.pack("<I", len(self.params)))
            for name, p in self.params.items():
                nb = name.encode()
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                f.write(struct.pack("<B", p.ndim))
                for d in p.shape:
                    f.write(struct.pack("<I", d))
            for p in self.params.values():
                f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "EnergyModel":
        with open(path, "rb") as f:
            if f.read(4) != cls.MAGIC:
                raise EnergyModelError(f"bad checkpoint magic in {path}")
            (version,) = struct.unpack("<I", f.read(4))
            if version != cls.VERSION:
                raise EnergyModelError(f"unsupported checkpoint version {version}")
            (jlen,) = struct.unpack("<I", f.read(4))
            cfg = ModelConfig(**json.loads(f.read(jlen).decode()))
            (count,) = struct.unpack("<I", f.read(4))
            table = []
            for _ in range(count):
                (nlen,) = struct.unpack("<H", f.read(2))
                name = f.read(nlen).decode()
                (ndim,) = struct.unpack("<B", f.read(1))
                dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
                table.append((name, dims))
            model = cls(cfg, rng=None)
            for name, dims in table:
                n = int(np.prod(dims)) if dims else 1
                raw = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
                if name not in model.params:
                    raise EnergyModelError(f"unknown tensor {name!r} in checkpoint")
                model.params[name] = Tensor(raw.copy(), requires_grad=True)
        return model


class QuadraticEnergy:
    """Analytic test double: E(y) = 0.5 * ||y - mu||^2, ignoring the context.

    Its gradient field y - mu is exact, which makes it the convergence oracle
    for the refinement chain and the dynamic-inference cutoff.
    """

    def __init__(self, mu: np.ndarray, d_embed: int = 8):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1)
        self.d_embed = d_embed
        self.cfg = ModelConfig(
            backbone="mlp", d_embed=d_embed,
            horizon=1, d_action=self.mu.size,
        )
        self.params: dict[str, Tensor] = {}

    def encode(self, windows: np.ndarray) -> Tensor:
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim == 2:
            windows = windows[None]
        return Tensor(np.zeros((windows.shape[0], self.d_embed)))

    def energy(self, z: Tensor, y: Tensor) -> Tensor:
        d = y - Tensor(self.mu[None, :])
        return dc.reduce_sum(dc.mul(d, d), axis=1) * 0.5

    def energy_grad(self, z: Tensor, y: Tensor, create_graph: bool = False) -> Tensor:
        e = self.energy(z, y)
        return dc.grad(dc.reduce_sum(e), [y], create_graph=create_graph)[0]

    def parameters(self) -> list[Tensor]:
        return []
