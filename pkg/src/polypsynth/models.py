"""U-Net generator and multi-patch Wasserstein critic.

One topology serves both translation directions; the config scales it
from the full 256x256 layout down to 32x32 for tests. The generator
halves spatial extent with 4x4 stride-2 convolutions until a 1x1
bottleneck, then mirrors back up with transposed convolutions and skip
concatenations. The critic is a shared stride-2 trunk with a 1-channel
1x1-conv scoring head tapped at each configured patch resolution; scores
are unbounded (no sigmoid).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError
from .optim import ParamSet
from .tensor import RunningStats, Tensor

__all__ = [
    "NetConfig",
    "Generator",
    "Critic",
    "build_generator",
    "build_critic",
    "generator_forward",
    "critic_forward",
]

INIT_STD = 0.02


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class NetConfig:
    """Resolution/width/depth hyperparameters for generator and critic."""

    image_size: int = 256
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    width_cap: int = 512
    critic_levels: int = 4
    critic_patch_levels: Optional[Tuple[int, ...]] = None
    critic_norm: str = "batch"
    dropout_layers: int = 3
    dropout_rate: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        if not _is_pow2(self.image_size) or self.image_size < 32:
            raise ConfigError(
                f"image_size must be a power of two >= 32, got {self.image_size}"
            )
        if self.critic_norm not in ("batch", "none"):
            raise ConfigError(f"critic_norm must be batch|none, got {self.critic_norm!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32|float64, got {self.dtype!r}")
        if self.critic_levels < 1 or self.image_size >> self.critic_levels < 1:
            raise ConfigError(f"critic_levels {self.critic_levels} too deep for image_size")
        if self.critic_patch_levels is None:
            object.__setattr__(
                self, "critic_patch_levels", (self.image_size // 4, self.image_size // 16)
            )
        else:
            object.__setattr__(self, "critic_patch_levels", tuple(self.critic_patch_levels))
        for res in self.patch_levels():
            k = self.image_size // res
            if res < 1 or self.image_size % res or not _is_pow2(k) or k > 2**self.critic_levels or k < 2:
                raise ConfigError(
                    f"patch level {res} must equal image_size/2^k with 1 <= k <= critic_levels"
                )

    def patch_levels(self) -> Tuple[int, ...]:
        return self.critic_patch_levels

    @property
    def n_levels(self) -> int:
        """Encoder depth: halvings needed to reach the 1x1 bottleneck."""
        return int(np.log2(self.image_size))

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def encoder_widths(self) -> List[int]:
        return [min(self.base_width * 2**i, self.width_cap) for i in range(self.n_levels)]

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_width": self.base_width,
            "width_cap": self.width_cap,
            "critic_levels": self.critic_levels,
            "critic_patch_levels": list(self.patch_levels()),
            "critic_norm": self.critic_norm,
            "dropout_layers": self.dropout_layers,
            "dropout_rate": self.dropout_rate,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        d = dict(d)
        if d.get("critic_patch_levels") is not None:
            d["critic_patch_levels"] = tuple(d["critic_patch_levels"])
        return NetConfig(**d)


def _gaussian(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return (rng.normal(0.0, INIT_STD, size=shape)).astype(dtype)


class Generator:
    """Encoder-decoder with skip concatenations and a tanh output head."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamSet()
        self.stats: Dict[str, RunningStats] = {}
        dt = cfg.np_dtype()
        widths = cfg.encoder_widths()
        n = cfg.n_levels

        c_in = cfg.in_channels
        for i, w in enumerate(widths):
            self.params.add(f"enc{i}/kernel", _gaussian(rng, (w, c_in, 4, 4), dt))
            self.params.add(f"enc{i}/bias", np.zeros(w, dtype=dt))
            self.params.add(f"enc{i}/gamma", np.ones(w, dtype=dt))
            self.params.add(f"enc{i}/beta", np.zeros(w, dtype=dt))
            self.stats[f"enc{i}"] = RunningStats(w, dt)
            c_in = w

        for d in range(n):
            in_ch = widths[n - 1] if d == 0 else self._dec_out(d - 1) + widths[n - 1 - d]
            out_ch = self._dec_out(d)
            self.params.add(f"dec{d}/kernel", _gaussian(rng, (in_ch, out_ch, 4, 4), dt))
            self.params.add(f"dec{d}/bias", np.zeros(out_ch, dtype=dt))
            if d < n - 1:
                self.params.add(f"dec{d}/gamma", np.ones(out_ch, dtype=dt))
                self.params.add(f"dec{d}/beta", np.zeros(out_ch, dtype=dt))
                self.stats[f"dec{d}"] = RunningStats(out_ch, dt)

    def _dec_out(self, d: int) -> int:
        n = self.cfg.n_levels
        if d == n - 1:
            return self.cfg.out_channels
        return self.cfg.encoder_widths()[n - 2 - d]

    def forward(
        self,
        condition: Tensor,
        mode: str = "eval",
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        cfg = self.cfg
        s = cfg.image_size
        if condition.ndim != 4 or condition.shape[1] != cfg.in_channels or condition.shape[2:] != (s, s):
            raise ShapeError(
                f"generator expects [N,{cfg.in_channels},{s},{s}], got {condition.shape}"
            )
        if mode not in ("train", "eval"):
            raise ShapeError(f"mode must be train|eval, got {mode!r}")
        if mode == "train" and cfg.dropout_rate > 0 and rng is None:
            raise ShapeError("train-mode forward needs an rng for dropout")
        p = self.params
        n = cfg.n_levels

        skips = []
        x = condition
        for i in range(n):
            x = T.conv2d(x, p[f"enc{i}/kernel"], stride=2, pad=1)
            x = T.add(x, T.reshape(p[f"enc{i}/bias"], (1, -1, 1, 1)))
            x = T.batch_norm(
                x, p[f"enc{i}/gamma"], p[f"enc{i}/beta"],
                mode=mode, running_stats=self.stats[f"enc{i}"],
            )
            x = T.leaky_relu(x, 0.2)
            skips.append(x)

        x = skips[-1]
        for d in range(n):
            if d > 0:
                x = T.concat([x, skips[n - 1 - d]], axis=1)
            x = T.conv_transpose2d(x, p[f"dec{d}/kernel"], stride=2, pad=1)
            x = T.add(x, T.reshape(p[f"dec{d}/bias"], (1, -1, 1, 1)))
            if d < n - 1:
                x = T.batch_norm(
                    x, p[f"dec{d}/gamma"], p[f"dec{d}/beta"],
                    mode=mode, running_stats=self.stats[f"dec{d}"],
                )
                x = T.relu(x)
                if d < cfg.dropout_layers:
                    x = T.dropout(x, cfg.dropout_rate, mode, rng)
        return T.tanh(x)

    __call__ = forward

    # -- persistence ----------------------------------------------------
    def state_records(self, prefix: str = "gen/") -> Dict[str, np.ndarray]:
        rec = self.params.state_records(prefix)
        for name, st in self.stats.items():
            rec[f"{prefix}stats/{name}/mean"] = st.mean
            rec[f"{prefix}stats/{name}/var"] = st.var
        return rec

    def load_state_records(self, rec: Dict[str, np.ndarray], prefix: str = "gen/"):
        self.params.load_state_records(rec, prefix)
        for name, st in self.stats.items():
            st.mean = rec[f"{prefix}stats/{name}/mean"].astype(st.mean.dtype, copy=True)
            st.var = rec[f"{prefix}stats/{name}/var"].astype(st.var.dtype, copy=True)

    def save(self, path, extra_header: Optional[dict] = None):
        header = {"config": self.cfg.to_dict(), "kind": "generator"}
        if extra_header:
            header.update(extra_header)
        save_checkpoint(path, self.state_records(), header)

    @classmethod
    def load(cls, path) -> "Generator":
        header, rec = load_checkpoint(path)
        if "config" not in header:
            raise ConfigError(f"checkpoint {path} has no network config header")
        cfg = NetConfig.from_dict(header["config"])
        g = cls(cfg, np.random.default_rng(0))
        g.load_state_records(rec)
        return g


class Critic:
    """Stride-2 conv trunk with one unbounded patch-score head per level."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamSet()
        self.stats: Dict[str, RunningStats] = {}
        dt = cfg.np_dtype()

        c_in = 2 * cfg.in_channels  # condition and candidate, channel-stacked
        for b in range(cfg.critic_levels):
            w = min(cfg.base_width * 2**b, cfg.width_cap)
            self.params.add(f"blk{b}/kernel", _gaussian(rng, (w, c_in, 4, 4), dt))
            self.params.add(f"blk{b}/bias", np.zeros(w, dtype=dt))
            if cfg.critic_norm == "batch":
                self.params.add(f"blk{b}/gamma", np.ones(w, dtype=dt))
                self.params.add(f"blk{b}/beta", np.zeros(w, dtype=dt))
                self.stats[f"blk{b}"] = RunningStats(w, dt)
            c_in = w
        for res in cfg.patch_levels():
            w = self._trunk_width_at(res)
            self.params.add(f"head{res}/kernel", _gaussian(rng, (1, w, 1, 1), dt))
            self.params.add(f"head{res}/bias", np.zeros(1, dtype=dt))

    def _trunk_width_at(self, res: int) -> int:
        k = int(np.log2(self.cfg.image_size // res))
        return min(self.cfg.base_width * 2 ** (k - 1), self.cfg.width_cap)

    def forward(self, condition: Tensor, image: Tensor, mode: str = "train") -> List[Tensor]:
        cfg = self.cfg
        s = cfg.image_size
        if condition.shape != image.shape:
            raise ShapeError(
                f"critic: condition {condition.shape} and image {image.shape} must match"
            )
        if condition.ndim != 4 or condition.shape[2:] != (s, s):
            raise ShapeError(f"critic expects [N,C,{s},{s}] inputs, got {condition.shape}")
        p = self.params
        want = {res: idx for idx, res in enumerate(cfg.patch_levels())}
        maps: List[Optional[Tensor]] = [None] * len(want)

        x = T.concat([condition, image], axis=1)
        res = s
        for b in range(cfg.critic_levels):
            x = T.conv2d(x, p[f"blk{b}/kernel"], stride=2, pad=1)
            x = T.add(x, T.reshape(p[f"blk{b}/bias"], (1, -1, 1, 1)))
            if cfg.critic_norm == "batch":
                x = T.batch_norm(
                    x, p[f"blk{b}/gamma"], p[f"blk{b}/beta"],
                    mode=mode, running_stats=self.stats[f"blk{b}"],
                )
            x = T.leaky_relu(x, 0.2)
            res //= 2
            if res in want:
                score = T.conv2d(x, p[f"head{res}/kernel"], stride=1, pad=0)
                score = T.add(score, T.reshape(p[f"head{res}/bias"], (1, -1, 1, 1)))
                maps[want[res]] = score
        return list(maps)  # one per configured patch level, config order

    __call__ = forward

    def state_records(self, prefix: str = "critic/") -> Dict[str, np.ndarray]:
        rec = self.params.state_records(prefix)
        for name, st in self.stats.items():
            rec[f"{prefix}stats/{name}/mean"] = st.mean
            rec[f"{prefix}stats/{name}/var"] = st.var
        return rec

    def load_state_records(self, rec: Dict[str, np.ndarray], prefix: str = "critic/"):
        self.params.load_state_records(rec, prefix)
        for name, st in self.stats.items():
            st.mean = rec[f"{prefix}stats/{name}/mean"].astype(st.mean.dtype, copy=True)
            st.var = rec[f"{prefix}stats/{name}/var"].astype(st.var.dtype, copy=True)


def build_generator(cfg: NetConfig, rng: np.random.Generator) -> Generator:
    """Fresh generator with N(0, 0.02) kernel init; deterministic per rng state."""
    return Generator(cfg, rng)


def build_critic(cfg: NetConfig, rng: np.random.Generator) -> Critic:
    return Critic(cfg, rng)


def generator_forward(
    g: Generator, condition: Tensor, mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    return g.forward(condition, mode, rng)


def critic_forward(d: Critic, condition: Tensor, image: Tensor, mode: str = "train") -> List[Tensor]:
    return d.forward(condition, image, mode)
