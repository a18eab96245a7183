"""Adversarial training: multi-patch Wasserstein critic with gradient
penalty plus L1 reconstruction, alternating critic/generator Adam steps.

The gradient penalty differentiates the critic's input gradients a second
time, which rides on ``backward(..., create_graph=True)`` from the tensor
engine.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import ConditionedPair, PolypSample, ValueAssignment, assign_values, bilinear_resize, build_n2p_sample, build_p2n_sample
from .errors import ConfigError, DataError, NumericError, ShapeError
from .models import Critic, Generator, NetConfig, build_critic, build_generator
from .optim import adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "LossWeights",
    "TrainConfig",
    "TrainResult",
    "jitter",
    "default_jitter_resize",
    "pair_to_tensors",
    "critic_loss",
    "gradient_penalty",
    "generator_loss",
    "train",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,task,critic_loss,gp,gen_adv,gen_l1,total"

JITTER_FACTOR = 1.21875  # 312/256, the upscale-before-crop ratio


@dataclass(frozen=True)
class LossWeights:
    lambda_reconst: float = 100.0
    lambda_gp: float = 10.0
    patch_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.lambda_reconst < 0 or self.lambda_gp < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.patch_weights is not None and any(w < 0 for w in self.patch_weights):
            raise ConfigError("patch weights must be >= 0")

    def head_weights(self, n_heads: int) -> Tuple[float, ...]:
        if self.patch_weights is None:
            return (1.0,) * n_heads
        if len(self.patch_weights) != n_heads:
            raise ConfigError(
                f"{len(self.patch_weights)} patch weights for {n_heads} critic heads"
            )
        return tuple(self.patch_weights)


def default_jitter_resize(image_size: int) -> int:
    return int(round(JITTER_FACTOR * image_size))


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    critic_iters_per_gen: int = 5
    jitter_resize: Optional[int] = None
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch statistics need it)")
        if self.critic_iters_per_gen < 0:
            raise ConfigError("critic_iters_per_gen must be >= 0")

    def resolved_jitter(self, image_size: int) -> int:
        r = self.jitter_resize if self.jitter_resize is not None else default_jitter_resize(image_size)
        # equality is the degenerate no-op case (identity resize, zero offset)
        if r < image_size:
            raise ConfigError(f"jitter_resize {r} must not undercut image_size {image_size}")
        return r


# ---------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------

def jitter(pair: ConditionedPair, cfg: TrainConfig, rng: np.random.Generator) -> ConditionedPair:
    """Upscale both images of a pair then crop back at one shared offset."""
    h, w = pair.condition.shape[:2]
    if pair.target.shape[:2] != (h, w):
        raise DataError("jitter: condition/target extents differ")
    big = cfg.resolved_jitter(h)
    cond = bilinear_resize(pair.condition, big, big)
    targ = bilinear_resize(pair.target, big, big)
    top = int(rng.integers(0, big - h + 1))
    left = int(rng.integers(0, big - w + 1))
    return ConditionedPair(
        condition=cond[top : top + h, left : left + w],
        target=targ[top : top + h, left : left + w],
    )


def _to_unit(img: np.ndarray, dtype) -> np.ndarray:
    """[0,255] HWC raster to [-1,1] CHW array."""
    arr = np.asarray(img, dtype=np.float64) / 127.5 - 1.0
    return arr.transpose(2, 0, 1).astype(dtype)


def pair_to_tensors(pairs: Sequence[ConditionedPair], dtype=np.float32) -> Tuple[Tensor, Tensor]:
    cond = np.stack([_to_unit(p.condition, dtype) for p in pairs])
    targ = np.stack([_to_unit(p.target, dtype) for p in pairs])
    return Tensor(cond), Tensor(targ)


# ---------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------

def _head_means(score_maps: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum over heads of the per-map mean score (scalar)."""
    total = None
    for score, w in zip(score_maps, weights):
        term = T.mul(T.mean(score), float(w))
        total = term if total is None else T.add(total, term)
    return total


def _per_sample_scores(score_maps: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum over heads of each sample's mean score, shape [N]."""
    total = None
    for score, w in zip(score_maps, weights):
        term = T.mul(T.mean(score, axis=(1, 2, 3)), float(w))
        total = term if total is None else T.add(total, term)
    return total


def gradient_penalty(
    d,
    cond: Tensor,
    real: Tensor,
    fake: Tensor,
    rng: np.random.Generator,
    patch_weights: Optional[Sequence[float]] = None,
) -> Tensor:
    """Mean over samples of (||d score / d interpolate||_2 - 1)^2.

    ``d`` is anything callable as ``d(cond, x) -> [score maps]``. The
    interpolate gradient is taken per sample with a graph-building
    backward pass, so the result stays differentiable w.r.t. the critic's
    parameters.
    """
    if not T.is_grad_enabled():
        raise ShapeError(
            "gradient_penalty: needs graph recording enabled to differentiate "
            "the critic's scores"
        )
    n = real.shape[0]
    eps = rng.uniform(0.0, 1.0, size=(n, 1, 1, 1)).astype(real.dtype)
    xh = T.lerp(real, fake, Tensor(eps)).detach().requires_grad_(True)
    maps = d(cond, xh)
    weights = (1.0,) * len(maps) if patch_weights is None else tuple(patch_weights)
    # batch-summed score keeps per-sample gradients independent
    score = T.tensor_sum(_per_sample_scores(maps, weights))
    g = T.backward(score, xh, create_graph=True)
    sq = T.tensor_sum(T.mul(g, g), axis=(1, 2, 3))
    norm = T.sqrt(sq)
    gap = T.sub(norm, 1.0)
    return T.mean(T.mul(gap, gap))


def critic_loss(
    d,
    cond: Tensor,
    real: Tensor,
    fake: Tensor,
    w: LossWeights,
    rng: np.random.Generator,
) -> Tuple[Tensor, Dict[str, float]]:
    """Wasserstein gap summed over patch heads plus the gradient penalty.

    ``fake`` must already be detached from the generator graph.
    """
    if fake.requires_grad:
        raise ConfigError("critic_loss: fake images must be detached from the generator")
    fake_maps = d(cond, fake)
    real_maps = d(cond, real)
    weights = w.head_weights(len(fake_maps))
    gap = T.sub(_head_means(fake_maps, weights), _head_means(real_maps, weights))
    if w.lambda_gp > 0:
        gp = gradient_penalty(d, cond, real, fake, rng, weights)
        loss = T.add(gap, T.mul(gp, w.lambda_gp))
        gp_val = gp.item()
    else:
        loss = gap
        gp_val = 0.0
    return loss, {"gap": gap.item(), "gp": gp_val}


def generator_loss(
    g: Generator,
    d,
    cond: Tensor,
    target: Tensor,
    w: LossWeights,
    rng: Optional[np.random.Generator] = None,
    mode: str = "train",
) -> Tuple[Tensor, Dict[str, float]]:
    """Adversarial term (negated critic score on fakes) plus weighted L1."""
    fake = g.forward(cond, mode, rng)
    maps = d(cond, fake)
    weights = w.head_weights(len(maps))
    adv = T.neg(_head_means(maps, weights))
    l1 = T.mean(T.absolute(T.sub(fake, target)))
    loss = T.add(adv, T.mul(l1, w.lambda_reconst))
    parts = {"adv": adv.item(), "l1": l1.item()}
    # logged total recomposes exactly from the logged components
    parts["total"] = parts["adv"] + w.lambda_reconst * parts["l1"]
    return loss, parts


# ---------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: Generator
    critic: Critic
    rows: List[tuple]
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None


def _format_row(row: tuple) -> str:
    step, task, cl, gp, adv, l1, total = row
    return ",".join([str(step), task] + [repr(float(v)) for v in (cl, gp, adv, l1, total)])


def _batch(
    task: str,
    dataset: Sequence[PolypSample],
    va: Optional[ValueAssignment],
    cfg: TrainConfig,
    rng: np.random.Generator,
    dtype,
) -> Tuple[Tensor, Tensor]:
    pairs = []
    for _ in range(cfg.batch_size):
        s = dataset[int(rng.integers(0, len(dataset)))]
        pair = build_p2n_sample(s, rng) if task == "p2n" else build_n2p_sample(s, va)
        pairs.append(jitter(pair, cfg, rng))
    return pair_to_tensors(pairs, dtype)


def _save_snapshot(path, g: Generator, d: Critic, task: str, step: int):
    rec = g.state_records("gen/")
    rec.update(d.state_records("critic/"))
    header = {"config": g.cfg.to_dict(), "task": task, "step": step}
    save_checkpoint(path, rec, header)


def train(
    task: str,
    dataset: Sequence[PolypSample],
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    w: LossWeights = LossWeights(),
    out_dir=None,
) -> TrainResult:
    """Alternating optimization, fully deterministic per seed.

    Each step runs ``critic_iters_per_gen`` critic updates then one
    generator update, logging one CSV row per step. Non-finite losses
    abort with a diagnostic snapshot.
    """
    if task not in ("p2n", "n2p"):
        raise ConfigError(f"task must be p2n|n2p, got {task!r}")
    if not dataset:
        raise DataError("train: empty dataset")
    dtype = net_cfg.np_dtype()

    va = None
    if task == "n2p":
        n_ids = max(s.polyp_id for s in dataset) + 1
        if n_ids < 2:
            raise DataError("n2p training needs at least 2 unique polyp ids")
        va = assign_values(n_ids)

    seeds = np.random.SeedSequence(train_cfg.seed).spawn(3)
    g = build_generator(net_cfg, np.random.default_rng(seeds[0]))
    d = build_critic(net_cfg, np.random.default_rng(seeds[1]))
    rng = np.random.default_rng(seeds[2])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows: List[tuple] = []
    for step in range(1, train_cfg.total_steps + 1):
        cl_val, gp_val = 0.0, 0.0
        g.params.set_requires_grad(False)
        for _ in range(train_cfg.critic_iters_per_gen):
            cond, real = _batch(task, dataset, va, train_cfg, rng, dtype)
            with no_grad():
                fake = g.forward(cond, "train", rng)
            closs, cparts = critic_loss(d, cond, real, fake, w, rng)
            grads = T.backward(closs, d.params)
            adam_step(d.params, grads, train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
            cl_val, gp_val = closs.item(), cparts["gp"]
        g.params.set_requires_grad(True)

        d.params.set_requires_grad(False)
        cond, target = _batch(task, dataset, va, train_cfg, rng, dtype)
        gloss, gparts = generator_loss(g, d, cond, target, w, rng)
        grads = T.backward(gloss, g.params)
        adam_step(g.params, grads, train_cfg.lr, train_cfg.beta1, train_cfg.beta2)
        d.params.set_requires_grad(True)

        row = (step, task, cl_val, gp_val, gparts["adv"], gparts["l1"], gparts["total"])
        rows.append(row)
        if not all(np.isfinite(v) for v in row[2:]):
            if out_dir is not None:
                _save_snapshot(out_dir / "diagnostic.psyn", g, d, task, step)
            raise NumericError(
                f"non-finite loss at step {step} (task {task}): "
                f"critic={cl_val} gp={gp_val} adv={gparts['adv']} l1={gparts['l1']}"
            )
        if (
            out_dir is not None
            and train_cfg.checkpoint_every
            and step % train_cfg.checkpoint_every == 0
        ):
            _save_snapshot(out_dir / f"checkpoint_{step:06d}.psyn", g, d, task, step)

    result = TrainResult(generator=g, critic=d, rows=rows)
    if out_dir is not None:
        metrics_path = out_dir / "metrics.csv"
        with open(metrics_path, "w", newline="") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in rows:
                fh.write(_format_row(row) + "\n")
        ckpt_path = out_dir / "checkpoint_final.psyn"
        _save_snapshot(ckpt_path, g, d, task, train_cfg.total_steps)
        result.metrics_path = metrics_path
        result.checkpoint_path = ckpt_path
    return result
