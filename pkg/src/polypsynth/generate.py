"""Inference chain: polyp -> negative -> new polyp, with label export.

Exported masks and boxes come straight from the request's mask spec,
never from model output, so generated images join detection/segmentation
training sets without manual annotation.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import List, Optional, Sequence, Union

import numpy as np

from .data import MaskSpec, PolypSample, compose_condition, dilate_mask, mask_bbox, write_image, write_mask
from .errors import ConfigError, DataError
from .models import Generator
from .tensor import Tensor, no_grad

__all__ = [
    "GenerationRequest",
    "LatencyStats",
    "polyp_to_negative",
    "negative_to_polyp",
    "generate_corpus",
    "bench_generator",
    "to_uint8",
]

MANIFEST_HEADER = ["filename", "mask_filename", "value", "x1", "y1", "x2", "y2", "seed"]


def to_uint8(unit_img: np.ndarray) -> np.ndarray:
    """[-1,1] CHW float to 8-bit HWC, round-half-even."""
    arr = np.clip(unit_img, -1.0, 1.0)
    arr = np.rint((arr + 1.0) * 127.5)
    return arr.transpose(1, 2, 0).astype(np.uint8)


def _forward_uint8(g: Generator, raster: np.ndarray) -> np.ndarray:
    dtype = g.cfg.np_dtype()
    x = np.asarray(raster, dtype=np.float64) / 127.5 - 1.0
    t = Tensor(x.transpose(2, 0, 1)[None].astype(dtype))
    with no_grad():
        out = g.forward(t, "eval")
    return to_uint8(out.numpy()[0])


def _check_frame(g: Generator, raster: np.ndarray, what: str):
    s = g.cfg.image_size
    if raster.shape[:2] != (s, s) or raster.ndim != 3:
        raise ConfigError(
            f"{what}: frame {raster.shape} incompatible with checkpoint image_size {s}"
        )


def polyp_to_negative(g_p2n: Generator, s: PolypSample, dilate_radius: float = 10.0) -> np.ndarray:
    """Inpaint the (dilated) polyp region away; returns an 8-bit negative."""
    s.validate()
    _check_frame(g_p2n, s.image, "polyp_to_negative")
    if not np.any(s.mask):
        raise DataError(f"{s.source_name}: polyp sample has empty mask")
    region = dilate_mask(s.mask, dilate_radius)
    spec = MaskSpec(shape=region, value=255, placement=(0, 0))
    cond = compose_condition(s.image, spec)
    return _forward_uint8(g_p2n, cond)


def negative_to_polyp(g_n2p: Generator, negative: np.ndarray, spec: MaskSpec) -> PolypSample:
    """Grow a polyp under the spec's shape/value; the spec is the label."""
    _check_frame(g_n2p, negative, "negative_to_polyp")
    spec.validate(frame_hw=negative.shape[:2])
    cond = compose_condition(negative, spec)
    image = _forward_uint8(g_n2p, cond)
    return PolypSample(
        image=image,
        mask=spec.full_frame(negative.shape[:2]),
        polyp_id=0,
        source_name=f"generated(value={spec.value})",
    )


@dataclass
class GenerationRequest:
    """One synthesis job: source frame, controllable mask, seed."""

    source: Union[PolypSample, np.ndarray]  # polyp sample (p2n first) or negative raster
    mask_spec: MaskSpec
    seed: int = 0


def generate_corpus(
    requests: Sequence[GenerationRequest],
    g_n2p: Generator,
    g_p2n: Optional[Generator] = None,
    out_dir=None,
) -> List[dict]:
    """Run every request, write image/mask PNGs and a manifest CSV.

    Returns the manifest rows; ``out_dir`` is required for file output and
    must be writable.
    """
    if out_dir is None:
        raise ConfigError("generate_corpus: out_dir is required")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise DataError(f"generate_corpus: out_dir not writable: {exc}")

    rows: List[dict] = []
    for i, req in enumerate(requests):
        if isinstance(req.source, PolypSample):
            if g_p2n is None:
                raise ConfigError(
                    "generate_corpus: polyp-sample sources need a p2n generator"
                )
            negative = polyp_to_negative(g_p2n, req.source)
        else:
            negative = np.asarray(req.source, dtype=np.uint8)
        sample = negative_to_polyp(g_n2p, negative, req.mask_spec)
        name = f"gen_{i:05d}.png"
        mask_name = f"gen_{i:05d}_mask.png"
        write_image(out_dir / name, sample.image)
        write_mask(out_dir / mask_name, sample.mask)
        x1, y1, x2, y2 = mask_bbox(sample.mask)
        rows.append(
            {
                "filename": name,
                "mask_filename": mask_name,
                "value": int(req.mask_spec.value),
                "x1": x1,
                "y1": y1,
                "x2": x2,
                "y2": y2,
                "seed": int(req.seed),
            }
        )

    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    return rows


@dataclass
class LatencyStats:
    size: int
    n_runs: int
    mean_ms: float
    median_ms: float
    p95_ms: float
    samples_ms: List[float]


def bench_generator(g: Generator, size: int, n_runs: int, warmup: int = 3) -> LatencyStats:
    """Wall-clock eval-mode forward latency; warm-up runs are excluded."""
    if n_runs < 10:
        raise ConfigError(f"bench_generator: n_runs must be >= 10, got {n_runs}")
    if size != g.cfg.image_size:
        raise ConfigError(
            f"bench_generator: size {size} != generator image_size {g.cfg.image_size}"
        )
    x = Tensor(np.zeros((1, g.cfg.in_channels, size, size), dtype=g.cfg.np_dtype()))
    with no_grad():
        for _ in range(warmup):
            g.forward(x, "eval")
        samples = []
        for _ in range(n_runs):
            t0 = time.perf_counter()
            g.forward(x, "eval")
            samples.append((time.perf_counter() - t0) * 1e3)
    return LatencyStats(
        size=size,
        n_runs=n_runs,
        mean_ms=float(np.mean(samples)),
        median_ms=float(median(samples)),
        p95_ms=float(np.percentile(samples, 95)),
        samples_ms=samples,
    )
