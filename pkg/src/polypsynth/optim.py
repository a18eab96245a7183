"""Named parameter sets and the Adam update."""

from __future__ import annotations

from typing import Dict, Mapping, Union

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

__all__ = ["ParamSet", "adam_step"]


class ParamSet:
    """Ordered map from parameter path to leaf tensor, plus Adam state.

    Paths are slash-separated (e.g. ``gen/enc3/kernel``) and must be
    unique. Each parameter carries first/second moment buffers and a step
    count, all initialized at registration.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}
        self._t: Dict[str, int] = {}

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise ShapeError(f"duplicate parameter path {path!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[path] = t
        self._m[path] = np.zeros_like(t.data)
        self._v[path] = np.zeros_like(t.data)
        self._t[path] = 0
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def tensors(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def set_requires_grad(self, flag: bool):
        for t in self._params.values():
            t.requires_grad = flag

    def load_data(self, path: str, value: np.ndarray):
        t = self._params[path]
        if t.data.shape != value.shape:
            raise ShapeError(
                f"parameter {path!r}: checkpoint shape {value.shape} != model shape {t.data.shape}"
            )
        t.data = value.astype(t.data.dtype, copy=True)

    def state_records(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """Flat view of parameters and optimizer state for checkpointing."""
        rec: Dict[str, np.ndarray] = {}
        for path, t in self._params.items():
            rec[prefix + path] = t.data
            rec[f"{prefix}opt/{path}/m"] = self._m[path]
            rec[f"{prefix}opt/{path}/v"] = self._v[path]
            rec[f"{prefix}opt/{path}/t"] = np.asarray(self._t[path], dtype=np.int64)
        return rec

    def load_state_records(self, rec: Mapping[str, np.ndarray], prefix: str = ""):
        for path in self._params:
            for key in (prefix + path, f"{prefix}opt/{path}/m",
                        f"{prefix}opt/{path}/v", f"{prefix}opt/{path}/t"):
                if key not in rec:
                    raise ShapeError(
                        f"checkpoint/model mismatch: record {key!r} missing"
                    )
            self.load_data(path, rec[prefix + path])
            self._m[path] = rec[f"{prefix}opt/{path}/m"].astype(
                self._m[path].dtype, copy=True
            )
            self._v[path] = rec[f"{prefix}opt/{path}/v"].astype(
                self._v[path].dtype, copy=True
            )
            self._t[path] = int(rec[f"{prefix}opt/{path}/t"])


def adam_step(
    params: ParamSet,
    grads: Mapping[str, Union[Tensor, np.ndarray]],
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """Bias-corrected Adam update applied in place; returns ``params``.

    Only paths present in ``grads`` are updated, so freezing a subset is
    just omitting it from the gradient map.
    """
    for path, g in grads.items():
        if path not in params:
            raise ShapeError(f"adam_step: gradient for unknown parameter {path!r}")
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        theta = params[path]
        if gd.shape != theta.data.shape:
            raise ShapeError(
                f"adam_step: gradient shape {gd.shape} != parameter shape "
                f"{theta.data.shape} for {path!r}"
            )
        gd = gd.astype(theta.data.dtype, copy=False)
        t = params._t[path] + 1
        m, v = params._m[path], params._v[path]
        m *= beta1
        m += (1.0 - beta1) * gd
        v *= beta2
        v += (1.0 - beta2) * gd * gd
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        np.sqrt(vhat, out=vhat)
        vhat += eps
        theta.data = theta.data - lr * (mhat / vhat)
        params._t[path] = t
    return params
