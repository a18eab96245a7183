"""Conditional-GAN engine for synthetic polyp image generation.

Two image translation directions share one architecture: polyp-to-negative
inpainting and negative-to-polyp synthesis steered by grayscale identity
masks. Submodules import lazily so the CLI can configure threading before
numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor",
    "optim",
    "checkpoint",
    "models",
    "training",
    "data",
    "generate",
    "evaluate",
    "errors",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
