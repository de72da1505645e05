"""Residual bottleneck adapter: x' = x + W_up(ReLU(W_down x + b_down)) + b_up.

The adapter is an exact identity map at construction under both init modes:

- "identity": all parameters zero. Useful as a structural no-op, but a pure
  zero init is a dead saddle under ReLU (every gradient vanishes), so it is
  not the default for modules that will be trained.
- "trainable": W_down ~ N(0, 1e-3^2) with W_up and both biases zero. Still an
  exact identity (the up-projection annihilates the bottleneck), but the first
  optimization step receives nonzero gradient through W_up.

Biases are carried even though the plain formulation omits them; zero init
keeps the identity property exact while letting the bottleneck shift its
pre-activations once training starts.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

import torch
from torch import nn

from .archive import load_archive, save_archive

INIT_MODES = ("identity", "trainable")
TRAINING_MODES = ("full", "adapter_only")
_DOWN_INIT_STD = 1e-3


class AdapterConfigError(ValueError):
    pass


class BottleneckAdapter(nn.Module):
    """Residual bottleneck over feature vectors of width d, bottleneck r < d."""

    def __init__(self, d: int, r: int, init: str = "trainable", generator: torch.Generator | None = None):
        super().__init__()
        if not (1 <= r < d):
            raise AdapterConfigError(f"bottleneck requires 1 <= r < d, got r={r}, d={d}")
        if init not in INIT_MODES:
            raise AdapterConfigError(f"init must be one of {INIT_MODES}, got {init!r}")
        self.d = d
        self.r = r
        self.down = nn.Linear(d, r)
        self.up = nn.Linear(r, d)
        with torch.no_grad():
            self.down.bias.zero_()
            self.up.weight.zero_()
            self.up.bias.zero_()
            if init == "identity":
                self.down.weight.zero_()
            else:
                self.down.weight.normal_(0.0, _DOWN_INIT_STD, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise AdapterConfigError(f"expected feature width {self.d}, got {x.shape[-1]}")
        return x + self.up(torch.relu(self.down(x)))


@runtime_checkable
class AdapterHost(Protocol):
    """A model that can report which of its modules are adapters, prediction
    heads, and backbone; required for adapter-only training."""

    def adapter_modules(self) -> list[nn.Module]: ...

    def head_modules(self) -> list[nn.Module]: ...

    def backbone_modules(self) -> list[nn.Module]: ...


def _params(modules: Iterable[nn.Module]) -> list[nn.Parameter]:
    seen: dict[int, nn.Parameter] = {}
    for m in modules:
        for p in m.parameters():
            seen.setdefault(id(p), p)
    return list(seen.values())


def trainable_parameters(model: nn.Module, mode: str) -> list[nn.Parameter]:
    """Parameters optimized in the given mode.

    adapter_only: the adapters plus the prediction heads; everything else
    (in particular the backbone) stays untouched.
    """
    if mode not in TRAINING_MODES:
        raise AdapterConfigError(f"mode must be one of {TRAINING_MODES}, got {mode!r}")
    if mode == "full":
        return list(model.parameters())
    if not isinstance(model, AdapterHost):
        raise AdapterConfigError(f"{type(model).__name__} does not expose adapter/head modules")
    adapters = model.adapter_modules()
    if not adapters:
        raise AdapterConfigError("adapter_only mode requires at least one adapter module")
    return _params(list(adapters) + list(model.head_modules()))


def freeze_for_mode(model: nn.Module, mode: str) -> list[nn.Parameter]:
    """Set requires_grad so only the mode's trainable set receives gradients."""
    trainable = trainable_parameters(model, mode)
    chosen = {id(p) for p in trainable}
    for p in model.parameters():
        p.requires_grad_(id(p) in chosen)
    return trainable


def export_adapter(adapter: BottleneckAdapter, path: str | Path) -> None:
    """Flat named-tensor archive of the adapter, for non-Python consumers."""
    save_archive(
        path,
        header={"kind": "adapter", "d": adapter.d, "r": adapter.r},
        tensors={
            "w_down": adapter.down.weight.detach().cpu().numpy(),
            "b_down": adapter.down.bias.detach().cpu().numpy(),
            "w_up": adapter.up.weight.detach().cpu().numpy(),
            "b_up": adapter.up.bias.detach().cpu().numpy(),
        },
    )


def import_adapter(path: str | Path) -> BottleneckAdapter:
    header, tensors = load_archive(path)
    if header.get("kind") != "adapter":
        raise AdapterConfigError(f"{path} is not an adapter archive")
    adapter = BottleneckAdapter(int(header["d"]), int(header["r"]), init="identity")
    with torch.no_grad():
        adapter.down.weight.copy_(torch.from_numpy(tensors["w_down"]))
        adapter.down.bias.copy_(torch.from_numpy(tensors["b_down"]))
        adapter.up.weight.copy_(torch.from_numpy(tensors["w_up"]))
        adapter.up.bias.copy_(torch.from_numpy(tensors["b_up"]))
    return adapter
