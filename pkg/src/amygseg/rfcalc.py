"""Theoretical receptive-field arithmetic for chains of convolution layers.

The receptive field after layer k follows the recurrence
``l_k = l_{k-1} + (f_k - 1) * prod(s_1 .. s_{k-1})`` where ``f_k`` is the
layer's effective kernel extent (dilation-adjusted) and ``s_i`` are the
strides of the preceding layers. All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, DataError
from .tensor import effective_extent


@dataclass(frozen=True)
class LayerDescriptor:
    kernel: int
    stride: int = 1
    dilation: int = 1
    label: str = ""

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(
                f"layer '{self.label}': kernel, stride, dilation must be >= 1 "
                f"(got {self.kernel}, {self.stride}, {self.dilation})"
            )

    @property
    def effective_kernel(self) -> int:
        return effective_extent(self.kernel, self.dilation)


@dataclass(frozen=True)
class RFRow:
    label: str
    effective_kernel: int
    receptive_field: int


@dataclass(frozen=True)
class RFReport:
    l0: int
    rows: tuple[RFRow, ...]

    @property
    def final(self) -> int:
        return self.rows[-1].receptive_field if self.rows else self.l0


def receptive_field_chain(layers: list[LayerDescriptor], l0: int = 1) -> RFReport:
    """Apply the receptive-field recurrence along a layer chain.

    ``l0`` is the receptive field at the chain input (1 = a single voxel).
    An empty chain reports just ``l0``.
    """
    if l0 < 1:
        raise ConfigError(f"starting receptive field must be >= 1, got {l0}")
    rf = l0
    stride_product = 1
    rows = []
    for layer in layers:
        eff = layer.effective_kernel
        rf = rf + (eff - 1) * stride_product
        rows.append(RFRow(layer.label, eff, rf))
        stride_product *= layer.stride
    return RFReport(l0, tuple(rows))


def descriptors_from_network_layers(
    layers: list[dict],
    branch: str | None = None,
    stages: tuple[str, ...] = ("block",),
) -> list[LayerDescriptor]:
    """Build a sequential chain from network-interchange layer dicts.

    Keeps layers whose ``stage`` is in ``stages`` and whose ``branch`` matches
    (a ``None`` branch entry matches any request). Parallel skip-projection
    layers are never part of a sequential chain and are excluded by default.
    """
    out = []
    for entry in layers:
        try:
            stage = entry.get("stage", "block")
            lbranch = entry.get("branch")
            if stage not in stages:
                continue
            if branch is not None and lbranch is not None and lbranch != branch:
                continue
            out.append(
                LayerDescriptor(
                    kernel=int(entry["kernel"]),
                    stride=int(entry["stride"]),
                    dilation=int(entry["dilation"]),
                    label=str(entry["name"]),
                )
            )
        except KeyError as exc:
            raise DataError(f"network layer entry missing field {exc}: {entry}") from exc
    return out
