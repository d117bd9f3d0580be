"""Parameter and compute accounting for whole networks."""

from __future__ import annotations

from .errors import ValidationError
from .network import Network


def count_params(net: Network) -> int:
    return sum(layer.param_count() for layer in net.layers)


def count_flops(net: Network, in_shape) -> int:
    """Forward multiply-add count for one sample, two ops per multiply-add."""
    total = 0
    cur = tuple(in_shape)
    for layer in net.layers:
        total += layer.flops(cur)
        cur = tuple(layer.out_shape(cur))
    return total


def reduction_percent(before: float, after: float) -> float:
    if before <= 0:
        raise ValidationError("baseline count must be positive")
    return 100.0 * (1.0 - after / before)


def layer_summary(net: Network, in_shape) -> list:
    rows = []
    cur = tuple(in_shape)
    for i, layer in enumerate(net.layers):
        rows.append(
            {
                "layer_id": i,
                "kind": layer.kind,
                "params": layer.param_count(),
                "flops": layer.flops(cur),
            }
        )
        cur = tuple(layer.out_shape(cur))
    return rows
