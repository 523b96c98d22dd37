"""Parameter initialization and parameter-dict helpers."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def kaiming_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> T.Tensor4:
    """Kaiming-uniform fan-in init for a (c_out, c_in, k, k) conv weight."""
    fan_in = c_in * k * k
    bound = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np.float32)
    return T.Tensor4(data, requires_grad=True)


def zeros_bias(c_out: int) -> T.Tensor4:
    return T.Tensor4(np.zeros((1, c_out, 1, 1), dtype=np.float32), requires_grad=True)


def param_count(params: dict[str, T.Tensor4]) -> int:
    return sum(p.data.size for p in params.values())


def params_bytes(params: dict[str, T.Tensor4]) -> bytes:
    """Stable byte snapshot, for frozen-parameter contracts."""
    return b"".join(params[k].data.tobytes() for k in sorted(params))


def zero_grads(params: dict[str, T.Tensor4]) -> None:
    for p in params.values():
        p.zero_grad()
