"""Named parameter tables and the layer helpers that read from them."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import Tensor, default_dtype


class NetworkParams:
    """Ordered name -> Tensor table for one network, plus non-trainable buffers.

    Layers are declared once at construction time; forward code then looks
    them up by the same names.
    """

    def __init__(self, seed: int):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def conv(self, name: str, cin: int, cout: int, k: int, zero: bool = False) -> None:
        dtype = default_dtype()
        shape = (cout, cin, k, k)
        w = np.zeros(shape, dtype) if zero else F.kaiming_normal(shape, self._rng, dtype)
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(cout, dtype))

    def tconv(self, name: str, cin: int, cout: int, k: int) -> None:
        dtype = default_dtype()
        # fan-in of a stride-k, k x k transposed conv is cin (one tap per output)
        w = (self._rng.standard_normal((cin, cout, k, k)) * np.sqrt(2.0 / cin)).astype(dtype)
        self._add(f"{name}.weight", w)
        self._add(f"{name}.bias", np.zeros(cout, dtype))

    def bn(self, name: str, channels: int) -> None:
        dtype = default_dtype()
        self._add(f"{name}.gamma", np.ones(channels, dtype))
        self._add(f"{name}.beta", np.zeros(channels, dtype))
        self.buffers[f"{name}.running_mean"] = np.zeros(channels, dtype)
        self.buffers[f"{name}.running_var"] = np.ones(channels, dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every tensor that defines the network state (parameters and buffers)."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # layer application ------------------------------------------------------
    def apply_conv(self, name: str, x: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
        w = self.params[f"{name}.weight"]
        if pad is None:
            pad = w.shape[2] // 2
        return F.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, pad=pad)

    def apply_tconv(self, name: str, x: Tensor, stride: int = 2) -> Tensor:
        return F.conv_transpose2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                                  stride=stride)

    def apply_bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        return F.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                            self.buffers[f"{name}.running_mean"],
                            self.buffers[f"{name}.running_var"], training)

    def conv_bn_act(self, name: str, x: Tensor, training: bool, stride: int = 1) -> Tensor:
        """conv3x3 -> BN -> leaky_relu(0.2), the basic unit of both networks."""
        p, b = self.params, self.buffers
        return F.conv_bn_act(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"], p[f"{name}.bn.gamma"],
                             p[f"{name}.bn.beta"], b[f"{name}.bn.running_mean"],
                             b[f"{name}.bn.running_var"], training, stride=stride, slope=0.2)

    def declare_conv_bn(self, name: str, cin: int, cout: int) -> None:
        self.conv(f"{name}.conv", cin, cout, 3)
        self.bn(f"{name}.bn", cout)
