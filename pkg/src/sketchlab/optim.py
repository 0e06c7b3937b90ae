"""Adam optimizer and the flat-binary checkpoint format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor


class AdamState:
    """Bias-corrected Adam state for one named parameter set.

    Moments are allocated lazily with the shapes of the parameters; `t` is the
    strictly increasing step counter.
    """

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon_stability=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon_stability = epsilon_stability
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One in-place Adam update of `params` (name -> ndarray) from `grads`.

    A zero gradient with fresh state leaves the parameter exactly unchanged
    (m and v stay zero, so the update is 0 / (0 + eps) = 0).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    lr_t = state.learning_rate * np.sqrt(1.0 - b2 ** state.t) / (1.0 - b1 ** state.t)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} mismatches parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr_t * m / (np.sqrt(v) + state.epsilon_stability)


class Adam:
    """Convenience wrapper binding an AdamState to a dict of Tensors."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = value

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step({k: p.data for k, p in self.params.items()}, grads, self.state)


# -- checkpoint io ------------------------------------------------------------
#
# Layout: one line of UTF-8 JSON ({"params": [[name, shape], ...], ...extra}),
# then a newline, then the concatenated little-endian float64 buffers in the
# header's order.

def save_checkpoint(path, params: dict[str, Tensor], extra: dict | None = None) -> None:
    header = dict(extra or {})
    header["params"] = [[name, list(p.data.shape)] for name, p in params.items()]
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values())
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    blob = raw[nl + 1:]
    params = {}
    offset = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
        offset += n * 8
    extra = {k: v for k, v in header.items() if k != "params"}
    return params, extra
