"""Adam with per-group learning rates and non-finite gradient skipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
    """One bias-corrected Adam step on plain arrays; returns the new parameter."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class ParamGroup:
    params: list
    lr: float
    name: str = ""


@dataclass
class Adam:
    """Adam over torch leaf tensors.

    A tensor whose gradient has any non-finite entry is left untouched for that
    step (its moments too) and the skip is counted in ``skipped``.
    """

    groups: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)
    skipped: int = 0

    def zero_grad(self) -> None:
        for grp in self.groups:
            for p in grp.params:
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for grp in self.groups:
            for p in grp.params:
                if p.grad is None:
                    continue
                g = p.grad
                if not bool(torch.isfinite(g).all()):
                    self.skipped += 1
                    log.warning("non-finite gradient in %s; update skipped", grp.name or "parameter")
                    continue
                st = self.state.get(id(p))
                if st is None:
                    st = self.state[id(p)] = {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "t": 0}
                st["t"] += 1
                st["m"].mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                st["v"].mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                m_hat = st["m"] / (1 - self.beta1 ** st["t"])
                v_hat = st["v"] / (1 - self.beta2 ** st["t"])
                p.sub_(grp.lr * m_hat / (v_hat.sqrt() + self.eps))

    def export_state(self) -> dict:
        """Moments as named arrays (for checkpoints)."""
        out = {}
        for gi, grp in enumerate(self.groups):
            for pi, p in enumerate(grp.params):
                st = self.state.get(id(p))
                if st is not None:
                    out[f"g{gi}_p{pi}_m"] = st["m"].numpy().copy()
                    out[f"g{gi}_p{pi}_v"] = st["v"].numpy().copy()
                    out[f"g{gi}_p{pi}_t"] = np.array([st["t"]], dtype=np.int64)
        return out

    def import_state(self, arrays: dict) -> None:
        for gi, grp in enumerate(self.groups):
            for pi, p in enumerate(grp.params):
                key = f"g{gi}_p{pi}"
                if f"{key}_m" in arrays:
                    self.state[id(p)] = {
                        "m": torch.as_tensor(arrays[f"{key}_m"]).to(p.dtype).clone(),
                        "v": torch.as_tensor(arrays[f"{key}_v"]).to(p.dtype).clone(),
                        "t": int(arrays[f"{key}_t"][0]),
                    }
