"""
Adam / AdamW over named tensors.

Each step writes fresh arrays into `params`; arrays handed out earlier are
never modified, so snapshots taken between steps stay valid.
"""
from typing import Dict, Iterable, Optional, Union

import numpy as np

LearningRate = Union[float, np.ndarray]


def expon_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    """Log-linear interpolation from lr_init to lr_final over max_steps."""
    if max_steps <= 0 or lr_init == lr_final:
        return lr_init
    if lr_init <= 0.0 or lr_final <= 0.0:
        return 0.0
    t = np.clip(step / max_steps, 0.0, 1.0)
    return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))


class Adam:
    def __init__(
        self,
        params: Dict[str, np.ndarray],
        lrs: Dict[str, LearningRate],
        betas=(0.9, 0.999),
        eps: float = 1e-15,
        weight_decay: Optional[Dict[str, float]] = None,
    ):
        missing = set(params) - set(lrs)
        if missing:
            raise ValueError(f"no learning rate for tensors {sorted(missing)}")
        self.params = dict(params)
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = dict(weight_decay or {})
        self.exp_avg = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.exp_avg_sq = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.steps = {k: 0 for k in self.params}

    def step(self, grads: Dict[str, np.ndarray], lr_overrides: Optional[Dict[str, float]] = None) -> None:
        lr_overrides = lr_overrides or {}
        for name, grad in grads.items():
            if name not in self.params:
                raise ValueError(f"gradient for unknown tensor '{name}'")
            param = self.params[name]
            if grad.shape != param.shape:
                raise ValueError(f"gradient for '{name}' has shape {grad.shape}, tensor has {param.shape}")
            grad = grad.astype(param.dtype, copy=False)
            self.steps[name] += 1
            t = self.steps[name]
            m = self.beta1 * self.exp_avg[name] + (1.0 - self.beta1) * grad
            v = self.beta2 * self.exp_avg_sq[name] + (1.0 - self.beta2) * grad * grad
            self.exp_avg[name], self.exp_avg_sq[name] = m, v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            lr = lr_overrides.get(name, self.lrs[name])
            updated = param
            decay = self.weight_decay.get(name, 0.0)
            if decay:
                updated = updated - lr * decay * updated
            updated = updated - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.params[name] = updated.astype(param.dtype, copy=False)

    def remap_rows(self, names: Iterable[str], source: np.ndarray, new_params: Dict[str, np.ndarray]) -> None:
        """Replace per-primitive tensors after densification; row i inherits state of source[i], -1 starts fresh."""
        fresh = source < 0
        rows = np.where(fresh, 0, source)
        for name in names:
            self.params[name] = new_params[name]
            for state in (self.exp_avg, self.exp_avg_sq):
                old = state[name]
                remapped = old[rows] if len(old) else np.zeros_like(new_params[name])
                remapped[fresh] = 0.0
                state[name] = remapped
