"""Central-difference verification of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule
from .model import DiffusionPolicy
from .nn import record_relu_masks

MAX_GRADCHECK_PARAMS = 2000
# Below this magnitude the float64 loss cannot resolve the gradient with h=1e-5,
# so differences are measured against the floor instead of |a| + |n|.
GRAD_FLOOR = 1e-5
KINK_RETRIES = 2


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    per_module: dict = field(default_factory=dict)
    n_checked: int = 0
    n_kinks: int = 0

    def __str__(self):
        mods = ", ".join(f"{k}={v:.2e}" for k, v in sorted(self.per_module.items()))
        return (f"max rel error {self.max_rel_error:.3e} at {self.worst_param}{list(self.worst_index)} "
                f"over {self.n_checked} params, {self.n_kinks} skipped at ReLU kinks ({mods})")


def relative_error(a, n, floor: float = GRAD_FLOOR):
    """|a - n| / max(|a| + |n|, floor), elementwise."""
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def grad_check(policy: DiffusionPolicy, batch, schedule: NoiseSchedule | None = None, *, t=None, noise=None,
               h: float = 1e-5, seed: int = 0, floor: float = GRAD_FLOOR,
               max_params: int = MAX_GRADCHECK_PARAMS) -> GradCheckReport:
    """Compare every analytic gradient entry with a central difference.

    ``t`` and ``noise`` are fixed (drawn from ``seed`` when not given) so the
    loss is a deterministic function of the parameters. When some ReLU flips
    between the +h and -h evaluations the difference straddles a kink; the
    entry is retried with h/10 and h/100 and skipped if it still flips.
    """
    if policy.n_params > max_params:
        raise ValueError(f"gradient check needs a micro configuration (<= {max_params} params), "
                         f"got {policy.n_params}")
    schedule = schedule or NoiseSchedule.cosine()
    obs, x0 = batch
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if t is None:
        t = rng.integers(1, schedule.T, size=x0.shape[0])
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    _, grads = policy.loss_and_grads(obs, x0, t, noise, schedule)

    def loss():
        with record_relu_masks() as masks:
            value = policy.loss_and_grads(obs, x0, t, noise, schedule)[0]
        return value, masks

    def central(p, idx, step):
        old = p[idx]
        p[idx] = old + step
        lp, mp = loss()
        p[idx] = old - step
        lm, mm = loss()
        p[idx] = old
        crossed = any(not np.array_equal(a, b) for a, b in zip(mp, mm))
        return (lp - lm) / (2 * step), crossed

    worst = (0.0, "", ())
    per_module: dict[str, float] = {}
    n = kinks = 0
    for name, p in policy.params.items():
        g = grads[name]
        mod = name.split(".")[0]
        for idx in np.ndindex(p.shape):
            step = h
            num, crossed = central(p, idx, step)
            for _ in range(KINK_RETRIES):
                if not crossed:
                    break
                step /= 10
                num, crossed = central(p, idx, step)
            if crossed:
                kinks += 1
                continue
            err = float(relative_error(g[idx], num, floor))
            n += 1
            per_module[mod] = max(per_module.get(mod, 0.0), err)
            if err > worst[0]:
                worst = (err, name, idx)
    return GradCheckReport(max_rel_error=worst[0], worst_param=worst[1], worst_index=worst[2],
                           per_module=per_module, n_checked=n, n_kinks=kinks)
