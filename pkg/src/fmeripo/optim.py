"""Adam with bias correction, plus a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float):
        self.state.lr = value

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameters: {missing[:5]}")
        st = self.state
        st.step_count += 1
        t = st.step_count
        corr1 = 1.0 - st.beta1 ** t
        corr2 = 1.0 - st.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = st.m[name]
            v = st.v[name]
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * g * g
            p.data -= st.lr * (m / corr1) / (np.sqrt(v / corr2) + st.eps)
        self.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"m/{name}"] = self.state.m[name]
            out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int, lr: float):
        for name in self.params:
            self.state.m[name] = np.array(arrays[f"m/{name}"], dtype=np.float64)
            self.state.v[name] = np.array(arrays[f"v/{name}"], dtype=np.float64)
        self.state.step_count = step_count
        self.state.lr = lr


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    # (param name, flat index, analytic, numeric, relative error)
    entries: list = field(default_factory=list)

    def worst(self, n: int = 5):
        return sorted(self.entries, key=lambda e: -e[4])[:n]


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def noise_floor(loss_value: float, step: float, tol: float, ulps: float = 8.0) -> float:
    """Relative-error floor at which rounding noise alone stays under ``tol``.

    The central difference of a loss near ``loss_value`` carries an absolute
    error of roughly ``ulps * ulp(loss) / (2 * step)``; gradients smaller than
    ``noise / tol`` are then judged on that absolute scale.
    """
    noise = ulps * float(np.spacing(abs(loss_value))) / (2.0 * step)
    return max(1e-7, noise / tol)


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
               tol: float | None = None, samples_per_param: int | None = 8,
               rng: np.random.Generator | None = None,
               names: Sequence[str] | None = None, floor: float = 1e-7) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` must rebuild its graph from the current parameter values on every
    call. Up to ``samples_per_param`` entries are drawn per parameter
    (``None`` checks every entry). If ``tol`` is given, an AssertionError is
    raised when the worst relative error exceeds it.

    ``floor`` bounds the denominator of the relative error from below. Near-zero
    gradients cannot be resolved better than the rounding noise of the
    difference quotient (about ulp(loss) / step), so large losses need a larger
    floor; see :func:`noise_floor`.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    names = list(names) if names is not None else list(params)
    for p in params.values():
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = {name: (params[name].grad if params[name].grad is not None
                       else np.zeros_like(params[name].data)).copy() for name in names}

    report = GradCheckReport(max_rel_error=0.0, num_checked=0)
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        if samples_per_param is None or samples_per_param >= flat.size:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=samples_per_param, replace=False)
        for idx in picks:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + step
                up = fn().item()
                flat[idx] = orig - step
                down = fn().item()
            flat[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss is not finite")
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = relative_error(a, numeric, floor)
            report.entries.append((name, int(idx), a, numeric, err))
            report.max_rel_error = max(report.max_rel_error, err)
            report.num_checked += 1
    for p in params.values():
        p.grad = None
    if tol is not None and report.max_rel_error > tol:
        raise AssertionError(f"gradient check failed: worst {report.worst(3)}")
    return report
