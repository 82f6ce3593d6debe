"""Central-difference verification of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor4, backward, no_grad, tape_scope


@dataclass
class GradCheckReport:
    """Max relative error per leaf between tape gradients and central differences."""

    per_leaf: dict = field(default_factory=dict)
    step: float = 0.0
    tolerance: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_leaf.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self):
        lines = [f"grad_check step={self.step:g} tolerance={self.tolerance:g}"]
        for name, err in sorted(self.per_leaf.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        lines.append(f"  => {'PASS' if self.passed else 'FAIL'} (max {self.max_rel_err:.3e})")
        return "\n".join(lines)


def _rel_err(a: float, n: float, floor: float) -> float:
    denom = max(abs(a), abs(n))
    if denom == 0.0:
        return 0.0
    return abs(a - n) / max(denom, floor)


def grad_check(f, leaves, step: float = 1e-4, tolerance: float = 1e-3,
               max_entries_per_leaf: int = 0, rng=None, zero_floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() gradients of the scalar f() against central differences.

    `f` must be a deterministic closure over `leaves` (a name -> Tensor4
    mapping, or a sequence) returning a single-element Tensor4. When
    `max_entries_per_leaf` > 0, only that many entries per leaf are
    probed (chosen by `rng`), which keeps large checks fast.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if not isinstance(leaves, dict):
        leaves = {f"leaf{i}": t for i, t in enumerate(leaves)}
    for t in leaves.values():
        t.grad = None

    with tape_scope():
        loss = f()
        backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }

    def eval_loss() -> float:
        with tape_scope(), no_grad():
            return f().item()

    report = GradCheckReport(step=step, tolerance=tolerance)
    if rng is None:
        rng = np.random.default_rng(0)
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        if max_entries_per_leaf and flat.size > max_entries_per_leaf:
            idxs = rng.choice(flat.size, size=max_entries_per_leaf, replace=False)
        else:
            idxs = range(flat.size)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = eval_loss()
            flat[i] = orig - step
            lm = eval_loss()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * step)
            worst = max(worst, _rel_err(aflat[i], numeric, zero_floor))
        report.per_leaf[name] = worst
    return report
