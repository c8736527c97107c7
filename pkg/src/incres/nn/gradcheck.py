"""Central finite-difference gradient verification.

``op`` maps a list of arrays to ``(scalar, [grad per input])``. In
``"float64"`` mode everything runs in double precision. In ``"float32"``
mode the analytic gradient comes from the float32 production path while the
finite differences are recomputed in float64, so the comparison measures the
production gradient rather than finite-difference noise.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: list
    tolerance: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures and all(e < self.tolerance for e in self.max_rel_error)

    def __str__(self):
        errs = ", ".join(f"{e:.2e}" for e in self.max_rel_error)
        status = "ok" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err [{errs}] tol {self.tolerance:g} ({self.checked} coords)"


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(op, inputs, tolerance, *, precision="float64", h=None, samples=30,
               seed=0, wrt=None, floor=1e-8):
    """Compare analytic gradients with central differences on random coordinates.

    ``wrt`` restricts the check to the listed input indices (default all).
    Non-finite analytic gradients produce a failing report, not an exception.
    """
    if precision not in ("float32", "float64"):
        raise ValueError(f"precision must be 'float32' or 'float64', got {precision!r}")
    if h is None:
        h = 1e-5 if precision == "float64" else 1e-4
    rng = np.random.default_rng(seed)
    wrt = range(len(inputs)) if wrt is None else wrt
    ref = [np.array(a, dtype=np.float64) for a in inputs]
    work = ref if precision == "float64" else [a.astype(np.float32) for a in ref]
    _, grads = op([a.copy() for a in work])

    errors, failures, checked = [], [], 0
    for i in wrt:
        g = np.asarray(grads[i], dtype=np.float64)
        if not np.isfinite(g).all():
            failures.append(f"input {i}: non-finite analytic gradient")
            errors.append(float("inf"))
            continue
        flat = ref[i].reshape(-1)
        n = min(samples, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp, _ = op([a.copy() for a in ref])
            flat[c] = orig - h
            fm, _ = op([a.copy() for a in ref])
            flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(g.reshape(-1)[c], numeric, floor))
            checked += 1
        errors.append(worst)
    return GradCheckReport(errors, tolerance, checked, failures)


def activation_pattern(modules):
    """Digest of every ReLU mask and max-pool argmax left by the last forward."""
    h = hashlib.sha256()
    stack = list(reversed(modules))
    while stack:
        m = stack.pop()
        for arr in m.kinks():
            h.update(np.ascontiguousarray(arr).tobytes())
        stack.extend(reversed(m.children()))
    return h.hexdigest()


def check_model_gradients(model, batch, labels, param_names, *,
                          samples=4, seed=0, h=1e-6, floor_rel=1e-3, retries=3):
    """End-to-end check of ``model`` parameter gradients under the training loss.

    The analytic gradient comes from ``model`` itself (its own dtype); the
    finite differences from a float64 clone. Both use train mode and no
    dropout, so the loss is a deterministic function of the parameters.

    One early-layer weight moves thousands of activations, so a step of
    size ``h`` can push some across a ReLU or max-pool kink, where the
    central difference is meaningless. Such coordinates are detected by
    comparing the activation pattern at x+h and x-h; the step is shrunk
    tenfold up to ``retries`` times and the coordinate is skipped if it
    still straddles a kink.

    Relative errors use ``floor_rel * max|grad|`` of the tensor as the
    smallest denominator. Returns ``({name: max relative error}, skipped)``.
    """
    from . import functional as F

    def loss_of(m):
        logits = m.forward(batch, "train", np.random.default_rng(0))
        return F.softmax_cross_entropy(logits, labels)[0], activation_pattern(m.nodes)

    rate = [n for n in model.nodes if hasattr(n, "rate")]
    saved = [n.rate for n in rate]
    for n in rate:
        n.rate = 0.0
    try:
        logits = model.forward(batch, "train", np.random.default_rng(0))
        _, dlogits = F.softmax_cross_entropy(logits, labels)
        model.backward(dlogits)
        analytic = {p.name: np.asarray(p.grad, np.float64).copy() for p in model.params}
        ref = model.astype(np.float64)
        by_name = {p.name: p for p in ref.params}
    finally:
        for n, r in zip(rate, saved):
            n.rate = r

    rng = np.random.default_rng(seed)
    out, skipped = {}, 0
    for name in param_names:
        flat = by_name[name].value.reshape(-1)
        g = analytic[name].reshape(-1)
        floor = max(floor_rel * float(np.abs(g).max()), 1e-12)
        worst = 0.0
        for c in rng.permutation(flat.size)[:samples]:
            orig, step = flat[c], h
            for _ in range(retries + 1):
                flat[c] = orig + step
                fp, pat_p = loss_of(ref)
                flat[c] = orig - step
                fm, pat_m = loss_of(ref)
                flat[c] = orig
                if pat_p == pat_m:
                    worst = max(worst, relative_error(g[c], (fp - fm) / (2 * step), floor))
                    break
                step /= 10
            else:
                skipped += 1
        out[name] = worst
    return out, skipped
