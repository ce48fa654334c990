"""Adversarial perturbations of answered questionnaire states.

All attacks perturb only the *answered* feature coordinates of a state
s = [x * m, m]: the mask half is never touched and unanswered coordinates
stay exactly zero.  Attacks are targeted at the opposite class.  After the
gradient step(s), each candidate passes through the clinical-constraint
pipeline (see :mod:`aqrobust.constraints`) so the final record remains
medically plausible; the constraint resolution category is reported with the
result.

Coordinates live in normalized [-1, 1] space; constraint evaluation happens
in raw units via the dataset's column map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import constraints as con
from . import nn


@dataclass
class AttackConfig:
    epsilon: float = 0.3
    norm: str = "linf"              # "linf" or "l2" (PGD only)
    iterations: int = 40
    alpha: float = None             # step size; defaults to epsilon/iterations
    cw_c: float = 1e-4
    cw_kappa: float = 0.0
    cw_lr: float = 0.01
    cw_iterations: int = 100
    deepfool_overshoot: float = 0.02
    deepfool_iterations: int = 100
    clip_lo: float = -1.0
    clip_hi: float = 1.0

    def step_size(self):
        return self.alpha if self.alpha is not None else self.epsilon / self.iterations


@dataclass
class AttackResult:
    method: str
    x_adv: np.ndarray               # perturbed answered-feature vector (length d)
    state_adv: np.ndarray           # [x_adv * m, m]
    success: bool
    probs_clean: np.ndarray
    probs_adv: np.ndarray
    delta: np.ndarray
    delta_l2: float
    delta_linf: float
    iterations: int
    wall_time: float
    resolution: str = None          # constraint resolution category
    epsilon: float = None


class AttackContext:
    """Everything an attack needs about one clean sample.

    `x_full` is the full normalized feature row (answered coordinates carry
    the answers; unanswered ones the patient's true values, used only for
    constraint evaluation).  `mask` is the column mask at guess time.
    """

    def __init__(self, guesser, x_full, mask, true_label, schema=None,
                 colmap=None, cset=None):
        self.guesser = guesser
        self.x_full = np.asarray(x_full, float)
        self.mask = np.asarray(mask, float)
        self.true_label = int(true_label)
        self.target = 1 - self.true_label
        self.schema = schema
        self.colmap = colmap
        self.cset = cset
        self.d = self.mask.shape[0]

    def state(self, x):
        return np.concatenate([x * self.mask, self.mask])

    def probs(self, x):
        return nn.forward(self.guesser, self.state(x)).out()

    def logits(self, x):
        trace = nn.forward(self.guesser, self.state(x))
        return trace.pre_act[-1][0], trace

    def grad_x(self, x, target=None):
        """d CE(state, target) / d x, zero on unanswered coordinates."""
        target = self.target if target is None else target
        trace = nn.forward(self.guesser, self.state(x))
        d_s = nn.grad_input(self.guesser, trace, "cross_entropy", target)
        return d_s[: self.d] * self.mask

    def grad_logit_diff(self, x, i, j):
        """Gradient of Z_i - Z_j w.r.t. x (answered coordinates only)."""
        trace = nn.forward(self.guesser, self.state(np.asarray(x, float)))
        d_pre = np.zeros((1, 2))
        d_pre[0, i] = 1.0
        d_pre[0, j] = -1.0
        _, d_s = nn.backward(self.guesser, trace, d_last_pre_act=d_pre)
        return d_s[0][: self.d] * self.mask


def project_ball(delta, epsilon, norm):
    """Project a perturbation into the epsilon-ball of the given norm."""
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        n = np.linalg.norm(delta)
        if n > epsilon and n > 0:
            return delta * (epsilon / n)
        return delta
    raise ValueError(f"unknown norm {norm!r}")


def _finish(ctx, method, x_adv, probs_clean, iterations, t0, config,
            constrain=True):
    """Constraint pipeline + bookkeeping shared by every attack."""
    resolution = None
    x_adv = np.clip(x_adv, config.clip_lo, config.clip_hi)
    if constrain and ctx.cset is not None:
        x_adv, resolution = apply_constraints(x_adv, ctx)
    # unanswered coordinates must be untouched
    x_adv = np.where(ctx.mask == 1, x_adv, ctx.x_full)
    delta = (x_adv - ctx.x_full) * ctx.mask
    probs_adv = ctx.probs(x_adv)
    return AttackResult(
        method=method,
        x_adv=x_adv,
        state_adv=ctx.state(x_adv),
        success=int(np.argmax(probs_adv)) != ctx.true_label,
        probs_clean=probs_clean,
        probs_adv=probs_adv,
        delta=delta,
        delta_l2=float(np.linalg.norm(delta)),
        delta_linf=float(np.abs(delta).max()) if delta.size else 0.0,
        iterations=iterations,
        wall_time=time.perf_counter() - t0,
        resolution=resolution,
        epsilon=config.epsilon,
    )


def apply_constraints(x_adv, ctx):
    """Map to raw units, repair clinical violations, map back."""
    raw_adv = con.to_raw(x_adv, ctx.schema, ctx.colmap, strict=False)
    raw_clean = con.to_raw(ctx.x_full, ctx.schema, ctx.colmap, strict=False)
    repaired, report = con.satisfy(raw_adv, raw_clean, ctx.cset, ctx.schema)
    return con.to_norm(repaired, ctx.schema, ctx.colmap), report.resolution


def fgsm(ctx, config):
    """Single step of size epsilon down the targeted-loss gradient."""
    t0 = time.perf_counter()
    probs_clean = ctx.probs(ctx.x_full)
    g = ctx.grad_x(ctx.x_full)
    delta = -config.epsilon * np.sign(g)
    return _finish(ctx, "fgsm", ctx.x_full + delta, probs_clean, 1, t0, config)


def pgd(ctx, config):
    """Iterative descent with per-iteration ball and constraint projection."""
    t0 = time.perf_counter()
    probs_clean = ctx.probs(ctx.x_full)
    alpha = config.step_size()
    x = ctx.x_full.copy()
    for _ in range(config.iterations):
        g = ctx.grad_x(x)
        if config.norm == "linf":
            step = -alpha * np.sign(g)
        else:
            n = np.linalg.norm(g)
            step = -alpha * g / n if n > 0 else np.zeros_like(g)
        x = x + step
        x = ctx.x_full + project_ball(x - ctx.x_full, config.epsilon, config.norm)
        x = np.clip(x, config.clip_lo, config.clip_hi)
        if ctx.cset is not None:
            x, _ = apply_constraints(x, ctx)
            x = ctx.x_full + project_ball(x - ctx.x_full, config.epsilon,
                                          config.norm)
    return _finish(ctx, "pgd", x, probs_clean, config.iterations, t0, config)


def bim(ctx, config):
    """FGSM applied iteratively with per-coordinate epsilon clipping."""
    t0 = time.perf_counter()
    probs_clean = ctx.probs(ctx.x_full)
    alpha = config.step_size()
    x = ctx.x_full.copy()
    for _ in range(config.iterations):
        g = ctx.grad_x(x)
        x = x - alpha * np.sign(g)
        x = ctx.x_full + np.clip(x - ctx.x_full, -config.epsilon, config.epsilon)
        x = np.clip(x, config.clip_lo, config.clip_hi)
    return _finish(ctx, "bim", x, probs_clean, config.iterations, t0, config)


def _atanh(u):
    return np.arctanh(np.clip(u, -1 + 1e-9, 1 - 1e-9))


def cw(ctx, config):
    """Carlini-Wagner L2: tanh-space minimization of ||delta||^2 + c * f.

    f(x) = max(Z_other - Z_target, -kappa).  Keeps the smallest successful
    perturbation found over the run.  Epsilon acts as a success filter
    (||delta||_2 <= epsilon), not a projection.
    """
    t0 = time.perf_counter()
    probs_clean = ctx.probs(ctx.x_full)
    active = ctx.mask == 1
    w = _atanh(ctx.x_full.copy())
    m_adam = np.zeros_like(w)
    v_adam = np.zeros_like(w)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    tgt, other = ctx.target, ctx.true_label

    best_x = None
    best_norm = np.inf
    x = ctx.x_full.copy()
    for t in range(1, config.cw_iterations + 1):
        x = np.where(active, np.tanh(w), ctx.x_full)
        z, _ = ctx.logits(x)
        fval = z[other] - z[tgt]
        delta = (x - ctx.x_full) * ctx.mask
        if fval < 0:
            n = np.linalg.norm(delta)
            if n < best_norm:
                best_norm = n
                best_x = x.copy()
        # gradient of ||delta||^2 + c * max(f, -kappa) w.r.t. w
        g_x = 2.0 * delta
        if fval > -config.cw_kappa:
            g_x = g_x + config.cw_c * ctx.grad_logit_diff(x, other, tgt)
        g_w = g_x * (1.0 - np.tanh(w) ** 2) * active
        m_adam = b1 * m_adam + (1 - b1) * g_w
        v_adam = b2 * v_adam + (1 - b2) * g_w * g_w
        w = w - config.cw_lr * (m_adam / (1 - b1**t)) / (
            np.sqrt(v_adam / (1 - b2**t)) + eps_adam)

    x_final = best_x if best_x is not None else x
    result = _finish(ctx, "cw", x_final, probs_clean, config.cw_iterations, t0,
                     config)
    if result.success and result.delta_l2 > config.epsilon:
        result.success = False
    return result


def deepfool(ctx, config):
    """Iterative linearization toward the nearest decision boundary."""
    t0 = time.perf_counter()
    probs_clean = ctx.probs(ctx.x_full)
    x = ctx.x_full.copy()
    total = np.zeros_like(x)
    tgt, other = ctx.target, ctx.true_label
    steps = 0
    while steps < config.deepfool_iterations:
        z, _ = ctx.logits(x)
        f = z[other] - z[tgt]             # > 0 while still the clean class
        if f <= 0:
            break
        w_grad = ctx.grad_logit_diff(x, other, tgt)
        wn2 = float(w_grad @ w_grad)
        if wn2 == 0:
            break
        r = -(f / wn2) * w_grad
        total = total + r
        x = ctx.x_full + (1.0 + config.deepfool_overshoot) * total
        x = np.clip(x, config.clip_lo, config.clip_hi)
        steps += 1
    result = _finish(ctx, "deepfool", x, probs_clean, steps, t0, config)
    if result.success and result.delta_l2 > config.epsilon:
        result.success = False
    return result


def autoattack(ctx, config):
    """Ensemble of FGSM, PGD, and C&W; success if any member succeeds.

    Returns the first successful member's perturbation; otherwise the member
    giving the highest adversarial-class probability.  Wall time is the sum
    across members.
    """
    t0 = time.perf_counter()
    members = [fgsm, pgd, cw]
    total_time = 0.0
    total_iters = 0
    best = None
    for fn in members:
        r = fn(ctx, config)
        total_time += r.wall_time
        total_iters += r.iterations
        if r.success:
            best = r
            break
        if best is None or r.probs_adv[ctx.target] > best.probs_adv[ctx.target]:
            best = r
    out = AttackResult(
        method="autoattack",
        x_adv=best.x_adv,
        state_adv=best.state_adv,
        success=best.success,
        probs_clean=best.probs_clean,
        probs_adv=best.probs_adv,
        delta=best.delta,
        delta_l2=best.delta_l2,
        delta_linf=best.delta_linf,
        iterations=total_iters,
        wall_time=max(total_time, time.perf_counter() - t0),
        resolution=best.resolution,
        epsilon=config.epsilon,
    )
    return out


ATTACKS = {
    "fgsm": fgsm,
    "pgd": pgd,
    "bim": bim,
    "cw": cw,
    "deepfool": deepfool,
    "autoattack": autoattack,
}


def run_attack(method, ctx, config):
    try:
        fn = ATTACKS[method]
    except KeyError:
        raise ValueError(f"unknown attack method {method!r}") from None
    return fn(ctx, config)
