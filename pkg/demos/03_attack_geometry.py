"""Attack geometry on a linear model, where every answer is checkable.

On a softmax-linear classifier the decision boundary is a hyperplane, so
the minimal perturbation has a closed form.  This script builds such a
model, places a sample a known distance from the boundary, and shows how
each attack relates to that geometry:

  * FGSM takes one signed step of size eps in every answered coordinate;
  * DeepFool jumps (1 + overshoot) times the exact boundary distance;
  * C&W searches for the minimal-norm crossing and should land close to it;
  * masked (unanswered) coordinates are never touched by any method.
"""

import numpy as np

from aqrobust import attacks, nn

rng = np.random.default_rng(42)
d = 6

# a linear guesser: logits = W s, with state s = [x * m, m]
W = rng.normal(size=(2, 2 * d))
net = nn.Network([nn.LayerSpec(2 * d, 2, activation="softmax")])
net.weights[0] = W

x = rng.uniform(-0.5, 0.5, size=d)
mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])  # four answered questions
ctx = attacks.AttackContext(net, x, mask, 0)
label = int(np.argmax(ctx.probs(x)))
ctx = attacks.AttackContext(net, x, mask, label)

# exact distance to the boundary along the masked gradient
zo, zt = label, 1 - label
logits, _ = ctx.logits(x)
w = ctx.grad_logit_diff(x, zo, zt)
f = logits[zo] - logits[zt]
dist = f / np.linalg.norm(w)
print(f"sample: predicted class {label}, logit margin {f:.4f}, "
      f"boundary distance {dist:.4f}")

# ---------------------------------------------------------------------------
# FGSM: one signed step
# ---------------------------------------------------------------------------
eps = 0.25
r = attacks.fgsm(ctx, attacks.AttackConfig(epsilon=eps))
print(f"\nFGSM eps={eps}: success={r.success}, "
      f"|delta|_inf={r.delta_linf:.3f} (expected exactly {eps})")
print("  delta:", np.round(r.delta, 3), " <- zeros where unanswered")

# ---------------------------------------------------------------------------
# DeepFool: the closed-form minimal step, times the overshoot
# ---------------------------------------------------------------------------
r = attacks.deepfool(ctx, attacks.AttackConfig(epsilon=10.0))
print(f"\nDeepFool: success={r.success} in {r.iterations} step(s), "
      f"|delta|_2={r.delta_l2:.4f} vs 1.02 * distance = {1.02 * dist:.4f}")

# ---------------------------------------------------------------------------
# C&W: minimal-norm search; compare against the analytic optimum
# ---------------------------------------------------------------------------
r = attacks.cw(ctx, attacks.AttackConfig(epsilon=10.0, cw_c=5.0,
                                         cw_lr=0.002, cw_iterations=1000))
print(f"\nC&W: success={r.success}, |delta|_2={r.delta_l2:.4f} "
      f"({r.delta_l2 / dist:.1%} of the analytic minimum)")

# ---------------------------------------------------------------------------
# the ensemble: first success among FGSM, PGD, C&W with a shared budget
# ---------------------------------------------------------------------------
for eps in (0.05, 0.2, 0.5):
    r = attacks.autoattack(ctx, attacks.AttackConfig(epsilon=eps))
    print(f"AutoAttack eps={eps}: success={r.success}, "
          f"adversarial confidence {r.probs_adv[ctx.target]:.3f}")
