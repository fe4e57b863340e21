"""Private gradient machinery and the privacy accountant.

Demonstrates per-example clipping, the clipped-and-noised private step, the
closed-form per-step Renyi cost, the conversion to (eps, delta)-DP, and the
selective composition budget with its detector-quality floor on delta.
"""

import numpy as np

from privlm import lm, privacy
from privlm.corpus import TokenSequence, Vocabulary

vocab = Vocabulary([f"w{i}" for i in range(11)])
params = lm.init_params(vocab.size, 8, 8, seed=0)
batch = [TokenSequence.from_text(f"w{i} w{(i+1)%11} w{(i+2)%11} w{(i+3)%11}", vocab)
         for i in range(6)]

# Clipping bounds each example's influence on the update.
_, grad = lm.per_example_gradient(params, batch[0])
clipped = privacy.clip(grad, clip_bound=0.5)
print(f"gradient norm {grad.norm():.4f} -> clipped to {clipped.norm():.4f} (bound 0.5)")
print("clipping is idempotent:",
      np.array_equal(privacy.clip(clipped, 0.5).flat(), clipped.flat()))

spec = privacy.PrivacySpec(sigma=1.0, clip_bound=0.5, delta=1e-5, alpha=2.0, eta=0.1)
stepped = privacy.dp_sgd_step(params, batch, spec, noise=42)
again = privacy.dp_sgd_step(params, batch, spec, noise=42)
print("private step is bit-reproducible under a fixed noise seed:",
      all(np.array_equal(a, b) for a, b in zip(stepped.arrays(), again.arrays())))

# With vanishing noise and an inactive bound, the private step IS plain SGD.
wide = privacy.PrivacySpec(sigma=1e-300, clip_bound=1e9, delta=1e-5, alpha=2.0, eta=0.1)
private = privacy.dp_sgd_step(params, batch, wide, noise=0)
plain = privacy.plain_sgd_step(params, batch, eta=0.1)
print("sigma->0, no clipping: private step == plain step bit-for-bit:",
      all(np.array_equal(a, b) for a, b in zip(private.arrays(), plain.arrays())))

# Accounting: one clipped+noised step costs alpha/(2 sigma^2) in order-alpha RDP.
eps_step = privacy.gaussian_rdp_epsilon(sigma=1.0, alpha=2.0)
print(f"\nper-step RDP cost at alpha=2, sigma=1: {eps_step}")
print(f"converted alone to (eps, 1e-5)-DP: {privacy.rdp_to_dp(eps_step, 2.0, 1e-5):.4f}")

state = privacy.AccountantState(
    epochs=20, sensitive_count=178, batch_size=32,
    per_step_epsilon=eps_step, gamma=1.0, alpha=2.0,
)
eps_total, delta = privacy.selective_dp_budget(state, delta=1e-5)
print(f"selective budget over 20 epochs, 178 sensitive sequences, batch 32: "
      f"eps={eps_total:.2f}, delta={delta}")

# The detector's true-positive rate floors delta: a missed sensitive
# sequence is trained with no noise at all.
state_gamma = privacy.AccountantState(
    epochs=20, sensitive_count=178, batch_size=32,
    per_step_epsilon=eps_step, gamma=0.99, alpha=2.0,
)
try:
    privacy.selective_dp_budget(state_gamma, delta=1e-5)
except privacy.PrivacyError as exc:
    print(f"\ndelta below 1-gamma is rejected: {exc}")
eps_ok, _ = privacy.selective_dp_budget(state_gamma, delta=0.02)
print(f"with delta=0.02 > 1-0.99 it passes: eps={eps_ok:.2f}")
