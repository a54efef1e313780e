"""How much noise does a privacy budget buy?

Walks through the Gaussian-mechanism calibration for a range of epsilons,
checks the empirical spread of the injected noise, and shows the extra noise
the server adds when it reviews a cleaner client's batch against the noisiest
client in the pool.

    python demos/noise_calibration.py
"""

import numpy as np

from sldp.dp import PrivacyBudget, add_gaussian, calibrate_sigma, clamp01, compose_review_sigma

# Calibrated standard deviation for sensitivity 1 and delta 1e-5.
print("epsilon    sigma")
for eps in (0.5, 1.0, 2.0, 4.0, 8.0):
    print(f"{eps:7.1f}  {calibrate_sigma(PrivacyBudget(eps, 1e-5, 1.0)):7.4f}")

# Noise is added after clamping to [0, 1] and is not clamped again,
# so noisy features can land well outside the unit interval.
rng = np.random.default_rng(0)
sigma = calibrate_sigma(PrivacyBudget(2.0, 1e-5, 1.0))
x = clamp01(rng.normal(0.5, 0.5, size=200_000))
noisy = add_gaussian(x, sigma, rng)
print(f"\neps=2: sigma={sigma:.4f}, empirical std of noise {np.std(noisy - x):.4f}")
print(f"fraction of noisy values outside [0,1]: {np.mean((noisy < 0) | (noisy > 1)):.3f}")

# Review: a client at sigma_i is topped up with sigma_hat so its total matches sigma_j.
for si, sj in [(0.0, sigma), (1.0, 2.0), (sigma, sigma)]:
    hat = compose_review_sigma(si, sj)
    total = np.std(add_gaussian(add_gaussian(np.zeros(200_000), si, rng), hat, rng))
    print(f"sigma_i={si:.3f} sigma_j={sj:.3f} -> sigma_hat={hat:.3f}, combined std {total:.3f}")
