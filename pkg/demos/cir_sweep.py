"""CIR long-run mean sensitivity and what happens as the Feller condition fails.

dX = (theta - X) dt + sqrt(X) dB, reward rho = x, T = 2. The gradient in
theta is 1 + e^{-2} whatever theta is, but as theta drops the process spends
time near zero where the square-root volatility is not smooth and the
generator gradient gets noisier.
"""
import numpy as np

from jumpgrad import estimators as est
from jumpgrad.rng import RngStream
from jumpgrad.sim import SimConfig, simulate_base
from jumpgrad.zoo import cir_gradient_exact, zoo_model

N = 20_000
cfg = SimConfig(n_steps=400)
exact = cir_gradient_exact(2.0)
print(f"exact {exact:.5f}   (N = {N})")
print(f"{'theta':>6} {'GG':>9} {'SE':>8} {'FD(h=.05)':>10} {'SE':>8}")
for theta in (4.0, 2.0, 0.55, 0.45, 0.2):
    m = zoo_model("cir", theta=theta)
    gg = est.estimate("GG", m, None, cfg, N)
    fd = est.estimate("FD", m, None, cfg, N, h=0.05)
    print(f"{theta:6.2f} {gg.mean[0]:9.4f} {gg.se[0]:8.4f} {fd.mean[0]:10.4f} {fd.se[0]:8.4f}")

# the reflected Euler scheme never leaves the half line

res = simulate_base(zoo_model("cir", theta=0.2), np.array([0.1]), 0.0, 2.0,
                    SimConfig(n_steps=400, record_path=True), RngStream.for_range(0, 0, 1000))
print("smallest state visited:", res.path.min())
