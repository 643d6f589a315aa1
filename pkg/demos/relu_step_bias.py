"""ReLU drift: an almost-everywhere differentiable coefficient.

dX = (ReLU(theta X) + 1) dt + dB from X_0 = -0.1, rho = x, T = 2. The drift
derivative jumps at the kink, which the generator gradient handles without
smoothing. The Euler step matters here: at dt = 0.005 the estimate sits
about 0.2 below its dt = 0.001 value.
"""
from jumpgrad import estimators as est
from jumpgrad.sim import SimConfig
from jumpgrad.zoo import zoo_model

N = 20_000
model = zoo_model("relu", theta=2.0)
for steps in (400, 1000, 2000):
    e = est.estimate("GG", model, None, SimConfig(n_steps=steps), N)
    print(f"dt = {2.0 / steps:.4f}: GG {e.mean[0]:.3f} +- {e.se[0]:.3f}")
