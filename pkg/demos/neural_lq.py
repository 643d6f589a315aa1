"""Neural feedback control of a noisy point mass.

State (px, py, vx, vy), force control from a tanh network u_theta(t, x),
quadratic cost. We compare generator-gradient and pathwise standard errors
per parameter, then take a few gradient steps on the policy.
"""
import numpy as np

from jumpgrad import estimators as est
from jumpgrad.harness import lq_model
from jumpgrad.sim import SimConfig
from jumpgrad.zoo import build_lq, default_lq

cfg = SimConfig(n_steps=400)
model = lq_model(5)
print("policy parameters:", model.dim_param)

gg = est.estimate("GG", model, None, cfg, 400, reward_mode="shared")
pd = est.estimate("PD", model, None, cfg, 400, randomize_time=True)
rep = est.se_comparison(gg, pd)
agree = np.abs(gg.mean - pd.mean) <= 3 * np.hypot(gg.se, pd.se)
print(f"coordinates agreeing within 3 SE: {agree.sum()}/{agree.size}")
print(f"mean SE  GG {rep.avg_se_gg:.4f}   PD {rep.avg_se_pd:.4f}   ratio {rep.avg_ratio:.2f}")
print(f"GG wall {gg.wall_seconds:.1f}s, PD wall {pd.wall_seconds:.1f}s")

# plain gradient descent on the expected cost
spec = default_lq()
small = SimConfig(n_steps=100)
for step in range(5):
    m = build_lq(spec)
    cost, se = est.value_estimate(m, None, small, 512)
    g = est.estimate("GG", m, None, small, 512, reward_mode="shared").mean
    print(f"step {step}: cost {cost:.4f} +- {se:.4f}, |grad| {np.linalg.norm(g):.3f}")
    spec.theta = spec.theta - 0.1 * g
