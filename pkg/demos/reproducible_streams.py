"""Random numbers keyed by (seed, replication, purpose).

Every replication draws from its own counter-based stream, so a sample does
not depend on which batch it was simulated in or how many workers ran.
"""
import numpy as np

from jumpgrad import estimators as est
from jumpgrad.rng import RngStream
from jumpgrad.sim import SimConfig
from jumpgrad.zoo import build_jump_test

whole = RngStream.for_range(7, 0, 8)
part = RngStream.for_range(7, 5, 8)
print("replications 5..7 from the full batch:", whole.uniform("tau", 0, 1)[5:, 0])
print("replications 5..7 drawn on their own: ", part.uniform("tau", 0, 1)[:, 0])

model, cfg = build_jump_test(), SimConfig(n_steps=50, master_seed=3)
one = est.run_samples("GG", model, None, cfg, 2000, workers=1, chunk=256)
four = est.run_samples("GG", model, None, cfg, 2000, workers=4, chunk=256)
print("identical with 1 and 4 workers:", one.gradient.tobytes() == four.gradient.tobytes())
print("mean", est.mc_aggregate(one).mean)
