"""Sample one wired tree, measure it, and save a snapshot.

    python demos/quickstart.py [out.snap]
"""

import sys

from ustlab import RngStream, Window
from ustlab.harness import load_realization, save_realization
from ustlab.kernel import heat_kernel_exact
from ustlab.stats import volume_profile
from ustlab.treemetrics import effective_resistance, intrinsic_dist, schramm_dist
from ustlab.wilson import sample_ust

w = Window.with_margin(32, 4)
u = sample_ust(w, rng=RngStream(master_seed=1, stream_index=0))
print(f"window L={w.L} L_out={w.L_out}: {u.n_nodes} vertices")

x = (10, 0)
print(f"d_U(0, x) = {intrinsic_dist(u, (0, 0), x)}, Schramm distance = {schramm_dist(u, (0, 0), x)}")
for r, v in zip((4, 8, 16, 32), volume_profile(u, [4, 8, 16, 32])):
    print(f"r={r:3d}  mu(B)={v:6.0f}  R_eff={effective_resistance(u, (0, 0), r):7.3f}")

prof = heat_kernel_exact(u, (0, 0), 1024, radius=200)
print("smoothed return probability:", {n: round(float(prof.on_diagonal[n]), 5) for n in (16, 64, 256, 1024)})

out = sys.argv[1] if len(sys.argv) > 1 else "quickstart.snap"
save_realization(u, out)
assert (load_realization(out).parent == u.parent).all()
print("snapshot written to", out)
