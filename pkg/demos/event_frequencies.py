"""Monte Carlo frequencies of the staged event along straight scale-32 paths.

    python demos/event_frequencies.py [replicates]
"""

import sys
import warnings

from ustlab.events import build_straight_path, estimate_event_probabilities, fit_event_decay

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
warnings.simplefilter("ignore")  # m = 32 is below the default minimum scale
ests = []
for N in (1, 2):
    path = build_straight_path((32 * N, 0), 32, m0=32)
    est, = estimate_event_probabilities([path], 8.0, 4, reps, master_seed=N, keep_reports=False)
    ests.append(est)
    lo, hi = est.interval
    rates = ", ".join(f"{r:.3g}" for r in est.conditional_rates)
    print(f"{est.event_id}: {est.successes}/{reps} = {est.p_hat:.4f} [{lo:.4f}, {hi:.4f}]  stage rates {rates}")
fit = fit_event_decay(ests)
print("decay constant c =", fit.c if fit.Ns else "n/a", "dropped N:", fit.dropped)
