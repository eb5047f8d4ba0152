"""Why the moment-based variance needs rescuing as clusters grow.

The moment-based estimate is the difference of two terms that converge
to each other as the cluster size m rises, so with a finite number of
outputations its sampling noise swamps the signal and the estimate goes
negative a good share of the time.  The stabilized estimate never does.

Writes trajectory.csv; renders trajectory.png when matplotlib is
available.
"""

import numpy as np

from outputation.simulate import variance_trajectory

report = variance_trajectory(n=200, B=2, M=250, m_grid=range(2, 31, 2),
                             repeats=10, master_seed=0, workers=4)
report.write_csv("trajectory.csv")
print("wrote trajectory.csv")

rows = report.rows
ms = sorted({r["m"] for r in rows})
print(f"\n{'m':>4} {'mean moment':>14} {'mean stabilized':>16} "
      f"{'negative share':>15}")
for m in ms:
    sub = [r for r in rows if r["m"] == m]
    mom = np.mean([r["var_moment"] for r in sub])
    stab = np.mean([r["var_stabilized"] for r in sub])
    frac = np.mean([r["moment_negative"] for r in sub])
    print(f"{m:>4} {mom:>14.3e} {stab:>16.3e} {frac:>15.2f}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not installed; skipping the figure")
else:
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label, color in (("var_moment", "moment-based (M=250)", "tab:orange"),
                              ("var_stabilized", "stabilized (M=250)", "black")):
        mean = [np.mean([r[key] for r in rows if r["m"] == m]) for m in ms]
        sd = [np.std([r[key] for r in rows if r["m"] == m]) for m in ms]
        ax.plot(ms, mean, color=color, label=label)
        ax.fill_between(ms, np.array(mean) - 2 * np.array(sd),
                        np.array(mean) + 2 * np.array(sd),
                        color=color, alpha=0.2)
    ax.axhline(0.0, color="gray", lw=0.8, ls="--")
    ax.set_xlabel("observations per cluster (m)")
    ax.set_ylabel("slope variance estimate")
    ax.legend()
    fig.tight_layout()
    fig.savefig("trajectory.png", dpi=120)
    print("wrote trajectory.png")
