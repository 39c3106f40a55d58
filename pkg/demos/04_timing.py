# %% [markdown]
# # Cost per step
#
# Every variant replays the same noisy 1C trace; only the estimator loop is
# timed. Absolute numbers depend on the machine; the ordering is the point.

# %%
from iespsoc.harness import bench_variants
from iespsoc.scenarios import ProfileSpec, ScenarioConfig

for profile in ("1c", "dynamic"):
    cfg = ScenarioConfig(profile=ProfileSpec.parse(profile, seed=1), duration=1400)
    report = bench_variants(cfg, ("state-only", "adaptive-dz", "plain-dual"), repetitions=7)
    print(f"--- {profile}")
    print(report.text())

# %% [markdown]
# The parameter observer is only expensive when it actually moves the
# parameters: a new parameter vector invalidates the cached propagation
# matrices and Lyapunov solution. With the gate shut those are reused.
