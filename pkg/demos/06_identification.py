# %% [markdown]
# # Fitting parameters to a voltage trace
#
# We generate twenty minutes of 1C discharge with the default cell, then hand the fitter a
# wrong ohmic resistance and a wrong capacity and let Levenberg-Marquardt
# pull them back.

# %%
from dataclasses import replace

from iespsoc import model
from iespsoc.harness import identify_params
from iespsoc.profiles import NoiseSpec, add_noise
from iespsoc.scenarios import ProfileSpec, simulate_plant

truth = model.DEFAULT_PARAMS
curves = model.default_curves()
profile = ProfileSpec(kind="constant", c_rate=1.0).build(truth, 1200, 1.0)
plant = simulate_plant(truth, curves, profile, cutoff_v=2.5)
clean = plant.profile.with_voltage(plant.voltage)

guess = replace(truth, R_ohm=truth.R_ohm * 1.2, Q_all=truth.Q_all * 0.93)
report = identify_params(clean, ["R_ohm", "Q_all"], guess, curves)
print("noiseless:", report.to_dict())

# %% [markdown]
# With 5 mV of measurement noise the residual floor is the noise itself,
# and the estimates land close to, but not exactly on, the truth.

# %%
noisy = clean.with_voltage(add_noise(clean.voltage, NoiseSpec(sigma_v=0.005, seed=3)))
report = identify_params(noisy, ["R_ohm", "Q_all"], guess, curves)
print(f"noisy: R_ohm {report.values['R_ohm'] * 1e3:.2f} mOhm (true {truth.R_ohm * 1e3:.2f}), "
      f"Q_all {report.values['Q_all']:.1f} mAh (true {truth.Q_all_mAh:.1f}), "
      f"residual {report.residual_rms * 1e3:.2f} mV after {report.iterations} iterations")
