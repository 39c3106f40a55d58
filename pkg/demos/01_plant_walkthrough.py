# %% [markdown]
# # The cell model on its own
#
# A 1C discharge from a full cell, stopped at 2.5 V. We print where the
# terminal voltage loses ground to each over-potential along the way.

# %%
import numpy as np

from iespsoc import model
from iespsoc.profiles import constant_current
from iespsoc.scenarios import simulate_plant

params = model.DEFAULT_PARAMS
curves = model.default_curves()
profile = constant_current(1.0, params.Q_all, duration=3600)
plant = simulate_plant(params, curves, profile, cutoff_v=2.5)
print(f"{len(plant)} s simulated; {plant.reason or 'ran to the end'}")

# %%
print(f"{'t/s':>6}{'SOC':>7}{'E_ocv':>8}{'eta_con':>9}{'eta_act':>9}{'eta_ohm':>9}{'U':>8}")
for k in np.linspace(0, len(plant) - 1, 8).astype(int):
    state = model.ModelState.from_array(plant.states[k])
    v = model.terminal_voltage(state, params, curves, profile.current[k])
    print(f"{k:>6}{plant.soc[k]:>7.3f}{v.e_ocv:>8.3f}{v.eta_con * 1e3:>8.2f}m"
          f"{v.eta_act * 1e3:>8.2f}m{v.eta_ohm * 1e3:>8.1f}m{v.u_terminal:>8.3f}")

# %% [markdown]
# The ohmic drop dominates at 1C; the electrolyte and kinetic terms are a
# few millivolts. Peukert's correction shrinks the usable capacity at
# higher rates:

# %%
for rate in (0.5, 1.0, 2.0, 3.0):
    print(f"{rate:>4}C  Q_eff = {model.effective_capacity(params, rate) / model.AS_PER_MAH:8.1f} mAh")
