# %% [markdown]
# # An aged cell read with a fresh cell's parameters
#
# The plant drifts linearly per hundred cycles (capacity fade, ohmic growth,
# a small loss of cyclable lithium); the observers start from the nominal set.

# %%
from iespsoc import model
from iespsoc.harness import run_batch
from iespsoc.scenarios import AgingSpec, age_params, study_configs

batch = run_batch(study_configs("aging", seed=1), "aging")
print(batch.summary_text())

# %% [markdown]
# The adapted vector covers capacity and stoichiometry but not the ohmic
# resistance. The unmodelled resistance growth therefore shows up as a
# voltage offset that the state observer can only explain by shifting SOC.
# A rough size of that bias:

# %%
base = model.DEFAULT_PARAMS
curves = model.default_curves()
for cycles in (100, 400):
    aged = age_params(base, AgingSpec(cycles=cycles))
    d_r = aged.R_ohm - base.R_ohm
    x = model.state_for_soc(0.8).stoichiometries(base)
    slope = (curves.e_ocv(x["x_sp_avg"], x["x_sn_avg"])
             - curves.e_ocv(x["x_sp_avg"] + 0.01 * base.D_p, x["x_sn_avg"] - 0.01 * base.D_n)) / 0.01
    bias = d_r * base.one_c_current / slope * 100
    print(f"{cycles} cycles: dR = {d_r * 1e3:.2f} mOhm, OCV slope {slope:.2f} V/unit SOC, "
          f"bias at 1C ~ {bias:.2f} % SOC")
