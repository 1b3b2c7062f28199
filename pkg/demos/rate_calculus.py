# %% [markdown]
# # Rate calculus for a lognormal environment
#
# The log-mean `mu` is negative, so a typical population dies out. Large
# values of `Z_n` come from rare runs of good environments. This script
# tabulates the rate functions and finds the Cramer root.

# %%
import numpy as np

from bpre.envmodel import EnvModel, LogNormal, TwoPoint
from bpre.rates import legendre, rate_pack, solve_cramer

model = EnvModel(LogNormal(-0.15, 0.25))

# %%
print("alpha   rho      Lambda   alpha_bar  rate_n")
for alpha in np.linspace(1.1, 2.4, 6):
    rp = rate_pack(model, alpha)
    print(f"{alpha:5.2f}  {rp.rho:7.4f}  {rp.log_lambda:7.4f}  {rp.alpha_bar:8.4f}  {rp.rate_n:7.4f}")

# %% [markdown]
# At the tilt point `rho`, the Legendre transform equals `alpha * rho - Lambda(alpha)`.
# Both sides are computed independently here.

# %%
rp = rate_pack(model, 2.0)
print(legendre(model, rp.rho), 2.0 * rp.rho - rp.log_lambda)

# %% [markdown]
# The Cramer root solves `Lambda(alpha) = 0`. A lognormal law has a closed
# form, `-2 mu / s2`. A two-point law needs a numerical root.

# %%
print(solve_cramer(model).alpha0, -2 * -0.15 / 0.25)
print(solve_cramer(EnvModel(TwoPoint((0.7, 0.3), (0.3, 1.9)))).alpha0)
