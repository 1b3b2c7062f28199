# %% [markdown]
# # Estimating a large-deviation probability
#
# We want `P[Z_n > e^{rho n}]` for `rho = 0.35`, which is tiny. Plain
# simulation at `n = 8` only just sees the event. Tilting the environment
# reaches `n = 40` with the same budget.

# %%
import math

from bpre.envmodel import EnvModel, LogNormal
from bpre.estimate import estimate_ld_prob, prefactor_C1

model = EnvModel(LogNormal(-0.15, 0.25))
rho = 0.35

# %%
naive = estimate_ld_prob(model, "Z", rho, 8, 1_000_000, method="naive", seed=0)
tilted = estimate_ld_prob(model, "Z", rho, 8, 100_000, seed=0)
print("naive ", naive.value, naive.ci())
print("tilted", tilted.value, tilted.ci())

# %% [markdown]
# Multiplying by `sqrt(n) e^{n I}` should level off at the prefactor. The
# rate `I` is 0.5 here.

# %%
pf = prefactor_C1(model, rho)
for n in (10, 20, 30, 40):
    e = estimate_ld_prob(model, "Z", rho, n, 200_000, seed=n)
    print(n, e.value * math.sqrt(n) * math.exp(0.5 * n), "+-", e.stderr * math.sqrt(n) * math.exp(0.5 * n))
print("prefactor", pf.value)
