# %% [markdown]
# # First passage over a high level
#
# How likely is it that the population, or its running total, ever exceeds
# `t`? For the model below the Cramer root is 2, so the probability should
# decay like `t^{-2}`.

# %%
import math
import warnings

from bpre.envmodel import EnvModel, LogNormal
from bpre.estimate import conditioned_passage_stats, estimate_passage_prob, tail_index_fit

model = EnvModel(LogNormal(-0.5, 0.5))

# %%
for kind in ("Z", "W"):
    pts = []
    for lt in (4, 6, 8, 10):
        e = estimate_passage_prob(model, math.exp(lt), kind, 50_000, seed=lt)
        pts.append((math.exp(lt), e.value))
    print(kind, "slope", tail_index_fit(pts).slope)

# %% [markdown]
# Given that the total crosses `t`, the crossing time, scaled by `log t`,
# concentrates near a constant. The spread around it is Gaussian on the
# `sqrt(log t)` scale.

# %%
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    cs = conditioned_passage_stats(model, math.exp(10.0), "W", 50_000, seed=0)
print("mean T / log t", cs.mean_ratio, "KS to normal", cs.ks)
