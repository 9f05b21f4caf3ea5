# %% [markdown]
# # Ablations on a trained run
#
# Expects the run from `02_train_and_translate.py`. Sampling-only grids
# (CFG scale, candidate count) reuse the trained model. Arms that change
# training (guidance features, self-conditioning) retrain stage 2, which
# takes a few minutes each. `LIMIT` trims the test split for speed.

# %%
import statistics

from diffslt import pipeline as P

run = P.Run(P.Run.default_dir("notebook"), persist=False)
LIMIT = 100
SEEDS = (0,)

# %%
def table(rows, keys, cols=("bleu4", "oracle_bleu4", "diversity", "wall_time_s")):
    print(" | ".join(list(keys) + ["seed"] + list(cols)))
    for r in rows:
        print(" | ".join([str(r[k]) for k in keys] + [str(r["seed"])] + [f"{r[c]:.4f}" for c in cols]))


rows = P.ablate(run, "cfg_scale", seeds=SEEDS, limit=LIMIT)
table(rows, ["cfg_scale"])

# %%
rows = P.ablate(run, "candidates", seeds=SEEDS, limit=LIMIT)
table(rows, ["n_candidates"])

# %% [markdown]
# Guidance features: frame-level only, video-level only, or both streams.

# %%
arms = [a for a in P.ablation_arms("gfm") if (a["fusion_layers"], a["fusion_skip"], a["early_fusion"]) == (3, True, True)]
rows = P.ablate(run, "gfm", seeds=SEEDS, limit=LIMIT, arms=arms, out=run.path("ablate_gfm_features.csv"))
table(rows, ["guidance_features"])

# %%
rows = P.ablate(run, "selfcond", seeds=SEEDS, limit=LIMIT)
table(rows, ["self_cond_prob"])
for p in (0.0, 0.5):
    print(p, statistics.median(r["bleu4"] for r in rows if r["self_cond_prob"] == p))
