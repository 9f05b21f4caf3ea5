# %% [markdown]
# # Two-stage training and translation on the default config
#
# Stage 1 pretrains the visual encoder and the text autoencoder. Stage 2
# freezes both and trains guidance fusion plus the latent denoiser.
# On one CPU core this takes roughly 15 minutes. Artifacts go to
# `$DIFFSLT_RUN_DIR/notebook` (default `runs/notebook`), and finished stages
# are reused on a rerun.

# %%
import json
import time

from diffslt import pipeline as P
from diffslt.autoencoder import reconstruction_accuracy

run = P.Run(P.Run.default_dir("notebook"))
print(run.cfg.to_text())

# %%
start = time.perf_counter()
split = P.load_data(run) if run.path("data/meta.json").exists() else P.gen_data(run)
if not run.path("visual.ckpt").exists():
    P.pretrain_visual_stage(run, split)
if not run.path("ae.ckpt").exists():
    P.pretrain_ae_stage(run, split)
stage_one = P.load_stage_one(run, split)
print("stage 1 ready after", round(time.perf_counter() - start), "s")
print("autoencoder dev reconstruction",
      reconstruction_accuracy(stage_one.ae, [s.sentence for s in split.dev]))

# %%
if not run.path("diffusion.ckpt").exists():
    P.train_diffusion_stage(run, split)
models = P.load_models(run)

# %% [markdown]
# ## Translate the test split: 5 candidates, DDIM 30 steps, CFG 1.5, MBR pick

# %%
sets = P.translate(run, models=models)
report = P.evaluate(run, models=models, sets=sets)
print("MBR    bleu1-4", [round(report[f"bleu{n}"]["corpus"], 4) for n in range(1, 5)])
print("oracle bleu1-4", [round(report["oracle"][f"bleu{n}"], 4) for n in range(1, 5)])
for ex in report["examples"]:
    print(json.dumps(ex))

# %% [markdown]
# Replacing the guidance by the null token gives the unconditional baseline:
# fluent sentences that ignore the video.

# %%
uncond = P.generate_candidates(models, split.test, unconditional=True)
base = P.evaluate_candidates(models, split.test, uncond)
print("unconditional bleu4", round(base["bleu4"]["corpus"], 4), "vs guided", round(report["bleu4"]["corpus"], 4))

# %% [markdown]
# ## Sampling trajectories, projected on two principal components

# %%
traj = P.export_trajectory(run, sample_index=0, n_seeds=4, models=models)
print(traj)
