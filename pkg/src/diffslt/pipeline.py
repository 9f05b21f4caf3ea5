"""Two-stage training, translation, evaluation, ablations and trajectory export.

A run lives in a directory::

    config.txt        resolved RunConfig
    log.ndjson        one JSON event per line
    data/             corpus (JSONL) and vocabularies
    visual.ckpt       W.*, V.*
    ae.ckpt           PsiE.*, CN.*, RN.*, PsiD.*, norm.mean, norm.std
    diffusion.ckpt    Z.*, GF.*
    candidates.jsonl  translate output
    metrics.json      evaluate output
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffslt import tensor as T
from diffslt.autoencoder import NormStats, TextAutoencoder, pretrain_autoencoder, reconstruction_accuracy
from diffslt.checkpoint import CheckpointError, load_checkpoint, rng_state, save_checkpoint
from diffslt.config import AE_KEYS, VISUAL_KEYS, RunConfig
from diffslt.data import (
    DatasetSplit,
    Grammar,
    detokenize,
    generate_corpus,
    load_corpus,
    make_pseudo_gloss,
    save_corpus,
)
from diffslt.diffusion import DiffusionModel, StageTwoData, build_schedule, train_diffusion
from diffslt.fusion import FusedGuidance
from diffslt.metrics import bleu_n, metrics_report
from diffslt.nn import pad_batch
from diffslt.sampling import (
    CandidateSet,
    SamplerConfig,
    Trajectory,
    candidate_rngs,
    guided_predictor,
    mbr_select,
    oracle_select,
    sample,
)
from diffslt.tensor import Tensor
from diffslt.visual import VisualModel, embed_pseudo_gloss, pretrain_visual

RUN_DIR_ENV = "DIFFSLT_RUN_DIR"


class PrerequisiteError(RuntimeError):
    """A stage was started before the stages it depends on."""


# -- run directory -------------------------------------------------------------
class Run:
    def __init__(self, directory, cfg: RunConfig | None = None, persist: bool = True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_path = self.dir / "config.txt"
        if cfg is None:
            cfg = RunConfig.load(cfg_path) if cfg_path.exists() else RunConfig()
        self.cfg = cfg.resolved()
        if persist or not cfg_path.exists():
            self.cfg.save(cfg_path)

    @classmethod
    def default_dir(cls, name: str = "default") -> Path:
        return Path(os.environ.get(RUN_DIR_ENV, "runs")) / name

    def path(self, name: str) -> Path:
        return self.dir / name

    def log(self, event: dict) -> None:
        with open(self.path("log.ndjson"), "a", encoding="utf-8") as fh:
            fh.write(json.dumps(_jsonable(event), sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# -- stages ---------------------------------------------------------------------
def gen_data(run: Run, grammar: Grammar | None = None) -> DatasetSplit:
    cfg = run.cfg
    split = generate_corpus(cfg.seed, cfg.n_train, cfg.n_dev, cfg.n_test, grammar,
                            cfg.n_signers, cfg.d_raw, cfg.frame_noise, cfg.max_sentence_len,
                            cfg.min_gloss_count)
    save_corpus(split, run.path("data"))
    run.log({"event": "gen_data", "train": len(split.train), "dev": len(split.dev),
             "test": len(split.test), "sentence_vocab": len(split.sentence_vocab),
             "gloss_vocab": len(split.gloss_vocab)})
    return split


def load_data(run: Run) -> DatasetSplit:
    if not run.path("data/meta.json").exists():
        raise PrerequisiteError(f"corpus missing under {run.path('data')}; run gen-data first")
    return load_corpus(run.path("data"))


def _stage_meta(cfg: RunConfig, keys, rng=None) -> dict:
    meta = {"config": cfg.to_text(), "config_hash": cfg.digest(keys)}
    if rng is not None:
        meta["rng_state"] = rng_state(rng)
    return meta


def pretrain_visual_stage(run: Run, split: DatasetSplit | None = None) -> VisualModel:
    cfg = run.cfg
    split = split or load_data(run)
    rng = np.random.default_rng([cfg.seed, 11])
    model, hist = pretrain_visual(split, cfg, rng, log=run.log)
    save_checkpoint(run.path("visual.ckpt"), model.encoder_state(), _stage_meta(cfg, VISUAL_KEYS, rng))
    run.log({"event": "pretrain_visual_done", "dev_token_accuracy": hist["dev_token_accuracy"]})
    return model


def pretrain_ae_stage(run: Run, split: DatasetSplit | None = None) -> TextAutoencoder:
    cfg = run.cfg
    split = split or load_data(run)
    rng = np.random.default_rng([cfg.seed, 21])
    ae, _ = pretrain_autoencoder(split, cfg, rng, log=run.log)
    ae.norm_stats = NormStats(ae.norm_stats.mean.astype(np.float32).astype(np.float64),
                              ae.norm_stats.std.astype(np.float32).astype(np.float64))
    save_checkpoint(run.path("ae.ckpt"), ae.state(), _stage_meta(cfg, AE_KEYS, rng))
    dev_acc = reconstruction_accuracy(ae, [s.sentence for s in split.dev]) if split.dev else None
    run.log({"event": "pretrain_ae_done", "dev_reconstruction": dev_acc})
    return ae


STAGE_ONE_CHECKPOINTS = ("visual.ckpt", "ae.ckpt")


def require_stage_one(run: Run) -> None:
    missing = [name for name in STAGE_ONE_CHECKPOINTS if not run.path(name).exists()]
    if missing:
        raise PrerequisiteError(
            f"missing stage-1 checkpoint(s) {', '.join(missing)} in {run.dir}; "
            "run pretrain-visual and pretrain-ae first"
        )


def _check_stage(run: Run, name: str, keys) -> tuple[dict, dict]:
    path = run.path(name)
    if not path.exists():
        raise PrerequisiteError(f"missing stage-1 checkpoint {path}; run the pretraining stage first")
    arrays, meta = load_checkpoint(path)
    want = run.cfg.digest(keys)
    if meta.get("config_hash") != want:
        raise PrerequisiteError(
            f"{path} was trained with a different config (hash {meta.get('config_hash')} != {want})"
        )
    return arrays, meta


def load_visual(run: Run, vocab_size: int) -> VisualModel:
    arrays, _ = _check_stage(run, "visual.ckpt", VISUAL_KEYS)
    model = VisualModel(run.cfg, vocab_size, np.random.default_rng(0))
    model.load_encoder_state(arrays)
    model.W.freeze()
    model.V.freeze()
    return model


def load_autoencoder(run: Run, vocab_size: int) -> TextAutoencoder:
    arrays, _ = _check_stage(run, "ae.ckpt", AE_KEYS)
    ae = TextAutoencoder(run.cfg, vocab_size, np.random.default_rng(0))
    ae.load_state(arrays)
    for part in (ae.PsiE, ae.CN, ae.RN, ae.PsiD):
        part.freeze()
    return ae


def lemma_ids(split: DatasetSplit, grammar: Grammar | None = None) -> np.ndarray:
    """Sentence-token id naming each gloss id (reserved gloss ids map to pad)."""
    grammar = grammar or Grammar()
    out = np.zeros(len(split.gloss_vocab), dtype=np.int64)
    for gid, tok in enumerate(split.gloss_vocab.itos):
        if gid >= 3:
            out[gid] = split.sentence_vocab.stoi[grammar.lemma(tok)]
    return out


def pseudo_glosses(samples, cfg: RunConfig, split: DatasetSplit, tag: int) -> list[list[int]]:
    return [
        make_pseudo_gloss(s.gloss, cfg.pseudo_gloss_wer, np.random.default_rng([cfg.seed, 41, tag, i]),
                          split.gloss_vocab)
        for i, s in enumerate(samples)
    ]


def guidance_streams(samples, visual: VisualModel, ae: TextAutoencoder, cfg: RunConfig,
                     split: DatasetSplit, tag: int, batch_size: int = 128):
    """Frozen per-sample guidance inputs ``(stream_a, stream_b, source)`` for the configured arm."""
    fw_all, fv_all = [], []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            fw, fv, mask = visual.features([s.frames for s in chunk])
            for j, s in enumerate(chunk):
                n = len(s.frames)
                fw_all.append(fw.data[j, :n].copy())
                fv_all.append(fv.data[j, :n].copy())
    if cfg.mode == "diffslt_p":
        lem = lemma_ids(split)
        fp = [embed_pseudo_gloss(np.asarray(g)[None], ae.PsiE.embed.weight, lem).data[0]
              for g in pseudo_glosses(samples, cfg, split, tag)]
        return fp, fv_all, "pv"
    if cfg.guidance_features == "frame":
        return fw_all, None, "w"
    if cfg.guidance_features == "video":
        return None, fv_all, "v"
    return fw_all, fv_all, "wv"


def stage_two_data(samples, visual, ae, cfg, split, tag: int = 0) -> StageTwoData:
    a, b, source = guidance_streams(samples, visual, ae, cfg, split, tag)
    z0 = ae.normalize(ae.latents([s.sentence for s in samples]))
    return StageTwoData(a, b, z0, source)


def frozen_fingerprint(*modules) -> dict[str, bytes]:
    out = {}
    for i, m in enumerate(modules):
        for name, p in m.named_parameters():
            out[f"{i}.{name}"] = p.data.tobytes()
    return out


@dataclass
class Models:
    cfg: RunConfig
    split: DatasetSplit
    visual: VisualModel
    ae: TextAutoencoder
    diffusion: DiffusionModel | None = None


def load_stage_one(run: Run, split: DatasetSplit | None = None) -> Models:
    split = split or load_data(run)
    visual = load_visual(run, len(split.sentence_vocab))
    ae = load_autoencoder(run, len(split.sentence_vocab))
    return Models(run.cfg, split, visual, ae)


def train_diffusion_stage(run: Run, split: DatasetSplit | None = None, cfg: RunConfig | None = None,
                          ckpt_name: str = "diffusion.ckpt", seed: int | None = None) -> Models:
    """Stage 2: freeze W, V, PsiE, CN, RN, PsiD; train GF and the denoiser."""
    require_stage_one(run)
    models = load_stage_one(run, split)
    cfg = (cfg or run.cfg).resolved()
    seed = cfg.seed if seed is None else seed
    before = frozen_fingerprint(models.visual.W, models.visual.V, models.ae.PsiE, models.ae.CN,
                                models.ae.RN, models.ae.PsiD)
    data = stage_two_data(models.split.train, models.visual, models.ae, cfg, models.split, tag=0)
    rng = np.random.default_rng([seed, 51])
    model = DiffusionModel(cfg, rng)
    sched = build_schedule(cfg.schedule, cfg.T, cfg.schedule_scale)
    train_diffusion(model, data, cfg, sched, log=run.log, seed=seed)
    after = frozen_fingerprint(models.visual.W, models.visual.V, models.ae.PsiE, models.ae.CN,
                               models.ae.RN, models.ae.PsiD)
    if before != after:
        raise RuntimeError("frozen stage-1 parameters changed during diffusion training")
    meta = _stage_meta(cfg, VISUAL_KEYS + AE_KEYS, rng)
    meta["stage2_config"] = cfg.to_text()
    save_checkpoint(run.path(ckpt_name), model.state(), meta)
    models.diffusion = model
    models.cfg = cfg
    return models


def load_models(run: Run, ckpt_name: str = "diffusion.ckpt", cfg: RunConfig | None = None) -> Models:
    models = load_stage_one(run)
    path = run.path(ckpt_name)
    if not path.exists():
        raise PrerequisiteError(f"missing diffusion checkpoint {path}; run train-diffusion first")
    arrays, meta = load_checkpoint(path)
    if cfg is None:
        cfg = RunConfig.from_text(meta.get("stage2_config", run.cfg.to_text())).resolved()
    model = DiffusionModel(cfg, np.random.default_rng(0))
    model.load_state(arrays)
    model.Z.freeze()
    model.GF.freeze()
    models.diffusion = model
    models.cfg = cfg
    return models


# -- inference --------------------------------------------------------------------
def _guidance_for(models: Models, samples, tag: int) -> tuple[FusedGuidance, int]:
    a, b, source = guidance_streams(samples, models.visual, models.ae, models.cfg, models.split, tag)
    data = StageTwoData(a, b, np.zeros((len(samples), 1)), source)
    gb, _ = data.batch(np.arange(len(samples)))
    with T.no_grad():
        return gb.fuse(models.diffusion), len(samples)


def _repeat(g: FusedGuidance, n: int) -> FusedGuidance:
    return FusedGuidance(Tensor(np.repeat(g.values.data, n, axis=0)), np.repeat(g.mask, n, axis=0), g.source)


def sampler_config(cfg: RunConfig, **overrides) -> SamplerConfig:
    base = dict(sampler=cfg.sampler, steps=cfg.sampling_steps, cfg_scale=cfg.cfg_scale, eta=cfg.eta,
                seed=cfg.sample_seed, self_condition=cfg.self_cond_prob > 0)
    base.update(overrides)
    return SamplerConfig(**base)


def sample_latents(models: Models, samples, source_ids, n: int, scfg: SamplerConfig,
                   unconditional: bool = False, trajectory: Trajectory | None = None) -> np.ndarray:
    """Normalised latents ``[len(samples) * n, l, d]``; row ``i * n + k`` is candidate k of source i."""
    guidance, count = _guidance_for(models, samples, tag=1)
    guidance = _repeat(guidance, n)
    null = models.diffusion.GF.null_guidance(count * n)
    w = 0.0 if unconditional else scfg.cfg_scale
    predict = guided_predictor(models.diffusion, guidance, null, w)
    sched = build_schedule(models.cfg.schedule, models.cfg.T, models.cfg.schedule_scale)
    rngs = candidate_rngs(scfg.seed, source_ids, n)
    shape = (count * n, models.cfg.latent_len, models.cfg.latent_dim)
    return sample(predict, shape, sched, scfg, rngs, trajectory)


def generate_candidates(models: Models, samples, n: int | None = None, scfg: SamplerConfig | None = None,
                        source_ids=None, unconditional: bool = False, chunk: int = 64,
                        with_oracle: bool = True) -> list[CandidateSet]:
    """Sample ``n`` candidates per source, decode them and run MBR (and oracle) selection."""
    n = models.cfg.n_candidates if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    scfg = scfg or sampler_config(models.cfg)
    source_ids = list(range(len(samples))) if source_ids is None else list(source_ids)
    out = []
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        ids = source_ids[start : start + chunk]
        z = sample_latents(models, part, ids, n, scfg, unconditional)
        sents = models.ae.decode_latents(models.ae.denormalize(z))
        for i, (s, sid) in enumerate(zip(part, ids)):
            cands = sents[i * n : (i + 1) * n]
            cs = CandidateSet(sid, cands, z[i * n : (i + 1) * n], seed_base=scfg.seed)
            cs.mbr_index = mbr_select(cands)
            if with_oracle:
                cs.oracle_index = oracle_select(cands, s.sentence)
            out.append(cs)
    return out


def evaluate_candidates(models: Models, samples, sets: list[CandidateSet]) -> dict:
    """Metrics for MBR picks, plus oracle-pick BLEU and the per-sample dominance check."""
    vocab = models.split.sentence_vocab
    refs = [s.sentence for s in samples]
    mbr = [cs.candidates[cs.mbr_index] for cs in sets]
    train = [s.sentence for s in models.split.train]
    report = metrics_report(mbr, refs, train, embed=_embedder(models.ae),
                            max_pairs=models.cfg.homogenization_max_pairs)
    oracle = [cs.candidates[cs.oracle_index] for cs in sets]
    mbr_b4 = [bleu_n(p, r, 4) for p, r in zip(mbr, refs)]
    ora_b4 = [bleu_n(p, r, 4) for p, r in zip(oracle, refs)]
    oracle_report = metrics_report(oracle, refs, train, max_pairs=models.cfg.homogenization_max_pairs)
    report["oracle"] = {k: oracle_report[k]["corpus"] for k in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL")}
    report["oracle"]["bleu4_mean"] = float(np.mean(ora_b4))
    report["mbr_bleu4_mean"] = float(np.mean(mbr_b4))
    report["oracle_dominates"] = bool(all(o >= m for o, m in zip(ora_b4, mbr_b4)))
    report["n_sources"] = len(sets)
    report["n_candidates"] = len(sets[0].candidates) if sets else 0
    report["examples"] = [
        {"reference": detokenize(r, vocab), "mbr": detokenize(m, vocab)} for r, m in list(zip(refs, mbr))[:5]
    ]
    return report


def _embedder(ae: TextAutoencoder):
    def embed(tokens):
        ids = np.asarray(tokens, dtype=np.int64)[None]
        with T.no_grad():
            return ae.PsiE(ids, np.ones(ids.shape, dtype=bool)).data[0]

    return embed


def translate(run: Run, split_name: str = "test", n: int | None = None, scfg: SamplerConfig | None = None,
              models: Models | None = None) -> list[CandidateSet]:
    models = models or load_models(run)
    samples = models.split.splits()[split_name]
    sets = generate_candidates(models, samples, n, scfg)
    vocab = models.split.sentence_vocab
    with open(run.path("candidates.jsonl"), "w", encoding="utf-8") as fh:
        for cs in sets:
            fh.write(json.dumps(cs.to_record(lambda c: detokenize(c, vocab)), sort_keys=True) + "\n")
    run.log({"event": "translate", "split": split_name, "sources": len(sets)})
    return sets


def evaluate(run: Run, split_name: str = "test", models: Models | None = None,
             sets: list[CandidateSet] | None = None) -> dict:
    models = models or load_models(run)
    samples = models.split.splits()[split_name]
    sets = sets if sets is not None else generate_candidates(models, samples)
    report = evaluate_candidates(models, samples, sets)
    text = json.dumps(_jsonable(report), sort_keys=True, indent=1) + "\n"
    run.path("metrics.json").write_text(text, encoding="utf-8")
    run.log({"event": "evaluate", "bleu4": report["bleu4"]["corpus"], "oracle_bleu4": report["oracle"]["bleu4"]})
    return report


# -- ablations --------------------------------------------------------------------
ABLATION_KINDS = ("sampler", "cfg_scale", "candidates", "selfcond", "gfm")
SAMPLER_GRID = [("ddpm", 250), ("ddpm", 500), ("ddpm", 1000), ("ddim", 15), ("ddim", 30), ("ddim", 50)]
CFG_GRID = [1.0, 1.5, 2.0, 3.0]
CANDIDATE_GRID = [3, 5, 10, 20]
GFM_FEATURE_ARMS = [("frame", 3, True, True), ("video", 3, True, True), ("both", 3, True, True)]
GFM_DESIGN_ARMS = [("both", n, s, e) for n in (1, 2, 3) for s in (True, False) for e in (True, False)
                   if (n, s, e) != (3, True, True)]


def ablation_arms(kind: str, quick: bool = False) -> list[dict]:
    """The grid of one ablation: a list of dicts of overrides per arm."""
    if kind == "sampler":
        return [{"sampler": s, "sampling_steps": k, "cfg_scale": w}
                for s, k in SAMPLER_GRID for w in CFG_GRID]
    if kind == "cfg_scale":
        return [{"cfg_scale": w} for w in CFG_GRID]
    if kind == "candidates":
        return [{"n_candidates": n} for n in CANDIDATE_GRID]
    if kind == "selfcond":
        return [{"self_cond_prob": 0.0}, {"self_cond_prob": 0.5}]
    if kind == "gfm":
        return [{"guidance_features": f, "fusion_layers": n, "fusion_skip": s, "early_fusion": e}
                for f, n, s, e in GFM_FEATURE_ARMS + GFM_DESIGN_ARMS]
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {ABLATION_KINDS}")


TRAINING_KEYS = {"self_cond_prob", "guidance_features", "fusion_layers", "fusion_skip", "early_fusion",
                 "cond_drop_prob", "diffusion_steps", "denoiser_blocks"}


def _arm_name(arm: dict) -> str:
    return "_".join(f"{k}-{v}" for k, v in sorted(arm.items()))


def run_arm(run: Run, arm: dict, seed: int = 0, split_name: str = "test", base: RunConfig | None = None,
            limit: int | None = None, trained: dict | None = None) -> dict:
    """Evaluate one arm; retrains stage 2 when the arm changes a training key."""
    base = base or run.cfg
    cfg = base.with_overrides({k: str(v) for k, v in arm.items()}).resolved()
    changed = {k for k in TRAINING_KEYS & set(arm) if getattr(cfg, k) != getattr(base.resolved(), k)}
    needs_training = bool(changed) or seed != base.seed
    start = time.perf_counter()
    if needs_training:
        key = (_arm_name({k: arm[k] for k in sorted(changed)}) if changed else "base") + f"_seed-{seed}"
        ckpt = f"ablate_{key}.ckpt"
        if trained is not None and key in trained:
            models = trained[key]
        elif run.path(ckpt).exists():
            models = load_models(run, ckpt, cfg)
        else:
            train_cfg = dataclasses.replace(cfg, seed=seed)
            models = train_diffusion_stage(run, cfg=train_cfg, ckpt_name=ckpt, seed=seed)
        if trained is not None:
            trained[key] = models
    else:
        models = trained.get("base") if trained else None
        if models is None:
            models = load_models(run)
            if trained is not None:
                trained["base"] = models
    models = dataclasses.replace(models, cfg=dataclasses.replace(models.cfg, **_sampling_fields(cfg)))
    samples = models.split.splits()[split_name][:limit]
    scfg = sampler_config(models.cfg, seed=cfg.sample_seed + 1000 * seed)
    sets = generate_candidates(models, samples, cfg.n_candidates, scfg)
    report = evaluate_candidates(models, samples, sets)
    row = dict(arm)
    row["seed"] = seed
    for n in range(1, 5):
        row[f"bleu{n}"] = report[f"bleu{n}"]["corpus"]
        row[f"oracle_bleu{n}"] = report["oracle"][f"bleu{n}"]
    row["rougeL"] = report["rougeL"]["corpus"]
    row["oracle_rougeL"] = report["oracle"]["rougeL"]
    row["mbr_bleu4_mean"] = report["mbr_bleu4_mean"]
    row["oracle_bleu4_mean"] = report["oracle"]["bleu4_mean"]
    row["oracle_ge_mbr"] = report["oracle_dominates"]
    for k in ("diversity", "compression_ratio", "homogenization", "memorization", "embsim"):
        row[k] = report[k]["corpus"]
    row["wall_time_s"] = round(time.perf_counter() - start, 3)
    return row


def _sampling_fields(cfg: RunConfig) -> dict:
    keys = ("sampler", "sampling_steps", "cfg_scale", "eta", "n_candidates", "sample_seed")
    return {k: getattr(cfg, k) for k in keys}


ABLATION_COLUMNS = ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "oracle_bleu1", "oracle_bleu2",
                    "oracle_bleu3", "oracle_bleu4", "oracle_rougeL", "mbr_bleu4_mean", "oracle_bleu4_mean",
                    "oracle_ge_mbr", "diversity", "compression_ratio", "homogenization", "memorization",
                    "embsim", "wall_time_s"]


def ablate(run: Run, kind: str, seeds=(0,), split_name: str = "test", limit: int | None = None,
           arms: list[dict] | None = None, out: Path | None = None) -> list[dict]:
    """Run every arm of an ablation grid for each seed and write a CSV table."""
    arms = arms if arms is not None else ablation_arms(kind)
    trained: dict = {}
    rows = []
    for seed in seeds:
        for arm in arms:
            row = run_arm(run, arm, seed, split_name, limit=limit, trained=trained)
            rows.append(row)
            run.log({"event": "ablate_arm", "kind": kind, **row})
    keys = sorted({k for a in arms for k in a})
    out = out or run.path(f"ablate_{kind}.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys + ["seed"] + ABLATION_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


# -- trajectories -------------------------------------------------------------------
def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project rows onto the top two principal components; returns ``(coords, explained_variance)``."""
    x = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    coords = x @ vt[:2].T
    return coords, (s[:2] ** 2) / max(len(points) - 1, 1)


def export_trajectory(run: Run, sample_index: int = 0, n_seeds: int = 4, split_name: str = "test",
                      models: Models | None = None, out: Path | None = None) -> dict:
    """Dump ``z_t`` at every sampler step for several seeds plus the ground-truth ``z_0``.

    Rows: ``n_seeds * (steps + 1) + 1``. Columns: kind, seed, step, t, pc1,
    pc2, then the flattened latent.
    """
    models = models or load_models(run)
    sample_obj = models.split.splits()[split_name][sample_index]
    scfg = sampler_config(models.cfg)
    traj = Trajectory()
    sample_latents(models, [sample_obj], [sample_index], n_seeds, scfg, trajectory=traj)
    z0 = models.ae.normalize(models.ae.latents([sample_obj.sentence]))[0]
    rows, meta = [], []
    for step, (t, lat) in enumerate(zip(traj.timesteps, traj.latents)):
        for k in range(n_seeds):
            rows.append(lat[k].reshape(-1))
            meta.append(("sample", k, step, t))
    rows.append(z0.reshape(-1))
    meta.append(("ground_truth", -1, -1, 0))
    points = np.stack(rows)
    coords, var = pca_2d(points)
    out = out or run.path("trajectory.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "seed", "step", "t", "pc1", "pc2"] + [f"z{i}" for i in range(points.shape[1])])
        for (kind, seed, step, t), c, p in zip(meta, coords, points):
            writer.writerow([kind, seed, step, t, repr(float(c[0])), repr(float(c[1]))]
                            + [repr(float(v)) for v in p])
    final = np.stack([traj.latents[-1][k].reshape(-1) for k in range(n_seeds)])
    initial = np.stack([traj.latents[0][k].reshape(-1) for k in range(n_seeds)])
    return {
        "rows": len(rows),
        "explained_variance": var.tolist(),
        "final_distance": float(np.linalg.norm(final - z0.reshape(-1), axis=1).mean()),
        "initial_distance": float(np.linalg.norm(initial - z0.reshape(-1), axis=1).mean()),
        "path": str(out),
    }


def run_all(run: Run, grammar: Grammar | None = None) -> dict:
    """gen-data, both pretraining stages, train-diffusion, translate and evaluate."""
    split = gen_data(run, grammar)
    pretrain_visual_stage(run, split)
    pretrain_ae_stage(run, split)
    train_diffusion_stage(run, split)
    models = load_models(run)
    sets = translate(run, models=models)
    return evaluate(run, models=models, sets=sets)
