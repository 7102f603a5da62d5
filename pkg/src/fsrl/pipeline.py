"""Pipeline stages over a run directory.

Each stage reads its inputs from ``out`` (raising :class:`MissingArtifactError`
when a prerequisite has not been produced), writes checkpoints, CSV metrics and
a JSON summary back into ``out``, and returns the summary.
"""

from __future__ import annotations

import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis as an
from . import theory
from .adapter import SteeringAdapter
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import corpus_sequences, gen_corpus, gen_preference_data, read_corpus, read_dataset, write_corpus, write_dataset
from .gradsuite import run_gradient_suite
from .lm import FrozenLM, LMConfig, pretrain_lm
from .reports import write_csv, write_json
from .rng import stream
from .sae import SparseAutoencoder, collect_activations, reconstruction_stats, train_sae
from .simpo import evaluate_simpo, mean_steering_l0, train_adapter, train_full_baseline


class MissingArtifactError(FileNotFoundError):
    """A stage ran before the stage that produces its input."""


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run `{producer}` first")
    return path


def _clean(obj):
    """NaN -> None so summaries are valid JSON."""
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _summary(out: Path, name: str, cfg: RunConfig, body: dict) -> dict:
    body = _clean(body)
    write_json(out / f"{name}_summary.json", {"config": cfg.to_dict(), **body})
    return body


# -- artifact io ---------------------------------------------------------------------------


def save_lm(path: Path, model: FrozenLM, cfg: RunConfig, **meta) -> None:
    arrays = {k: v.data for k, v in model.params.items()}
    save_checkpoint(path, arrays, kind="lm", config=cfg.to_dict(), meta={"lm_config": asdict(model.config), **meta})


def load_lm(path: Path) -> FrozenLM:
    ck = load_checkpoint(_need(path, "train-lm"), kind="lm")
    return FrozenLM(LMConfig(**ck.meta["lm_config"]), ck.tensors)


def save_sae(path: Path, sae: SparseAutoencoder, cfg: RunConfig, **meta) -> None:
    save_checkpoint(path, sae.named_arrays(), kind="sae", config=cfg.to_dict(), meta=meta)


def load_sae(path: Path) -> SparseAutoencoder:
    ck = load_checkpoint(_need(path, "train-sae"), kind="sae")
    return SparseAutoencoder(**ck.tensors)


def save_adapter(path: Path, adapter: SteeringAdapter, cfg: RunConfig, **meta) -> None:
    meta = {"variant": adapter.variant, "ste_eps": adapter.ste_eps, **meta}
    save_checkpoint(path, adapter.named_arrays(), kind="adapter", config=cfg.to_dict(), meta=meta)


def load_adapter(path: Path) -> SteeringAdapter:
    ck = load_checkpoint(_need(path, "train-adapter"), kind="adapter")
    return SteeringAdapter(**ck.tensors, variant=ck.meta["variant"], ste_eps=ck.meta["ste_eps"], trainable=False)


def _data(out: Path):
    train = read_dataset(_need(out / "train.jsonl", "gen-data"))
    val = read_dataset(_need(out / "val.jsonl", "gen-data"))
    return train, val


def _corpus(out: Path):
    return read_corpus(_need(out / "corpus.txt", "gen-data"))


# -- stages --------------------------------------------------------------------------------


def gen_data(cfg: RunConfig, out: Path) -> dict:
    spec = cfg.data.spec()
    docs = gen_corpus(stream(cfg.seed, "data.corpus"), cfg.data.n_corpus, spec)
    triplets = gen_preference_data(stream(cfg.seed, "data.triplets"), cfg.data.n_train + cfg.data.n_val, spec)
    write_corpus(out / "corpus.txt", docs)
    write_dataset(out / "train.jsonl", triplets[: cfg.data.n_train])
    write_dataset(out / "val.jsonl", triplets[cfg.data.n_train :])
    counts = {"style": 0, "content": 0}
    for t in triplets:
        for _, kind in t.corruptions:
            counts[kind] += 1
    return _summary(
        out,
        "data",
        cfg,
        {"n_corpus": len(docs), "n_train": cfg.data.n_train, "n_val": cfg.data.n_val, "corruption_sites": counts},
    )


def train_lm_stage(cfg: RunConfig, out: Path) -> dict:
    seqs = corpus_sequences(_corpus(out))
    res = pretrain_lm(seqs, cfg.lm.lm_config(), cfg.lm.steps, cfg.lm.lr, cfg.seed, cfg.lm.batch_size)
    save_lm(out / "lm.ckpt", res.model, cfg, initial_heldout=res.initial_heldout, final_heldout=res.final_heldout)
    write_csv(out / "lm_metrics.csv", ["step", "loss"], enumerate(res.train_loss), cfg.to_dict())
    return _summary(
        out,
        "lm",
        cfg,
        {
            "initial_heldout_loss": res.initial_heldout,
            "final_heldout_loss": res.final_heldout,
            "uniform_loss": math.log(res.model.config.vocab_size),
        },
    )


def _train_sae_for(model: FrozenLM, cfg: RunConfig, docs) -> tuple[SparseAutoencoder, dict, list]:
    res = train_sae(model, corpus_sequences(docs[: cfg.sae.n_docs]), cfg.sae.train_config(cfg.seed))
    info = {"initial_mse": res.initial_mse, "final_mse": res.final_mse, "final_l0": res.final_l0}
    return res.sae, info, res.metrics


def train_sae_stage(cfg: RunConfig, out: Path) -> dict:
    model = load_lm(out / "lm.ckpt")
    sae, info, metrics = _train_sae_for(model, cfg, _corpus(out))
    save_sae(out / "sae.ckpt", sae, cfg, hook_layer=model.config.hook_layer, **info)
    write_csv(out / "sae_metrics.csv", ["step", "loss", "mse", "l0"], metrics, cfg.to_dict())
    return _summary(out, "sae", cfg, {"hook_layer": model.config.hook_layer, "d_sae": sae.d_sae, **info})


def _sae_l0(model: FrozenLM, sae: SparseAutoencoder, triplets) -> float:
    seqs = [s for t in triplets for s in t.sequences()]
    return reconstruction_stats(sae, collect_activations(model, seqs))[1]


def _fit_adapter(model, sae, train, val, cfg: RunConfig, variant: str | None = None, alpha: float | None = None):
    sc = cfg.simpo.simpo_config(cfg.seed)
    if alpha is not None:
        sc = type(sc)(**{**asdict(sc), "alpha_steer": alpha})
    adapter = SteeringAdapter.init(
        model.config.d_model, sae.d_sae, variant or cfg.simpo.variant, rng=stream(cfg.seed, "adapter.init")
    )
    return adapter, train_adapter(model, sae, adapter, train, val, sc)


def train_adapter_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt")
    train, val = _data(out)
    adapter, res = _fit_adapter(model, sae, train, val, cfg)
    save_adapter(out / "adapter.ckpt", adapter, cfg, val_loss=res.val_loss)
    write_csv(out / "adapter_metrics.csv", ["step", "loss", "l0", "l1"], res.log, cfg.to_dict())
    return _summary(
        out,
        "adapter",
        cfg,
        {
            "variant": adapter.variant,
            "unsteered_val_loss": res.initial_val_loss,
            "val_loss": res.val_loss,
            "improved": res.improved,
            "adapter_mean_l0": res.mean_l0,
            "sae_mean_l0": _sae_l0(model, sae, val),
        },
    )


def train_baseline_stage(cfg: RunConfig, out: Path) -> dict:
    model = load_lm(out / "lm.ckpt")
    train, val = _data(out)
    res = train_full_baseline(model, train, val, cfg.simpo.simpo_config(cfg.seed))
    save_lm(out / "baseline.ckpt", res.model, cfg, val_loss=res.val_loss)
    write_csv(out / "baseline_metrics.csv", ["step", "loss", "l0", "l1"], res.log, cfg.to_dict())
    return _summary(
        out,
        "baseline",
        cfg,
        {"unsteered_val_loss": res.initial_val_loss, "val_loss": res.val_loss, "improved": res.improved},
    )


def eval_loss_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae, adapter = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt"), load_adapter(out / "adapter.ckpt")
    _, val = _data(out)
    sc = cfg.simpo.simpo_config(cfg.seed)
    rows = [
        {"model": "unsteered", "val_loss": evaluate_simpo(model, val, sc), "mean_l0": 0.0},
        {
            "model": "fsrl",
            "val_loss": an.steered_loss(model, sae, adapter, val, sc),
            "mean_l0": mean_steering_l0(model, sae, adapter, val),
        },
    ]
    if (out / "baseline.ckpt").exists():
        rows.append({"model": "full_finetune", "val_loss": evaluate_simpo(load_lm(out / "baseline.ckpt"), val, sc)})
    write_csv(out / "eval_loss.csv", ["model", "val_loss", "mean_l0"], rows, cfg.to_dict())
    return _summary(out, "eval", cfg, {r["model"]: r["val_loss"] for r in rows})


def _masks(cfg: RunConfig, out: Path, model, sae, train) -> dict[str, an.FeatureCategoryMask]:
    masks = an.derive_category_masks(sae, model, train, cfg.analysis.mask_ratio)
    an.write_masks(out / "masks.txt", masks.values())
    return masks


def ablate_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae, adapter = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt"), load_adapter(out / "adapter.ckpt")
    train, val = _data(out)
    sc = cfg.simpo.simpo_config(cfg.seed)
    masks = _masks(cfg, out, model, sae, train)
    full = an.steered_loss(model, sae, adapter, val, sc)
    unsteered = evaluate_simpo(model, val, sc)
    everything = an.FeatureCategoryMask("all", tuple(range(sae.d_sae)), sae.d_sae)
    sets = [[]] + [[m] for m in masks.values()] + [list(masks.values()), [everything]]
    results = [an.ablate_categories(model, sae, adapter, val, s, sc, full) for s in sets]
    rows = [
        {
            "ablated": "+".join(r.ablated) or "none",
            "features_ablated": r.features_ablated,
            "loss": r.loss,
            "full_loss": r.full_loss,
            "unsteered_loss": unsteered,
            "loss_per_feature": r.loss_per_feature,
        }
        for r in results
    ]
    header = ["ablated", "features_ablated", "loss", "full_loss", "unsteered_loss", "loss_per_feature"]
    write_csv(out / "ablation.csv", header, rows, cfg.to_dict())
    by_name = {row["ablated"]: row["loss"] for row in rows}
    names = list(masks)
    interaction = None
    if len(names) == 2:
        interaction = an.category_interaction(by_name["+".join(names)], by_name[names[0]], by_name[names[1]], full)
    return _summary(
        out,
        "ablation",
        cfg,
        {
            "full_loss": full,
            "unsteered_loss": unsteered,
            "empty_ablation_matches_full": by_name["none"] == full,
            "total_ablation_matches_unsteered": by_name["all"] == unsteered,
            "interaction": interaction,
            "mask_sizes": {k: len(m) for k, m in masks.items()},
        },
    )


def topk_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae, adapter = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt"), load_adapter(out / "adapter.ckpt")
    _, val = _data(out)
    sc = cfg.simpo.simpo_config(cfg.seed)
    ks = list(cfg.analysis.topk_pcts)
    if 100.0 not in ks:
        ks.append(100.0)
    curve = an.static_topk_baseline(model, sae, adapter, val, sc, ks)
    rows = [
        {"kind": "static", "k_pct": p.k_pct, "keep_count": p.keep_count, "mean_l0": p.mean_l0, "loss": p.loss}
        for p in curve.points
    ]
    rows.append({"kind": "dynamic", "mean_l0": curve.dynamic_l0, "loss": curve.full_loss})
    rows.append({"kind": "unsteered", "mean_l0": 0.0, "loss": curve.unsteered_loss})
    write_csv(out / "topk.csv", ["kind", "k_pct", "keep_count", "mean_l0", "loss"], rows, cfg.to_dict())
    at100 = next(p for p in curve.points if p.k_pct == 100.0)
    return _summary(
        out,
        "topk",
        cfg,
        {
            "full_loss": curve.full_loss,
            "k100_matches_full": at100.loss == curve.full_loss,
            "dynamic_l0_frac": curve.dynamic_l0_frac,
            "unsteered_loss": curve.unsteered_loss,
        },
    )


def usage_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae, adapter = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt"), load_adapter(out / "adapter.ckpt")
    train, val = _data(out)
    masks = _masks(cfg, out, model, sae, train)
    fits = an.usage_by_context(model, sae, adapter, val, masks)
    fit_rows, ranked_rows = [], []
    for (ctx, subset), fit in fits.items():
        if isinstance(fit, str):
            fit_rows.append({"context": ctx, "subset": subset, "status": fit})
            continue
        fit_rows.append(
            {
                "context": ctx,
                "subset": subset,
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r2": fit.r2,
                "n_fit": fit.n_fit,
                "status": "ok",
            }
        )
        for rank, (feat, freq) in enumerate(zip(fit.features, fit.freqs)):
            ranked_rows.append({"context": ctx, "subset": subset, "rank": rank, "feature": feat, "frequency": freq})
    header = ["context", "subset", "slope", "intercept", "r2", "n_fit", "status"]
    write_csv(out / "usage_fit.csv", header, fit_rows, cfg.to_dict())
    write_csv(out / "usage_ranked.csv", ["context", "subset", "rank", "feature", "frequency"], ranked_rows, cfg.to_dict())
    ok = [f for f in fits.values() if not isinstance(f, str)]
    monotone = all(bool(np.all(np.diff(f.freqs) <= 0)) for f in ok)
    return _summary(out, "usage", cfg, {"n_fits": len(ok), "ranked_non_increasing": monotone})


def composition_stage(cfg: RunConfig, out: Path) -> dict:
    model, sae, adapter = load_lm(out / "lm.ckpt"), load_sae(out / "sae.ckpt"), load_adapter(out / "adapter.ckpt")
    train, val = _data(out)
    masks = _masks(cfg, out, model, sae, train)
    reports = an.composition_report(
        model, sae, adapter, val, masks, n_boot=cfg.analysis.n_boot, seed=int(stream(cfg.seed, "bootstrap").integers(2**31))
    )
    rows = [asdict(r) for r in reports]
    header = list(rows[0])
    write_csv(out / "composition.csv", header, rows, cfg.to_dict())
    return _summary(
        out,
        "composition",
        cfg,
        {
            "adapter_mean_l0": mean_steering_l0(model, sae, adapter, val),
            "sae_mean_l0": _sae_l0(model, sae, val),
            "rows": len(rows),
        },
    )


def sweep_stage(cfg: RunConfig, out: Path, kind: str = "alpha") -> dict:
    lm = load_lm(out / "lm.ckpt")
    train, val = _data(out)
    docs = _corpus(out)
    configs: list[an.SweepConfig] = []
    if kind in ("alpha", "all"):
        configs += [an.SweepConfig(alpha_steer=a) for a in cfg.analysis.sweep_alphas]
    if kind in ("layer", "all"):
        configs += [an.SweepConfig(layer=layer) for layer in cfg.analysis.sweep_layers]
    if kind in ("variant", "all"):
        configs += [an.SweepConfig(variant=v) for v in cfg.analysis.sweep_variants]
    saes: dict[int, SparseAutoencoder] = {}

    def sae_for(layer: int) -> SparseAutoencoder:
        if layer not in saes:
            if layer == lm.config.hook_layer and (out / "sae.ckpt").exists():
                saes[layer] = load_sae(out / "sae.ckpt")
            else:
                saes[layer] = _train_sae_for(FrozenLM(lm.config.with_hook_layer(layer), lm.params), cfg, docs)[0]
        return saes[layer]

    def run_one(c: an.SweepConfig) -> dict:
        layer = lm.config.hook_layer if c.layer is None else c.layer
        model = lm if layer == lm.config.hook_layer else FrozenLM(lm.config.with_hook_layer(layer), lm.params)
        _, res = _fit_adapter(model, sae_for(layer), train, val, cfg, c.variant, c.alpha_steer)
        return {"val_loss": res.val_loss, "unsteered_val_loss": res.initial_val_loss, "mean_l0": res.mean_l0}

    rows = an.sweep(configs, run_one)
    out_rows = []
    for r in rows:
        out_rows.append(
            {
                "layer": lm.config.hook_layer if r.layer is None else r.layer,
                "alpha_steer": cfg.simpo.alpha_steer if r.alpha_steer is None else r.alpha_steer,
                "variant": r.variant or cfg.simpo.variant,
                "status": r.status,
                "val_loss": r.val_loss,
                "unsteered_val_loss": r.unsteered_val_loss,
                "mean_l0": r.mean_l0,
                "error": r.error,
            }
        )
    header = ["layer", "alpha_steer", "variant", "status", "val_loss", "unsteered_val_loss", "mean_l0", "error"]
    write_csv(out / f"sweep_{kind}.csv", header, out_rows, cfg.to_dict())
    return _summary(out, f"sweep_{kind}", cfg, {"runs": len(rows), "failed": sum(r.status != "ok" for r in rows)})


def verify_theory_stage(cfg: RunConfig, out: Path) -> dict:
    t = cfg.theory
    trials = theory.run_trials(t.n_trials, t.d, t.d_sae, cfg.seed, t.n_deltas)
    rows = [{**asdict(tr), "rank_holds": tr.rank_holds, "dW_holds": tr.dW_holds} for tr in trials]
    write_csv(out / "theory.csv", list(rows[0]), rows, cfg.to_dict())
    n = len(trials)
    summary = {
        "trials": n,
        "rank_bound_holds": sum(tr.rank_holds for tr in trials),
        "weight_update_bound_holds": sum(tr.dW_holds for tr in trials),
        "max_affine_error": max(tr.affine_max_err for tr in trials),
        "max_identity_error": max(tr.identity_err for tr in trials),
        "kink_violations_detected": sum(tr.kink_err > 1e-8 for tr in trials),
        "k_median": float(np.median([tr.k for tr in trials])),
    }
    summary["passed"] = (
        summary["rank_bound_holds"] == n
        and summary["weight_update_bound_holds"] == n
        and summary["max_affine_error"] <= 1e-10
        and summary["max_identity_error"] <= 1e-10
    )
    lines = [
        f"rank(A) <= min(k, d): {summary['rank_bound_holds']}/{n}",
        f"rank(W A) <= min(d', k): {summary['weight_update_bound_holds']}/{n}",
        f"max affine error inside safe radius: {summary['max_affine_error']:.3e}",
        f"max weight-update identity error: {summary['max_identity_error']:.3e}",
        f"kink-crossing perturbations detected: {summary['kink_violations_detected']}/{n}",
    ]
    (out / "theory_summary.txt").write_text("\n".join(lines) + "\n")
    return _summary(out, "theory", cfg, summary)


def grad_check_stage(cfg: RunConfig, out: Path) -> dict:
    g = cfg.gradcheck
    rows = run_gradient_suite(g.n_instances, cfg.seed, g.h, g.tol)
    header = ["path", "instance", "param", "max_rel_err", "n_coords", "resamples"]
    write_csv(out / "gradcheck.csv", header, [asdict(r) for r in rows], cfg.to_dict())
    worst = max(r.max_rel_err for r in rows)
    return _summary(
        out,
        "gradcheck",
        cfg,
        {"instances": len({r.instance for r in rows}), "max_rel_err": worst, "tol": g.tol, "passed": worst <= g.tol},
    )
