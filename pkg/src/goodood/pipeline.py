"""Pipeline stages. Each stage reads its inputs from the run directory, writes
its outputs there, and refuses to overwrite existing outputs unless forced.

Randomness for a stage comes from ``derive_seed(config.seed, <stage label>)``,
so any stage can be rerun on its own and reproduce the same files.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, diffusion, guidance, oe, scores
from .config import RunConfig
from .evaldetect import ScoreReport
from .numcore import chain_rngs, derive_seed, make_rng, save_json, save_mlp

log = logging.getLogger(__name__)

MODELS = ("pretrained", "finetuned")
SCORES = ("energy", "knn", "unified")


class MissingArtifactError(FileNotFoundError):
    pass


class OutputExistsError(FileExistsError):
    pass


class Layout:
    """Paths inside a run directory."""

    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda s: s.root / "data")
    models = property(lambda s: s.root / "models")
    logs = property(lambda s: s.root / "logs")
    samples = property(lambda s: s.root / "ood_samples")
    reports = property(lambda s: s.root / "reports")
    config = property(lambda s: s.root / "config.json")

    @property
    def id_train(self):
        return self.data / "id_train.csv"

    @property
    def id_val(self):
        return self.data / "id_val.csv"

    def ood_test(self, kind):
        return self.data / f"ood_test_{kind}.csv"

    @property
    def denoiser(self):
        return self.models / "denoiser.json"

    def classifier(self, model="pretrained"):
        return self.models / ("classifier.json" if model == "pretrained" else "classifier_finetuned.json")

    def bank(self, model="pretrained"):
        return self.models / ("bank.json" if model == "pretrained" else "bank_finetuned.json")

    @property
    def psi(self):
        return self.models / "psi.json"

    @property
    def manifest(self):
        return self.samples / "manifest.json"


def _require(*paths):
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"missing artifact: {p}")


def _guard(force, *paths):
    if force:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise OutputExistsError(f"refusing to overwrite {existing[0]} (use --force)")


def write_rows_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r[h] for h in header)])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


# ---------------------------------------------------------------- stages

def init_config(cfg: RunConfig, path, force: bool = False) -> Path:
    path = Path(path)
    _guard(force, path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps())
    return path


def gen_data(cfg: RunConfig, force: bool = False) -> dict:
    L = Layout(cfg.out_dir)
    d = cfg.data
    outs = [L.id_train, L.id_val] + [L.ood_test(k) for k in datagen.OOD_KINDS]
    _guard(force, *outs)
    seen = range(d.num_classes)
    train = datagen.subset_classes(datagen.gen_gaussian_ring(
        derive_seed(cfg.seed, "data", "train"), d.ring_classes, d.n_train_per_class,
        d.radius, d.sigma, "train"), seen)
    val = datagen.subset_classes(datagen.gen_gaussian_ring(
        derive_seed(cfg.seed, "data", "val"), d.ring_classes, d.n_val_per_class,
        d.radius, d.sigma, "val"), seen)
    datagen.save_csv(train, L.id_train)
    datagen.save_csv(val, L.id_val)
    for kind in datagen.OOD_KINDS:
        ood = datagen.gen_ood_test(kind, derive_seed(cfg.seed, "data", kind), d.n_ood_test,
                                   d.ring_params())
        datagen.save_csv(ood, L.ood_test(kind))
    return {"train": len(train), "val": len(val)}


def _load_id(L: Layout):
    _require(L.id_train, L.id_val)
    return datagen.load_csv(L.id_train), datagen.load_csv(L.id_val)


def train_diffusion(cfg: RunConfig, force: bool = False) -> list[float]:
    L = Layout(cfg.out_dir)
    _guard(force, L.denoiser)
    train, _ = _load_id(L)
    c = cfg.diffusion
    sched = diffusion.make_schedule(c.T, c.beta_1, c.beta_T)
    rng = make_rng(derive_seed(cfg.seed, "train-diffusion"))
    den, losses = diffusion.train_denoiser(
        train.points, train.labels, cfg.data.num_classes, sched, c.epochs, c.batch, c.lr,
        c.cond_dropout, rng, hidden=tuple(c.hidden), time_dim=c.time_dim, class_dim=c.class_dim)
    diffusion.save_denoiser(den, sched, L.denoiser)
    write_rows_csv(L.logs / "diffusion_train.csv", ["epoch", "loss"],
                   [{"epoch": i, "loss": float(v)} for i, v in enumerate(losses)])
    return losses


def train_classifier(cfg: RunConfig, force: bool = False) -> list[dict]:
    L = Layout(cfg.out_dir)
    _guard(force, L.classifier(), L.bank())
    train, val = _load_id(L)
    c = cfg.classifier
    rng = make_rng(derive_seed(cfg.seed, "train-classifier"))
    clf, rows = scores.train_classifier(train.points, train.labels, cfg.data.num_classes, rng,
                                        c.epochs, c.batch, c.lr, c.hidden, c.embed,
                                        val=(val.points, val.labels))
    scores.save_classifier(clf, L.classifier())
    scores.save_bank(scores.build_bank(clf, train.points, c.k), L.bank())
    write_rows_csv(L.logs / "classifier_train.csv", ["epoch", "loss", "val_acc"], rows)
    return rows


def _load_models(L: Layout, model="pretrained"):
    _require(L.classifier(model), L.bank(model))
    return scores.load_classifier(L.classifier(model)), scores.load_bank(L.bank(model))


def sample_ood(cfg: RunConfig, force: bool = False) -> dict:
    """Balanced-grid guided sampling: one CSV per (target, grid cell) plus a manifest."""
    L = Layout(cfg.out_dir)
    _guard(force, L.manifest)
    _require(L.denoiser)
    den, sched = diffusion.load_denoiser(L.denoiser)
    clf, bank = _load_models(L)
    g = cfg.guidance
    base = guidance.GuidanceConfig(gamma_bar=g.gamma_bar, n_smooth=g.n_smooth, n_recur=g.n_recur,
                                   n_iter=g.n_iter, feat_scale=g.feat_scale, cfg_beta=g.cfg_beta,
                                   eta=g.eta)
    classes = list(range(cfg.data.num_classes))
    manifest = {"seed": cfg.seed, "classes": classes, "targets": {}}
    for target, values, per in (("image_energy", g.image_grid, g.image_per_class),
                                ("feature_knn", g.feature_grid, g.feature_per_class)):
        plan = guidance.balanced_grid(target, values, per, classes, base)
        cells = []
        for idx, cell_cfg in enumerate(guidance.grid_configs(plan)):
            cond = [c for cfg_, c, cnt in plan
                    if (cfg_.rho_bar, cfg_.mu_bar) == (cell_cfg.rho_bar, cell_cfg.mu_bar)
                    for _ in range(cnt)]
            label = f"sample-ood/{target}/{idx}"
            rngs = chain_rngs(cfg.seed, label, 0, len(cond))
            run_cfg = replace(cell_cfg, condition=cond)
            res = guidance.guided_sample(den, sched, clf, bank if target == "feature_knn" else None,
                                         run_cfg, len(cond), rngs, seed=cfg.seed)
            name = f"cell_{idx:02d}_rho{cell_cfg.rho_bar:g}_mu{cell_cfg.mu_bar:g}.csv"
            datagen.save_csv(res.samples, L.samples / target / name, meta=False)
            cells.append({
                "cell": idx, "file": f"{target}/{name}",
                "rho_bar": cell_cfg.rho_bar, "mu_bar": cell_cfg.mu_bar,
                "config": cell_cfg.to_dict(), "seed_label": label,
                "per_class": per, "planned": len(cond), "generated": int(len(res.samples)),
                "aborted": res.n_aborted, "aborted_chains": res.aborted,
                "mean_energy": float(res.energy.mean()) if len(res.energy) else None,
            })
            log.info("%s cell %d rho=%g mu=%g: %d samples, %d aborted", target, idx,
                     cell_cfg.rho_bar, cell_cfg.mu_bar, len(res.samples), res.n_aborted)
        manifest["targets"][target] = {
            "grid": list(values), "per_class": per, "n_configs": len(cells),
            "planned_total": sum(cnt for _, _, cnt in plan),
            "generated_total": sum(c["generated"] for c in cells),
            "aborted_total": sum(c["aborted"] for c in cells), "cells": cells}
    save_json(manifest, L.manifest)
    return manifest


def load_ood_pool(L: Layout) -> np.ndarray:
    _require(L.manifest)
    manifest = json.loads(L.manifest.read_text())
    parts = []
    for t in manifest["targets"].values():
        for cell in t["cells"]:
            _require(L.samples / cell["file"])
            parts.append(datagen.load_points(L.samples / cell["file"]))
    return np.concatenate(parts) if parts else np.zeros((0, 2))


def finetune(cfg: RunConfig, force: bool = False) -> list[dict]:
    L = Layout(cfg.out_dir)
    _guard(force, L.classifier("finetuned"), L.psi)
    train, val = _load_id(L)
    clf, _ = _load_models(L)
    pool = load_ood_pool(L)
    c = cfg.oe
    psi = oe.init_psi(make_rng(derive_seed(cfg.seed, "psi-init")), c.psi_hidden)
    tc = oe.OeTrainConfig(lam=c.lam, lr=c.lr, epochs=c.epochs, batch_id=c.batch_id,
                          batch_ood=c.batch_ood, momentum=c.momentum,
                          weight_decay=c.weight_decay, grad_clip=c.grad_clip)
    clf2, psi2, rows = oe.finetune(clf, psi, train.points, train.labels, pool, tc,
                                   make_rng(derive_seed(cfg.seed, "finetune")),
                                   val=(val.points, val.labels))
    scores.save_classifier(clf2, L.classifier("finetuned"))
    save_mlp(psi2, L.psi)
    scores.save_bank(scores.build_bank(clf2, train.points, cfg.classifier.k), L.bank("finetuned"))
    write_rows_csv(L.logs / "finetune.csv", ["epoch", "ce", "ood_loss", "val_acc", "lr"], rows)
    return rows


def evaluate(cfg: RunConfig, models=MODELS, score_names=SCORES, force: bool = False) -> list[dict]:
    """Score ID-val and every OOD test set; write per-set reports and a comparison table."""
    L = Layout(cfg.out_dir)
    train, val = _load_id(L)
    e = cfg.eval
    table = []
    for model in models:
        out = L.reports / model
        _guard(force, *(out / f"{k}.json" for k in datagen.OOD_KINDS))
        clf, bank = _load_models(L, model)
        id_e = scores.energy(clf.logits(val.points))
        id_k = scores.knn_distance(bank, clf, val.points)
        acc = scores.accuracy(clf, val.points, val.labels)
        for kind in datagen.OOD_KINDS:
            _require(L.ood_test(kind))
            pts = datagen.load_points(L.ood_test(kind))
            rep = ScoreReport(kind, model, id_e, id_k, scores.energy(clf.logits(pts)),
                              scores.knn_distance(bank, clf, pts), acc, e.a, e.bins, e.eps)
            rep.write(out)
            for s in score_names:
                m = rep.metrics(s)
                table.append({"model": model, "test_set": kind, "score": s,
                              "fpr95": m["fpr95"], "auroc": m["auroc"], "id_acc": acc,
                              "w": rep.w, "kl": rep.kl})
    write_rows_csv(L.reports / "comparison.csv",
                   ["model", "test_set", "score", "fpr95", "auroc", "id_acc", "w", "kl"], table)
    return table


def report(cfg: RunConfig) -> dict:
    """Collect per-set summaries into one JSON, including finetuned - pretrained deltas."""
    L = Layout(cfg.out_dir)
    summaries = {}
    for model in MODELS:
        for kind in datagen.OOD_KINDS:
            p = L.reports / model / f"{kind}.json"
            if p.exists():
                summaries.setdefault(model, {})[kind] = json.loads(p.read_text())
    if not summaries:
        raise MissingArtifactError(f"no reports under {L.reports}; run eval first")
    deltas = []
    if set(MODELS) <= set(summaries):
        for kind in datagen.OOD_KINDS:
            pre, ft = summaries["pretrained"].get(kind), summaries["finetuned"].get(kind)
            if not (pre and ft):
                continue
            for s in SCORES:
                deltas.append({
                    "test_set": kind, "score": s,
                    "auroc_pretrained": pre["scores"][s]["auroc"],
                    "auroc_finetuned": ft["scores"][s]["auroc"],
                    "auroc_delta": ft["scores"][s]["auroc"] - pre["scores"][s]["auroc"],
                    "fpr95_pretrained": pre["scores"][s]["fpr95"],
                    "fpr95_finetuned": ft["scores"][s]["fpr95"],
                    "id_acc_delta": ft["id_acc"] - pre["id_acc"]})
    out = {"summaries": summaries, "finetuned_vs_pretrained": deltas}
    save_json(out, L.reports / "summary.json")
    return out


def format_table(summary: dict) -> str:
    lines = [f"{'model':<11} {'test set':<17} {'score':<8} {'FPR95':>7} {'AUROC':>7} {'ID acc':>7}"]
    for model, sets in summary["summaries"].items():
        for kind, s in sets.items():
            for name, m in s["scores"].items():
                lines.append(f"{model:<11} {kind:<17} {name:<8} {100 * m['fpr95']:7.2f} "
                             f"{100 * m['auroc']:7.2f} {100 * s['id_acc']:7.2f}")
    return "\n".join(lines)


def run_all(cfg: RunConfig, force: bool = False) -> dict:
    L = Layout(cfg.out_dir)
    if force or not L.config.exists():
        init_config(cfg, L.config, force=True)
    gen_data(cfg, force)
    train_diffusion(cfg, force)
    train_classifier(cfg, force)
    sample_ood(cfg, force)
    finetune(cfg, force)
    evaluate(cfg, force=force)
    return report(cfg)
