"""Experiment commands: preprocess, run, attack, report, sweep, genseed.

Every command reads an :class:`ExperimentConfig` and writes below
``cfg.out``. Outputs carry no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as dp
from .attacker import AttackReport, attack, extract_latents, write_attack_report, write_latent_export
from .config import ConfigError, ExperimentConfig
from .metrics import mcnemar, wilcoxon_signed_rank
from .model import ModelConfig, checkpoint_bytes, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, write_dataset
from .trainer import (adversary_bacc, evaluate_ranking, grid_run, pool_map, read_train_log, train,
                      write_train_log)

log = logging.getLogger(__name__)

FAMILIES = ("multvae", "adv-multvae")
# reported model -> (training family, selection rule)
VARIANTS = {
    "multvae-best": ("multvae", "best-ndcg"),
    "multvae-last": ("multvae", "last-epoch"),
    "adv-multvae": ("adv-multvae", "min-adv-bacc"),
}
DEFAULTS_NOTE = "# hyperparameter defaults and grids are this package's own choices"


class DataError(RuntimeError):
    pass


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _sha(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


# ---------------------------------------------------------------------------
# dataset


def dataset_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "dataset.bin"


def cmd_preprocess(cfg: ExperimentConfig, echo: Callable[[str], None] = print) -> tuple[Path, bool]:
    """Build (or reuse) the cached dataset. Returns its path and whether it was rebuilt."""
    for p in (cfg.ratings, cfg.users):
        if not p.is_file():
            raise ConfigError(f"input file not found: {p}")
    h = hashlib.sha256()
    for p in (cfg.ratings, cfg.users):
        h.update(p.read_bytes())
    h.update(json.dumps(cfg.preprocess_key(), sort_keys=True).encode())
    source = h.hexdigest()
    path = dataset_path(cfg)
    meta_path = cfg.out / "dataset.json"
    if path.is_file() and meta_path.is_file():
        meta = json.loads(meta_path.read_text())
        if meta.get("source") == source and meta.get("sha256") == _sha(path.read_bytes()):
            echo(meta["table"])
            return path, False
    try:
        inter, labels = dp.ingest(cfg.ratings, cfg.fmt, cfg.users)
        m = dp.preprocess(inter, labels, cfg.classes, cfg.min_weight, cfg.min_user_deg,
                          cfg.min_item_deg, cfg.item_sample, cfg.seed)
    except (dp.ParseError, dp.DegenerateDatasetError) as exc:
        raise DataError(str(exc)) from exc
    except dp.ConfigurationError as exc:
        raise ConfigError(str(exc)) from exc
    dp.save_matrix(path, m)
    table = dp.format_stats(m, cfg.ratings.parent.name or "dataset")
    meta = {"source": source, "sha256": _sha(path.read_bytes()), "stats": m.stats(), "table": table}
    _write(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    echo(table)
    return path, True


def load_dataset(cfg: ExperimentConfig) -> dp.InteractionMatrix:
    path = dataset_path(cfg)
    if not path.is_file():
        raise DataError(f"no cached dataset at {path}; run 'preprocess' first")
    return dp.load_matrix(path)


def fold_hash(cfg: ExperimentConfig) -> str:
    """Identifies the data and fold construction all results must share."""
    h = hashlib.sha256(dataset_path(cfg).read_bytes())
    h.update(f"folds={cfg.n_folds};seed={cfg.seed}".encode())
    return h.hexdigest()[:16]


def build_folds(cfg: ExperimentConfig, m: dp.InteractionMatrix) -> list[dp.FoldSplit]:
    try:
        return dp.make_folds(m, cfg.n_folds, cfg.seed)
    except dp.SplitError as exc:
        raise DataError(str(exc)) from exc


def model_config(cfg: ExperimentConfig, family: str, n_items: int, n_classes: int,
                 lam: Optional[float] = None) -> ModelConfig:
    d = dict(cfg.model)
    d.update(n_items=n_items, n_classes=n_classes, adversary=(family == "adv-multvae"))
    if lam is not None:
        d["lam"] = lam
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model section: {exc}") from None


# ---------------------------------------------------------------------------
# training


def _rules(family: str) -> tuple[str, ...]:
    return ("best-ndcg", "last-epoch") if family == "multvae" else ("min-adv-bacc",)


def run_dir(cfg: ExperimentConfig, family: str) -> Path:
    return cfg.out / "runs" / family


def checkpoint_path(cfg: ExperimentConfig, variant: str, fold: int) -> Path:
    family, rule = VARIANTS[variant]
    return run_dir(cfg, family) / f"fold{fold}" / f"{rule}.ckpt"


def _train_task(args):
    mcfg, tcfg, m, fold, extra = args
    return train(mcfg, m, fold, tcfg, extra)


def _manifest(path: Path) -> dict:
    return json.loads(path.read_text()) if path.is_file() else {}


def cmd_run(cfg: ExperimentConfig, family: str, echo: Callable[[str], None] = print) -> dict:
    """Train ``family`` on every configured fold; resumable per fold."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family {family!r}; expected one of {FAMILIES}")
    m = load_dataset(cfg)
    folds = build_folds(cfg, m)
    fh = fold_hash(cfg)
    mcfg = model_config(cfg, family, m.n_items, len(m.classes))
    tcfg = cfg.train_config(family)
    rules = _rules(family)
    extra = tuple(r for r in rules if r != tcfg.selection)
    base = run_dir(cfg, family)
    man_path = base / "manifest.json"
    manifest = _manifest(man_path)
    todo = cfg.folds_to_run()
    if manifest.get("fold_hash") != fh or manifest.get("config") != cfg.digest():
        manifest = {"family": family, "fold_hash": fh, "config": cfg.digest(), "completed": []}
    manifest["pending"] = [f for f in todo if f not in manifest["completed"]]
    _write(man_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def finish(fold_id: int, result, model_cfg=mcfg):
        d = base / f"fold{fold_id}"
        for rule in rules:
            save_checkpoint(d / f"{rule}.ckpt", result.checkpoints[rule], model_cfg)
        write_train_log(d / "trainlog.tsv", result.log)
        manifest["completed"] = sorted(set(manifest["completed"]) | {fold_id})
        manifest["pending"] = [f for f in todo if f not in manifest["completed"]]
        _write(man_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        sel = ", ".join(f"{r}@{result.log.selected[r]}" for r in rules)
        echo(f"{family} fold {fold_id}: {sel}")

    if cfg.grid:
        fam = grid_run({family: (mcfg, tcfg)}, cfg.grid, m, [folds[i] for i in todo],
                       cfg.workers, extra)[family]
        for (pi, fi), tlog in sorted(fam.logs.items()):
            write_train_log(base / "grid" / f"point{pi}_fold{fi}.tsv", tlog)
        _write(base / "grid" / "grid.json", json.dumps(
            {"winner": fam.point, "scores": fam.scores, "grid": cfg.grid}, indent=2, sort_keys=True) + "\n")
        for fold_id, r in zip(todo, fam.runs):
            finish(fold_id, r, fam.model_cfg)
        return manifest

    pending = list(manifest["pending"])
    # tasks run in batches of `workers` so each finished fold is recorded promptly
    step = max(cfg.workers, 1)
    for s in range(0, len(pending), step):
        chunk = pending[s:s + step]
        results = pool_map(_train_task, [(mcfg, tcfg, m, folds[i], extra) for i in chunk], cfg.workers)
        for fold_id, r in zip(chunk, results):
            finish(fold_id, r)
    return manifest


# ---------------------------------------------------------------------------
# attacks


def attack_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "attacks"


def _attack_checkpoint(cfg, m, fold: dp.FoldSplit, ckpt: Path, acfg) -> tuple[AttackReport, np.ndarray]:
    before = ckpt.read_bytes()
    params, mcfg = load_checkpoint(ckpt)
    if mcfg.n_items != m.n_items:
        raise DataError(f"{ckpt}: checkpoint was trained on {mcfg.n_items} items, dataset has {m.n_items}")
    train_users = fold.base_train_users
    tr = extract_latents(params, mcfg, m.X[train_users])
    te = extract_latents(params, mcfg, fold.test_input)
    report = attack(tr, m.labels[train_users], te, m.labels[fold.test_users], acfg, len(m.classes))
    if checkpoint_bytes(params, mcfg) != before or ckpt.read_bytes() != before:
        raise RuntimeError(f"{ckpt}: model parameters changed during the attack")
    return report, te


def cmd_attack(cfg: ExperimentConfig, variants: Optional[Sequence[str]] = None,
               echo: Callable[[str], None] = print) -> dict:
    m = load_dataset(cfg)
    folds = build_folds(cfg, m)
    acfg = cfg.attacker_config()
    out = {}
    for variant in variants or VARIANTS:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}")
        for i in cfg.folds_to_run():
            ckpt = checkpoint_path(cfg, variant, i)
            if not ckpt.is_file():
                continue
            report, latents = _attack_checkpoint(cfg, m, folds[i], ckpt, acfg)
            d = attack_dir(cfg) / variant
            write_attack_report(d / f"fold{i}.json", report,
                                {"variant": variant, "fold": i, "fold_hash": fold_hash(cfg),
                                 "attacker": dataclasses.asdict(acfg)})
            users = folds[i].test_users
            write_latent_export(d / f"fold{i}_latents.tsv", [m.user_ids[u] for u in users], latents,
                                m.labels[users], report.predict(latents), m.classes)
            out[(variant, i)] = report
            echo(f"attack {variant} fold {i}: acc={report.acc:.3f} bacc={report.bacc:.3f}")
    if not out:
        raise DataError("no checkpoints found; run 'run' first")
    return out


# ---------------------------------------------------------------------------
# sweep


def sweep_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "sweep"


def _lam_tag(lam: float) -> str:
    return f"lam{lam:g}"


def cmd_sweep(cfg: ExperimentConfig, echo: Callable[[str], None] = print) -> list[dict]:
    """Train and attack Adv-MultVAE for every configured lambda."""
    m = load_dataset(cfg)
    folds = build_folds(cfg, m)
    tcfg = cfg.train_config("adv-multvae")
    acfg = cfg.attacker_config()
    todo = cfg.folds_to_run()
    rows, fold_rows = [], []
    for lam in cfg.lambdas:
        mcfg = model_config(cfg, "adv-multvae", m.n_items, len(m.classes), lam=lam)
        results = pool_map(_train_task, [(mcfg, tcfg, m, folds[i], ()) for i in todo], cfg.workers)
        per = []
        for i, r in zip(todo, results):
            d = sweep_dir(cfg) / _lam_tag(lam) / f"fold{i}"
            ckpt = d / "min-adv-bacc.ckpt"
            save_checkpoint(ckpt, r.params, mcfg)
            write_train_log(d / "trainlog.tsv", r.log)
            f = folds[i]
            report, _ = _attack_checkpoint(cfg, m, f, ckpt, acfg)
            write_attack_report(d / "attack.json", report, {"lambda": lam, "fold": i})
            adv = adversary_bacc(r.params, mcfg, f.test_input, m.labels[f.test_users])
            ev = evaluate_ranking(r.params, mcfg, f.val_input, f.val_target, tcfg.k)
            row = {"lambda": lam, "fold": i, "adversary_bacc": adv, "attacker_bacc": report.bacc,
                   "val_ndcg": float(np.nanmean(ev["ndcg"])), "selected_epoch": r.selected_epoch}
            per.append(row)
            fold_rows.append(row)
        agg = {"lambda": lam}
        for k in ("adversary_bacc", "attacker_bacc", "val_ndcg"):
            agg[k] = float(np.mean([p[k] for p in per]))
        rows.append(agg)
        echo(f"lambda={lam:g}: adversary bacc={agg['adversary_bacc']:.3f} "
             f"attacker bacc={agg['attacker_bacc']:.3f} val ndcg={agg['val_ndcg']:.3f}")
    head = [DEFAULTS_NOTE, f"# fold_hash={fold_hash(cfg)}", "lambda\tadversary_bacc\tattacker_bacc\tval_ndcg"]
    _write(sweep_dir(cfg) / "sweep.tsv", "\n".join(
        head + [f"{r['lambda']:g}\t{_fmt(r['adversary_bacc'])}\t{_fmt(r['attacker_bacc'])}\t{_fmt(r['val_ndcg'])}"
                for r in rows]) + "\n")
    _write(sweep_dir(cfg) / "sweep_folds.tsv", "\n".join(
        ["lambda\tfold\tselected_epoch\tadversary_bacc\tattacker_bacc\tval_ndcg"]
        + [f"{r['lambda']:g}\t{r['fold']}\t{r['selected_epoch']}\t{_fmt(r['adversary_bacc'])}\t"
           f"{_fmt(r['attacker_bacc'])}\t{_fmt(r['val_ndcg'])}" for r in fold_rows]) + "\n")
    return rows


# ---------------------------------------------------------------------------
# report


def _read_export(path: Path) -> dict[str, tuple[str, str]]:
    rows = path.read_text().splitlines()[1:]
    out = {}
    for line in rows:
        user, label, pred = line.split("\t")[:3]
        out[user] = (label, pred)
    return out


def cmd_report(cfg: ExperimentConfig, echo: Callable[[str], None] = print) -> dict:
    """Aggregate test metrics, significance tests and curve series."""
    m = load_dataset(cfg)
    folds = build_folds(cfg, m)
    fh = fold_hash(cfg)
    todo = cfg.folds_to_run()
    for family in FAMILIES:
        man = _manifest(run_dir(cfg, family) / "manifest.json")
        if man and man.get("fold_hash") != fh:
            raise DataError(f"{family} results were produced with different data or folds "
                            f"({man.get('fold_hash')} != {fh})")

    per_user: dict[str, dict[str, dict[str, float]]] = {}
    per_fold: dict[str, dict[int, dict[str, float]]] = {}
    exports: dict[str, dict[str, tuple[str, str]]] = {}
    for variant in VARIANTS:
        for i in todo:
            ckpt = checkpoint_path(cfg, variant, i)
            if not ckpt.is_file():
                continue
            params, mcfg = load_checkpoint(ckpt)
            f = folds[i]
            ev = evaluate_ranking(params, mcfg, f.test_input, f.test_target, cfg.train_config("multvae").k)
            row = {"ndcg": float(np.nanmean(ev["ndcg"])), "recall": float(np.nanmean(ev["recall"])),
                   "acc": float("nan"), "bacc": float("nan")}
            for j, u in enumerate(f.test_users):
                if not np.isnan(ev["ndcg"][j]):
                    per_user.setdefault(variant, {})[m.user_ids[u]] = {
                        "ndcg": ev["ndcg"][j], "recall": ev["recall"][j]}
            rep_path = attack_dir(cfg) / variant / f"fold{i}.json"
            if rep_path.is_file():
                rep = json.loads(rep_path.read_text())
                if rep.get("fold_hash") != fh:
                    raise DataError(f"{rep_path} was produced with different data or folds")
                row["acc"], row["bacc"] = rep["acc"], rep["bacc"]
                exports.setdefault(variant, {}).update(
                    _read_export(attack_dir(cfg) / variant / f"fold{i}_latents.tsv"))
            per_fold.setdefault(variant, {})[i] = row
    if not per_fold:
        raise DataError("no trained checkpoints to report on")

    summary = {}
    for variant, rows in per_fold.items():
        summary[variant] = {k: float(np.mean([r[k] for r in rows.values()])) for k in ("ndcg", "recall", "acc", "bacc")}

    tests = {}
    ref = "multvae-best"
    for variant in per_fold:
        if variant == ref or ref not in per_user:
            continue
        users = sorted(set(per_user[ref]) & set(per_user[variant]))
        tests[variant] = {}
        for metric in ("ndcg", "recall"):
            a = [per_user[variant][u][metric] for u in users]
            b = [per_user[ref][u][metric] for u in users]
            res = wilcoxon_signed_rank(a, b)
            tests[variant][metric] = {"statistic": res.statistic, "p": res.p_value,
                                      "significant": bool(res.significant), "method": res.method}
    mcn = {}
    for a_name, b_name in (("multvae-best", "adv-multvae"), ("multvae-last", "adv-multvae")):
        if a_name in exports and b_name in exports:
            users = sorted(u for u in set(exports[a_name]) & set(exports[b_name])
                           if exports[a_name][u][0] != "unknown")
            ca = [exports[a_name][u][0] == exports[a_name][u][1] for u in users]
            cb = [exports[b_name][u][0] == exports[b_name][u][1] for u in users]
            res = mcnemar(ca, cb)
            mcn[f"{a_name} vs {b_name}"] = {"statistic": res.statistic, "p": res.p_value,
                                            "significant": bool(res.significant), "method": res.method}

    rdir = cfg.out / "report"
    lines = [DEFAULTS_NOTE, f"# fold_hash={fh}",
             "# † marks a two-sided Wilcoxon signed-rank p < 0.05 against multvae-best",
             "model\tacc\tbacc\tndcg@10\trecall@10\tndcg_p\trecall_p"]
    for variant in VARIANTS:
        if variant not in summary:
            continue
        s = summary[variant]
        t = tests.get(variant, {})
        mark = {k: ("†" if t.get(k, {}).get("significant") else "") for k in ("ndcg", "recall")}
        lines.append("\t".join([variant, _fmt(s["acc"]), _fmt(s["bacc"]),
                                _fmt(s["ndcg"]) + mark["ndcg"], _fmt(s["recall"]) + mark["recall"],
                                _fmt(t.get("ndcg", {}).get("p")), _fmt(t.get("recall", {}).get("p"))]))
    for name, r in mcn.items():
        lines.append(f"# mcnemar {name}: chi2={r['statistic']:.6f} p={r['p']:.6f} "
                     f"significant={str(r['significant']).lower()}")
    _write(rdir / "summary.tsv", "\n".join(lines) + "\n")

    fold_lines = ["model\tfold\tacc\tbacc\tndcg@10\trecall@10"]
    for variant, rows in per_fold.items():
        for i, r in sorted(rows.items()):
            fold_lines.append("\t".join([variant, str(i), _fmt(r["acc"]), _fmt(r["bacc"]),
                                         _fmt(r["ndcg"]), _fmt(r["recall"])]))
    _write(rdir / "summary_folds.tsv", "\n".join(fold_lines) + "\n")

    curve_lines = ["family\tfold\tepoch\tloss\tval_ndcg\tval_recall\tval_adv_bacc"]
    for family in FAMILIES:
        for i in todo:
            p = run_dir(cfg, family) / f"fold{i}" / "trainlog.tsv"
            if p.is_file():
                for e in read_train_log(p).epochs:
                    curve_lines.append("\t".join([family, str(i), str(e.epoch), _fmt(e.loss),
                                                  _fmt(e.val_ndcg), _fmt(e.val_recall), _fmt(e.val_adv_bacc)]))
    _write(rdir / "curves.tsv", "\n".join(curve_lines) + "\n")

    sweep = sweep_dir(cfg) / "sweep.tsv"
    if sweep.is_file():
        _write(rdir / "lambda_bacc.tsv", sweep.read_text())

    record = {"fold_hash": fh, "summary": summary, "per_fold": {v: {str(k): r for k, r in rows.items()}
                                                               for v, rows in per_fold.items()},
              "wilcoxon_vs_multvae_best": tests, "mcnemar": mcn,
              "note": DEFAULTS_NOTE.lstrip("# ")}
    _write(rdir / "summary.json", json.dumps(record, indent=2, sort_keys=True, default=float) + "\n")
    echo("\n".join(lines))
    return record


# ---------------------------------------------------------------------------


def cmd_genseed(out_dir, spec: SyntheticSpec = SyntheticSpec(), echo: Callable[[str], None] = print):
    ratings, users = write_dataset(out_dir, spec)
    echo(f"wrote {ratings} and {users}")
    return ratings, users
