"""Experiment orchestration: multi-seed runs, defense dispatch, report emission.

One experiment trains and evaluates its defense once per seed index (fresh
model initialization and a fresh member subsample each time, over the same
dataset), then aggregates mean and sample standard deviation per metric.
Reports are byte-reproducible: anything time-based goes to a sidecar file,
and every random stream is derived from the config alone. Seeds can run in
parallel worker processes; each seed is self-contained, so scheduling never
changes the numbers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import DefenseConfig, ExperimentConfig
from .dataio import DatasetSplits, build_attack_set, count_y_reads, generate_synthetic_task, load_dataset_splits, make_splits
from .distill import BlackBoxGenerator, akd_train, dmp_train
from .dpsgd import train_dpsgd
from .errors import ConfigError
from .metrics import FeatureExtractor, calibrate_kid_max, gauss_defense, generalization_gap, loss_histogram, nkid
from .mia import attack_scores, auc_roc
from .nets import UnetGenerator, gen_forward, load_checkpoint, save_checkpoint
from .proxy_audit import proxy_leakage_auc
from .rng import RngState, mix64
from .train_cgan import train_regular

_METRIC_KEYS = ("auc", "nkid", "kid_raw", "gap", "overlap", "proxy_auc")


@dataclass
class ExperimentReport:
    config: dict
    versions: dict
    kid_max: float
    seeds: list[dict]
    aggregate: dict

    def to_dict(self) -> dict:
        return asdict(self)


def build_dataset(cfg: ExperimentConfig) -> DatasetSplits:
    d = cfg.dataset
    if d.kind == "folder":
        return load_dataset_splits(d.folder)
    total = d.n_samples if d.n_samples is not None else d.n_train + d.n_proxy + d.n_test
    samples = generate_synthetic_task(d.seed, total, d.height, d.width)
    return make_splits(samples, d.n_train, d.n_proxy, d.n_test, d.seed)


def _config_key(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _cache_fetch(cache_dir: Path | None, key: str) -> UnetGenerator | None:
    if cache_dir is None:
        return None
    path = cache_dir / key
    if (path / "manifest.json").exists():
        model = load_checkpoint(path)
        assert isinstance(model, UnetGenerator)
        return model
    return None


def _cache_store(cache_dir: Path | None, key: str, model: UnetGenerator) -> None:
    if cache_dir is None:
        return
    final = cache_dir / key
    if (final / "manifest.json").exists():
        return
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=cache_dir, prefix=f"{key}.tmp"))
    save_checkpoint(model, tmp)
    try:
        os.rename(tmp, final)
    except OSError:  # another worker won the race; keep theirs
        import shutil

        shutil.rmtree(tmp, ignore_errors=True)


def _teacher_seed(cfg: ExperimentConfig, seed_index: int) -> int:
    return mix64(cfg.teacher.seed, "run", seed_index)


def _train_teacher(cfg, splits, seed_index, seed_dir, cache_dir):
    from dataclasses import replace

    tcfg = replace(cfg.teacher, seed=_teacher_seed(cfg, seed_index))
    dp = cfg.defense.dp if cfg.defense.name == "dp_sgd" else None
    key_payload = {
        "role": "teacher",
        "pkg": __version__,
        "dataset": asdict(cfg.dataset),
        "arch": asdict(cfg.arch),
        "teacher": asdict(tcfg),
        "dp": asdict(dp) if dp is not None else None,
    }
    key = _config_key(key_payload)
    cached = _cache_fetch(cache_dir, key)
    log_path = seed_dir / "teacher_losses.csv" if seed_dir else None
    if cached is None:
        if dp is not None:
            cached = train_dpsgd(splits, cfg.arch, tcfg, dp, log_path=log_path)
        else:
            cached = train_regular(splits, cfg.arch, tcfg, log_path=log_path)
        _cache_store(cache_dir, key, cached)
    if seed_dir:
        save_checkpoint(cached, seed_dir / "teacher")
    return cached, key


def _train_student(cfg, teacher, teacher_key, splits, seed_index, seed_dir, cache_dir):
    from dataclasses import replace

    dcfg = replace(cfg.defense.distill, seed=mix64(cfg.defense.distill.seed, "run", seed_index))
    key_payload = {
        "role": "student",
        "pkg": __version__,
        "teacher": teacher_key,
        "distill": asdict(dcfg),
        "arch": asdict(cfg.arch),
    }
    key = _config_key(key_payload)
    cached = _cache_fetch(cache_dir, key)
    log_path = seed_dir / "student_losses.csv" if seed_dir else None
    y_reads = 0
    if cached is None:
        train_fn = akd_train if dcfg.mode == "akd" else dmp_train
        with count_y_reads() as reads:
            cached = train_fn(BlackBoxGenerator(teacher), splits.proxy, cfg.arch, dcfg, log_path=log_path)
            y_reads = reads()
        _cache_store(cache_dir, key, cached)
    if seed_dir:
        save_checkpoint(cached, seed_dir / "student")
    return cached, y_reads


def run_seed(cfg: ExperimentConfig, seed_index: int, out_dir: Path | None, cache_dir: Path | None) -> dict:
    """Train, defend, attack, and measure one seed; returns the record dict."""
    torch.set_num_threads(1)
    record: dict = {"seed_index": seed_index, "status": "ok"}
    stage = "build_data"
    try:
        splits = build_dataset(cfg)
        seed_dir = (out_dir / "ckpt" / str(seed_index)) if out_dir else None
        if seed_dir:
            seed_dir.mkdir(parents=True, exist_ok=True)

        stage = "train_teacher"
        teacher, teacher_key = _train_teacher(cfg, splits, seed_index, seed_dir, cache_dir)

        stage = "apply_defense"
        student = None
        if cfg.defense.name in ("akd", "dmp"):
            student, y_reads = _train_student(
                cfg, teacher, teacher_key, splits, seed_index, seed_dir, cache_dir
            )
            record["y_reads"] = y_reads
            deployed = student
        elif cfg.defense.name == "gauss":
            deployed = gauss_defense(teacher, cfg.defense.sigma)
        else:
            deployed = teacher

        stage = "attack"
        attack_seed = mix64(cfg.teacher.seed, "attack", seed_index)
        eval_set = build_attack_set(splits, attack_seed)
        records = attack_scores(deployed, eval_set, attack_seed, cfg.metrics.attack_draws)
        record["auc"] = auc_roc(records).auc

        stage = "metrics"
        fx = FeatureExtractor(seed=cfg.metrics.fx_seed, output_dim=cfg.metrics.feature_dim)
        test_refs = [s.y for s in splits.test]
        kid_max = calibrate_kid_max(test_refs, fx)
        record["kid_max"] = kid_max
        eval_rng = RngState(mix64(cfg.teacher.seed, "eval", seed_index))
        with torch.no_grad():
            test_out = [gen_forward(deployed, s.x, eval_rng) for s in splits.test]
        quality = nkid(test_out, test_refs, fx, kid_max)
        record["nkid"] = quality.nkid
        record["kid_raw"] = quality.kid.kid_raw

        record["gap"] = generalization_gap(
            deployed,
            [s.x for s in splits.train],
            [s.x for s in splits.test],
            [s.y for s in splits.train],
            test_refs,
            fx,
            kid_max,
            rng=RngState(mix64(cfg.teacher.seed, "gap", seed_index)),
        )

        stage = "histogram"
        member_scores = [r.score for r in records if r.is_member]
        nonmember_scores = [r.score for r in records if not r.is_member]
        hist = loss_histogram(member_scores, nonmember_scores, cfg.metrics.n_bins)
        record["overlap"] = hist.overlap
        if out_dir:
            hist_name = f"hist_{seed_index}.csv"
            _write_histogram_csv(hist, out_dir / hist_name)
            record["histogram"] = hist_name

        stage = "proxy_audit"
        if student is not None:
            audit_seed = mix64(cfg.teacher.seed, "proxy-audit", seed_index)
            record["proxy_auc"] = proxy_leakage_auc(student, splits, audit_seed)
        else:
            record["proxy_auc"] = None
    except Exception as err:  # keep other seeds alive; report the failed stage
        return {
            "seed_index": seed_index,
            "status": "failed",
            "stage": stage,
            "error": f"{type(err).__name__}: {err}",
        }
    return record


def _write_histogram_csv(hist, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "member_p", "nonmember_p"])
        for i in range(len(hist.member_p)):
            writer.writerow(
                [
                    repr(hist.bin_edges[i]),
                    repr(hist.bin_edges[i + 1]),
                    repr(hist.member_p[i]),
                    repr(hist.nonmember_p[i]),
                ]
            )


def _seed_worker(args):
    cfg_dict, seed_index, out_dir, cache_dir = args
    from .config import parse_config

    cfg = parse_config(cfg_dict)
    return run_seed(
        cfg,
        seed_index,
        Path(out_dir) if out_dir else None,
        Path(cache_dir) if cache_dir else None,
    )


def _aggregate(seed_records: list[dict]) -> dict:
    ok = [r for r in seed_records if r.get("status") == "ok"]
    agg: dict = {"n_ok": len(ok), "n_failed": len(seed_records) - len(ok)}
    for key in _METRIC_KEYS:
        values = [r[key] for r in ok if r.get(key) is not None]
        if not values:
            agg[key] = None
            continue
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        agg[key] = {"mean": float(arr.mean()), "std": std, "n": int(arr.size)}
    return agg


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    *,
    n_workers: int = 1,
    cache_dir: str | Path | None = None,
) -> ExperimentReport:
    """Run every seed of one experiment and write report.json (plus sidecar
    run_meta.json with wall-clock data) under `out_dir` when given."""
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    cache = Path(cache_dir) if cache_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    if n_workers > 1 and cfg.n_seeds > 1:
        import multiprocessing as mp

        ctx = mp.get_context("spawn")
        jobs = [
            (cfg.to_dict() | {"schema_version": cfg.schema_version}, i, str(out) if out else None, str(cache) if cache else None)
            for i in range(cfg.n_seeds)
        ]
        with ctx.Pool(min(n_workers, cfg.n_seeds)) as pool:
            seed_records = pool.map(_seed_worker, jobs)
    else:
        seed_records = [run_seed(cfg, i, out, cache) for i in range(cfg.n_seeds)]
    seed_records.sort(key=lambda r: r["seed_index"])

    kid_values = [r.get("kid_max") for r in seed_records if r.get("kid_max") is not None]
    report = ExperimentReport(
        config=cfg.to_dict(),
        versions={"privdistill": __version__, "torch": torch.__version__, "numpy": np.__version__},
        kid_max=kid_values[0] if kid_values else float("nan"),
        seeds=[{k: v for k, v in r.items() if k != "kid_max"} for r in seed_records],
        aggregate=_aggregate(seed_records),
    )
    if out:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        meta = {"wall_clock_seconds": time.time() - started, "started_unix": started}
        (out / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return report


# ---------------------------------------------------------------------------
# Sweeps and defense comparison
# ---------------------------------------------------------------------------


def _defense_with_sigma(defense: DefenseConfig, sigma: float) -> DefenseConfig:
    from dataclasses import replace

    if defense.name == "gauss":
        return replace(defense, sigma=sigma)
    if defense.name == "dp_sgd":
        return replace(defense, dp=replace(defense.dp, sigma=sigma))
    raise ConfigError(f"knob 'sigma' needs a gauss or dp_sgd defense, got {defense.name!r}")


def _default_defense(name: str, cfg: ExperimentConfig) -> DefenseConfig:
    from dataclasses import replace

    from .distill import DistillConfig
    from .dpsgd import DpConfig

    if name == "none":
        return DefenseConfig(name="none")
    if name == "gauss":
        return DefenseConfig(name="gauss", sigma=0.1)
    if name == "dp_sgd":
        return DefenseConfig(name="dp_sgd", dp=DpConfig(clip_norm=1.0, sigma=1e-3))
    if name in ("akd", "dmp"):
        return DefenseConfig(
            name=name,
            distill=DistillConfig(
                mode=name,
                epochs=cfg.teacher.epochs,
                lam=cfg.teacher.lambda_l1,
                lr=cfg.teacher.lr,
                seed=cfg.teacher.seed,
            ),
        )
    raise ConfigError(f"unknown defense {name!r}")


def run_tradeoff_sweep(
    cfg: ExperimentConfig,
    knob: str,
    values: list,
    out_dir: str | Path | None = None,
    *,
    n_workers: int = 1,
    cache_dir: str | Path | None = None,
) -> list[dict]:
    """One averaged (attack, quality) point per knob value; emits tradeoff.csv.

    Knobs: "sigma" varies the noise level of a gauss or dp_sgd defense;
    "defense" swaps the defense identity (names with package defaults).
    Failures are recorded per point and the sweep continues.
    """
    from dataclasses import replace

    if knob not in ("sigma", "defense"):
        raise ConfigError(f"unknown sweep knob {knob!r}; use 'sigma' or 'defense'")
    out = Path(out_dir) if out_dir is not None else None
    points = []
    for j, value in enumerate(values):
        try:
            if knob == "sigma":
                point_cfg = replace(cfg, defense=_defense_with_sigma(cfg.defense, float(value)))
            else:
                point_cfg = replace(cfg, defense=_default_defense(str(value), cfg))
            point_out = out / f"point_{j}" if out else None
            report = run_experiment(point_cfg, point_out, n_workers=n_workers, cache_dir=cache_dir)
            agg = report.aggregate
            if not agg["n_ok"]:
                raise RuntimeError("all seeds failed")
            points.append(
                {
                    "knob": knob,
                    "value": value,
                    "status": "ok",
                    "auc_mean": agg["auc"]["mean"],
                    "auc_std": agg["auc"]["std"],
                    "nkid_mean": agg["nkid"]["mean"],
                    "nkid_std": agg["nkid"]["std"],
                }
            )
        except Exception as err:
            points.append({"knob": knob, "value": value, "status": "failed", "error": f"{type(err).__name__}: {err}"})
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "tradeoff.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["knob", "value", "status", "auc_mean", "auc_std", "nkid_mean", "nkid_std"])
            for p in points:
                writer.writerow(
                    [
                        p["knob"],
                        p["value"],
                        p["status"],
                        repr(p.get("auc_mean", "")),
                        repr(p.get("auc_std", "")),
                        repr(p.get("nkid_mean", "")),
                        repr(p.get("nkid_std", "")),
                    ]
                )
    return points


def compare_defenses(
    cfgs: list[ExperimentConfig],
    out_dir: str | Path | None = None,
    *,
    n_workers: int = 1,
    cache_dir: str | Path | None = None,
) -> dict:
    """Run each config and rank the defenses by (attack AUC, quality NKID).

    All configs must share the dataset block, seed count, and teacher block
    so rankings compare like against like.
    """
    if len(cfgs) < 1:
        raise ConfigError("compare_defenses needs at least one config")
    base = cfgs[0]
    for other in cfgs[1:]:
        if asdict(other.dataset) != asdict(base.dataset):
            raise ConfigError("compare_defenses configs must share the dataset block")
        if other.n_seeds != base.n_seeds or asdict(other.teacher) != asdict(base.teacher):
            raise ConfigError("compare_defenses configs must share n_seeds and the teacher block")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    by_name: dict[str, dict] = {}
    for j, cfg in enumerate(cfgs):
        report = run_experiment(
            cfg, out / f"defense_{j}_{cfg.defense.name}" if out else None,
            n_workers=n_workers, cache_dir=cache_dir,
        )
        agg = report.aggregate
        row = {
            "defense": cfg.defense.name,
            "auc_mean": agg["auc"]["mean"] if agg["auc"] else None,
            "auc_std": agg["auc"]["std"] if agg["auc"] else None,
            "nkid_mean": agg["nkid"]["mean"] if agg["nkid"] else None,
            "nkid_std": agg["nkid"]["std"] if agg["nkid"] else None,
            "gap_mean": agg["gap"]["mean"] if agg["gap"] else None,
            "overlap_mean": agg["overlap"]["mean"] if agg["overlap"] else None,
            "n_ok": agg["n_ok"],
        }
        rows.append(row)
        by_name[cfg.defense.name] = row
    rows.sort(key=lambda r: (r["auc_mean"] if r["auc_mean"] is not None else float("inf"),
                             r["nkid_mean"] if r["nkid_mean"] is not None else float("inf")))
    result: dict = {"rows": rows}
    if "akd" in by_name and "dmp" in by_name:
        result["akd_vs_dmp"] = {
            "nkid_akd": by_name["akd"]["nkid_mean"],
            "nkid_dmp": by_name["dmp"]["nkid_mean"],
            "auc_difference": abs(by_name["akd"]["auc_mean"] - by_name["dmp"]["auc_mean"]),
        }
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "comparison.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["defense", "auc_mean", "auc_std", "nkid_mean", "nkid_std", "gap_mean", "overlap_mean", "n_ok"])
            for row in rows:
                writer.writerow([row["defense"]] + [repr(row[k]) for k in
                                ("auc_mean", "auc_std", "nkid_mean", "nkid_std", "gap_mean", "overlap_mean")] + [row["n_ok"]])
    return result
