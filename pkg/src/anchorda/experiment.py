"""End-to-end protocol: generate, pick alpha, train base models, replay the fraction journey, report.

Output layout of a journey directory::

    alphas.json               chosen alpha per (model, metric)
    checkpoints/<model>_a<alpha>_s<seed>.ckpt
    cells/<model>_s<seed>.csv  one file per (model, seed); existing cells are skipped
    roc/<model>_s<seed>.csv    pooled cold-start ROC points
    failures.json              cells that raised, if any
    results.csv                all cells merged in canonical order
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from anchorda import metrics as M
from anchorda.checkpoint import load_checkpoint, save_checkpoint
from anchorda.models import KINDS, Checkpoint, TrainConfig, fine_tune, predict, train_base
from anchorda.synth import (
    FRACTIONS,
    Dataset,
    DatasetSplit,
    GeneratorConfig,
    generate,
    read_dataset,
    sample_partner_fraction,
    split_head_tail,
    write_dataset,
)

log = logging.getLogger(__name__)

SELECT_METRICS = ("auc", "ndcg", "ap")
# precision@k follows the alpha chosen for AP
ALPHA_SOURCE = {"auc": "auc", "ndcg": "ndcg", "ap": "ap", "precision": "ap"}
DEFAULT_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
RESULT_COLUMNS = ["model", "fraction", "setting", "metric", "k", "value", "n_partners_included", "seed"]


class ConfigError(ValueError):
    pass


class EmptyResultsError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_overrides: dict[str, dict] = field(default_factory=dict)
    models: list[str] = field(default_factory=lambda: list(KINDS))
    fractions: list[float] = field(default_factory=lambda: list(FRACTIONS))
    alpha_grid: list[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    alphas: dict[str, dict[str, float]] = field(default_factory=dict)
    metrics: list[str] = field(default_factory=lambda: list(M.METRICS))
    k: int | str = "auto"
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    grid_seeds: int = 5
    head_volume_fraction: float = 0.8
    n_validation: int | None = None
    split_seed: int = 0

    def __post_init__(self):
        if isinstance(self.generator, dict):
            self.generator = GeneratorConfig.from_dict(self.generator)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        self.validate()

    def validate(self):
        bad = [m for m in self.models if m not in KINDS]
        if bad or not self.models:
            raise ConfigError(f"unknown or missing model kinds: {bad}")
        fr = list(self.fractions)
        if not fr or fr[0] != 0.0 or any(not 0.0 <= f <= 1.0 for f in fr) or fr != sorted(set(fr)):
            raise ConfigError(f"fractions must be distinct, ascending, within [0, 1] and start at 0; got {fr}")
        if not self.alpha_grid or any(not 0.0 < a <= 1.0 for a in self.alpha_grid):
            raise ConfigError("alpha_grid must be a non-empty list of values in (0, 1]")
        bad = [m for m in self.metrics if m not in M.METRICS]
        if bad:
            raise ConfigError(f"unknown metrics {bad}")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if not isinstance(self.grid_seeds, int) or self.grid_seeds < 1:
            raise ConfigError("grid_seeds must be a positive integer")
        if self.k != "auto" and (not isinstance(self.k, int) or self.k < 1):
            raise ConfigError("k must be 'auto' or a positive integer")
        if not 0.0 < self.head_volume_fraction <= 1.0:
            raise ConfigError("head_volume_fraction must lie in (0, 1]")
        for kind, table in self.alphas.items():
            for metric, a in table.items():
                if not 0.0 < a <= 1.0:
                    raise ConfigError(f"alpha for {kind}/{metric} must lie in (0, 1]")

    def train_config(self, kind: str, alpha: float, seed: int) -> TrainConfig:
        d = self.train.to_dict()
        d.update(self.train_overrides.get(kind, {}))
        d.update(alpha=1.0 if kind == "nt" else alpha, seed=seed)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["train"] = self.train.to_dict()
        return d


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# data


def cmd_generate(config: ExperimentConfig, out) -> Path:
    """Generate the dataset and write it with its split manifest."""
    out = Path(out)
    ds = generate(config.generator)
    split = split_head_tail(ds.records, ds.profiles, config.head_volume_fraction,
                            config.n_validation, config.split_seed)
    write_dataset(ds, out)
    (out / "split.json").write_text(json.dumps(split.to_dict(), sort_keys=True, indent=1) + "\n")
    return out


def load_data(data_dir) -> tuple[Dataset, DatasetSplit]:
    data_dir = Path(data_dir)
    ds = read_dataset(data_dir)
    raw = json.loads((data_dir / "split.json").read_text())
    return ds, DatasetSplit(**raw)


# ---------------------------------------------------------------------------
# evaluation


def scored_sets(ckpt: Checkpoint, ds: Dataset, partners, view: str, day: str = "eval") -> list[M.ScoredSet]:
    rec = ds.records
    idx = rec.where(day=day, partners=partners)
    if idx.size == 0:
        return []
    scores = predict(ckpt, rec.features()[idx], view, rec.schema)
    part = rec.partner[idx]
    sets = []
    for p in sorted(set(part.tolist())):
        sel = part == p
        sets.append(M.ScoredSet(scores[sel], rec.label[idx][sel], idx[sel], p))
    return sets


def evaluate(ckpt: Checkpoint, ds: Dataset, partners, view: str, k="auto", metrics=M.METRICS) -> M.EvalReport:
    sets = scored_sets(ckpt, ds, partners, view)
    if not sets:
        raise ValueError("no evaluation records for the requested partners")
    return M.aggregate(sets, k, metrics)


def view_for(fraction: float) -> str:
    return "target" if fraction == 0 else "source"


def _head_xy(ds: Dataset, split: DatasetSplit):
    rec = ds.records
    idx = rec.where(day="train", partners=split.head)
    return rec.features()[idx], rec.label[idx].astype(np.float64)


def grid_search(ds: Dataset, split: DatasetSplit, kind: str, config: ExperimentConfig,
                metrics=SELECT_METRICS, seeds=None) -> tuple[dict[str, float], dict]:
    """Alpha maximising cold-start macro performance on validation partners, per metric.

    Each alpha's validation value is averaged over ``seeds`` (default: the
    first ``config.grid_seeds`` training seeds). Ties go to the larger alpha.
    NT has no transfer term and reports 1.0. Returns ``(chosen, table)``
    where ``table[alpha][metric]`` holds the averaged validation values
    (empty when no comparison was needed).
    """
    grid = sorted(set(config.alpha_grid))
    if not grid:
        raise ConfigError("empty alpha grid")
    if kind == "nt":
        return {m: 1.0 for m in metrics}, {}
    if len(grid) == 1:
        return {m: grid[0] for m in metrics}, {}
    if not split.validation:
        raise ValueError("grid search needs validation partners")
    seeds = list(config.seeds[:config.grid_seeds] if seeds is None else seeds)
    x, y = _head_xy(ds, split)
    table = {}
    for a in grid:
        values: dict[str, list[float]] = {m: [] for m in metrics}
        for seed in seeds:
            ckpt = train_base(kind, ds.records.schema, x, y, config.train_config(kind, a, seed))
            rep = evaluate(ckpt, ds, split.validation, "target", config.k, metrics)
            for m in metrics:
                if rep.macro[m] is not None:
                    values[m].append(rep.macro[m])
        table[a] = {m: (math.fsum(v) / len(v) if v else None) for m, v in values.items()}
    chosen = {}
    for m in metrics:
        best = None
        for a in grid:
            v = table[a][m]
            if v is not None and (best is None or v >= table[best][m]):
                best = a
        chosen[m] = best if best is not None else max(grid)
    return chosen, table


def resolve_alphas(ds, split, config: ExperimentConfig, out: Path | None = None) -> dict[str, dict[str, float]]:
    """Per-(model, metric) alphas: from the config where given, grid search otherwise."""
    path = None if out is None else out / "alphas.json"
    if path is not None and path.exists():
        return json.loads(path.read_text())
    chosen = {}
    for kind in config.models:
        given = config.alphas.get(kind, {})
        if kind == "nt":
            chosen[kind] = {m: 1.0 for m in SELECT_METRICS}
        elif all(m in given for m in SELECT_METRICS):
            chosen[kind] = {m: float(given[m]) for m in SELECT_METRICS}
        else:
            found, _ = grid_search(ds, split, kind, config)
            chosen[kind] = {m: float(given.get(m, found[m])) for m in SELECT_METRICS}
            log.info("grid search %s -> %s", kind, chosen[kind])
    if path is not None:
        path.write_text(json.dumps(chosen, sort_keys=True, indent=1) + "\n")
    return chosen


# ---------------------------------------------------------------------------
# journey


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def _rows(kind, fraction, seed, report: M.EvalReport, metrics) -> list[list[str]]:
    rows = []
    for setting, table in (("macro", report.macro), ("micro", report.micro)):
        for m in metrics:
            k = str(report.k) if m in ("ndcg", "precision") else ""
            n_inc = report.n_included[m] if setting == "macro" else ""
            rows.append([kind, f"{fraction:g}", setting, m, k, _fmt(table[m]), str(n_inc), str(seed)])
    return rows


def fraction_xy(ds: Dataset, partners, fraction: float, seed: int):
    rec = ds.records
    idx = sample_partner_fraction(rec, partners, fraction, seed)
    return rec.features()[idx], rec.label[idx].astype(np.float64)


def run_cell(ds, split, config: ExperimentConfig, kind: str, seed: int, alphas: dict[str, float],
             out: Path | None = None) -> tuple[list[list[str]], np.ndarray]:
    """All fractions for one (model, seed): rows for the results table and cold-start ROC points."""
    x, y = _head_xy(ds, split)
    by_alpha: dict[float, list[str]] = {}
    for m in config.metrics:
        by_alpha.setdefault(alphas[ALPHA_SOURCE[m]], []).append(m)
    rows = []
    roc = None
    for a, ms in sorted(by_alpha.items()):
        tcfg = config.train_config(kind, a, seed)
        base = train_base(kind, ds.records.schema, x, y, tcfg)
        if out is not None:
            save_checkpoint(base, out / "checkpoints" / f"{kind}_a{a:g}_s{seed}.ckpt")
        for f in config.fractions:
            fx, fy = fraction_xy(ds, split.test, f, seed)
            ck = fine_tune(base, fx, fy, fraction=f)
            rep = evaluate(ck, ds, split.test, view_for(f), config.k, ms)
            rows.extend(_rows(kind, f, seed, rep, ms))
            if f == 0 and "auc" in ms:
                sets = scored_sets(ck, ds, split.test, "target")
                pooled = M.ScoredSet(np.concatenate([s.scores for s in sets]),
                                     np.concatenate([s.labels for s in sets]),
                                     np.concatenate([s.ids for s in sets]))
                roc = M.roc_points(pooled)
    order = {m: i for i, m in enumerate(config.metrics)}
    frac_order = {f"{f:g}": i for i, f in enumerate(config.fractions)}
    rows.sort(key=lambda r: (frac_order[r[1]], r[2], order[r[3]]))
    return rows, roc


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def run_journey(data_dir, config: ExperimentConfig, out) -> dict:
    """Run every (model, seed) cell, skipping cells whose file already exists.

    Returns a summary with the chosen alphas and any failed cells.
    """
    out = Path(out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "roc").mkdir(exist_ok=True)
    ds, split = load_data(data_dir)
    alphas = resolve_alphas(ds, split, config, out)
    failures = {}
    for kind in config.models:
        for seed in config.seeds:
            cell = out / "cells" / f"{kind}_s{seed}.csv"
            if cell.exists():
                continue
            try:
                rows, roc = run_cell(ds, split, config, kind, seed, alphas[kind], out)
            except Exception as exc:  # a failed cell is recorded, the run goes on
                log.error("cell %s/%s failed: %s", kind, seed, exc)
                failures[f"{kind}_s{seed}"] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
                continue
            if roc is not None:
                _write_csv(out / "roc" / f"{kind}_s{seed}.csv", ["fpr", "tpr"], [[_fmt(a), _fmt(b)] for a, b in roc])
            _write_csv(cell, RESULT_COLUMNS, rows)
    merge_cells(out, config)
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, sort_keys=True, indent=1) + "\n")
    return {"alphas": alphas, "failures": failures}


def merge_cells(out: Path, config: ExperimentConfig) -> Path:
    rows = []
    for kind in config.models:
        for seed in config.seeds:
            cell = out / "cells" / f"{kind}_s{seed}.csv"
            if cell.exists():
                with cell.open() as fh:
                    rows.extend(list(csv.reader(fh))[1:])
    path = out / "results.csv"
    _write_csv(path, RESULT_COLUMNS, rows)
    return path


# ---------------------------------------------------------------------------
# report


def read_results(results_dir) -> list[dict]:
    path = Path(results_dir) / "results.csv"
    if not path.exists():
        raise EmptyResultsError(f"no results.csv in {results_dir}")
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyResultsError(f"{path} has no result rows")
    return rows


def gain(value: float | None, baseline: float | None) -> float | None:
    """Percentage gain over the baseline, ``100 * (value - baseline) / baseline``."""
    if value is None or baseline is None or baseline == 0:
        return None
    return 100.0 * (value - baseline) / baseline


def summarize(rows: list[dict]) -> dict[tuple, dict]:
    """Seed-averaged values keyed by ``(model, fraction, setting, metric)``."""
    acc: dict[tuple, list[float]] = {}
    seeds: dict[tuple, int] = {}
    for r in rows:
        key = (r["model"], float(r["fraction"]), r["setting"], r["metric"])
        seeds[key] = seeds.get(key, 0) + 1
        if r["value"] != "":
            acc.setdefault(key, []).append(float(r["value"]))
    out = {}
    for key, n in seeds.items():
        vals = acc.get(key, [])
        out[key] = {"mean": math.fsum(vals) / len(vals) if vals else None, "n_seeds": len(vals), "n_rows": n}
    return out


def cmd_report(results_dir, baseline: str = "nt") -> dict:
    """Write ``summary.csv`` (seed means) and ``gains.csv`` (gain over NT) next to the results."""
    results_dir = Path(results_dir)
    summary = summarize(read_results(results_dir))
    keys = sorted(summary, key=lambda k: (k[1], k[2], k[3], k[0]))
    _write_csv(results_dir / "summary.csv", ["model", "fraction", "setting", "metric", "mean", "n_seeds"],
               [[k[0], f"{k[1]:g}", k[2], k[3], _fmt(summary[k]["mean"]), summary[k]["n_seeds"]] for k in keys])
    gains = {}
    for k in keys:
        base = summary.get((baseline, k[1], k[2], k[3]))
        gains[k] = gain(summary[k]["mean"], base["mean"] if base else None)
    _write_csv(results_dir / "gains.csv", ["model", "fraction", "setting", "metric", "gain_pct"],
               [[k[0], f"{k[1]:g}", k[2], k[3], _fmt(gains[k])] for k in keys])
    return {"summary": summary, "gains": gains}


def load_base(path, ds: Dataset) -> Checkpoint:
    return load_checkpoint(path, ds.records.schema.fingerprint)
