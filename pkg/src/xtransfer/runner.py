"""Experiment runner behind the command line: gen-sources, run, eval, report.

Workers only compute; every file of a run directory is written by the
calling process after results are collected in (shot, fold) order, so
outputs do not depend on the number of jobs.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench, serialize
from .config import ExperimentConfig, validate_against
from .bench import TaskStream, TargetSpec
from .errors import ConfigError, IntegrityError
from .lws import SearchConfig, xtransfer
from .zoo import ResourceCost

REPORT_VERSION = 1
NORM_ANCHOR = "largest source backbone"


def clean(obj):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def resolve_jobs(jobs=None):
    env = os.environ.get("XTRANSFER_JOBS")
    if env:
        jobs = int(env)
    return max(1, int(jobs or 1))


def run_seed(cfg: ExperimentConfig, shot, fold):
    return int(np.random.SeedSequence([cfg.seed, int(shot), int(fold)]).generate_state(1)[0] % 2**31)


def norm_reference(sources):
    return max((s.cost for s in sources), key=lambda c: (c.flops + c.params, c.flops))


# --------------------------------------------------------------------------
# gen-sources

def source_path(cfg: ExperimentConfig, i):
    return Path(cfg.out_dir) / "sources" / f"source{i}.json"


def cmd_gen_sources(cfg: ExperimentConfig, log=print):
    """Generate and write the source models; returns ``[(path, sha256)]``."""
    sources = bench.make_sources(cfg.seed, cfg.sources)
    out = []
    for i, src in enumerate(sources):
        p = source_path(cfg, i)
        sha = serialize.save_source(src, p)
        log(f"{p} {sha}")
        out.append((str(p), sha))
    return out


def load_sources(cfg: ExperimentConfig, log=print):
    """Load the run's source models, generating them first if absent."""
    paths = [source_path(cfg, i) for i in range(cfg.sources.count)]
    if not all(p.exists() for p in paths):
        log("source manifests missing; generating")
        cmd_gen_sources(cfg, log)
    sources = [serialize.load_source(p) for p in paths]
    for src in sources:
        if src.spec.get("seed") is None or len(src.source_classes) != cfg.sources.n_classes:
            raise ConfigError(f"{cfg.out_dir}: stored sources do not match the config")
    return sources


# --------------------------------------------------------------------------
# run

_WORKER = {}


def _init_worker(cfg_doc, source_files):
    _WORKER["cfg"] = ExperimentConfig.from_dict(cfg_doc)
    _WORKER["sources"] = [serialize.load_source(p) for p in source_files]


class _RecordingMapper:
    """``map`` that keeps every repair outcome for the loss-trace CSV."""

    def __init__(self):
        self.rows = []
        self.count = 0

    def __call__(self, fn, args):
        args = list(args)
        outs = [fn(a) for a in args]
        for (i, d, _), out in zip(args, outs):
            for ep, loss, lr in out.trace_rows():
                self.rows.append((self.count, i, d, ep, loss, lr))
            self.count += 1
        return outs


def run_one(cfg: ExperimentConfig, sources, shot, fold):
    """XTransfer plus baselines on one (shot, fold) task; returns plain data."""
    stream = TaskStream(cfg.seed, cfg.target)
    task = stream.task(shot, fold)
    seed = run_seed(cfg, shot, fold)
    ref = norm_reference(sources)
    ref_src = next(s for s in sources if s.cost == ref)
    search_cfg = SearchConfig(depth_span=cfg.search_depth, budget=cfg.budget, pre_search=cfg.pre_search,
                              alpha=cfg.alpha, compare_input=cfg.compare_input)
    provenance = {"config_hash": cfg.digest(), "base_seed": cfg.seed, "seed": seed, "shot": int(shot),
                  "fold": int(fold), "target": {**asdict(cfg.target), "shape": list(cfg.target.shape)},
                  "norm_ref": ref.to_dict(), "alpha": cfg.alpha}
    mapper = _RecordingMapper()
    res = xtransfer(sources, task.support_x, task.support_y, task.n_way, search_cfg, cfg.train,
                    removal=cfg.removal_enabled, pca_components=cfg.pca_components, seed=seed,
                    finetune_epochs=cfg.finetune_epochs, mapper=mapper, provenance=provenance)
    rows = [bench.evaluate("xtransfer", res.model, task, res.model.total_cost, ref, cfg.alpha, seed)]
    for name in cfg.baselines:
        fn = bench.baseline_tl if name == "tl" else bench.baseline_ft
        m = fn(ref_src, task, cfg.train, seed=seed)
        rows.append(bench.evaluate(name, m, task, m.cost(task.support_x.shape[1:]), ref, cfg.alpha, seed))
    trace = [{"shot": int(shot), "fold": int(fold), **rec} for rec in res.search.trace]
    return {"shot": int(shot), "fold": int(fold), "rows": rows, "trace": trace,
            "loss": mapper.rows, "model": res.model}


def _run_task(args):
    shot, fold = args
    return run_one(_WORKER["cfg"], _WORKER["sources"], shot, fold)


def cmd_run(cfg: ExperimentConfig, jobs=1, log=print):
    """Full pipeline for every (shot, fold); writes models, trace and reports.

    Returns the report document.
    """
    sources = load_sources(cfg, log)
    work = [(s, f) for s in cfg.shots for f in cfg.fold_list]
    jobs = resolve_jobs(jobs)
    if jobs > 1 and len(work) > 1:
        files = [str(source_path(cfg, i)) for i in range(len(sources))]
        with ProcessPoolExecutor(min(jobs, len(work)), initializer=_init_worker,
                                 initargs=(cfg.to_dict(), files)) as ex:
            results = list(ex.map(_run_task, work))
    else:
        results = [run_one(cfg, sources, s, f) for s, f in work]
    return write_run(cfg, sources, results, log)


def write_run(cfg, sources, results, log=print):
    out = Path(cfg.out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(serialize.dumps(cfg.to_dict()))
    trace_lines, rows = [], []
    loss = io.StringIO()
    w = csv.writer(loss, lineterminator="\n")
    w.writerow(["shot", "fold", "repair", "model", "depth", "episode", "loss", "lr"])
    for r in results:
        p = out / "models" / f"shot{r['shot']}_fold{r['fold']}.json"
        serialize.save_recombined(r["model"], p)
        trace_lines += [json.dumps(clean(rec), sort_keys=True, separators=(",", ":")) for rec in r["trace"]]
        for rep, i, d, ep, l, lr in r["loss"]:
            w.writerow([r["shot"], r["fold"], rep, i, d, ep, repr(float(l)), repr(float(lr))])
        rows += r["rows"]
        acc = {row["method"]: row["accuracy"] for row in r["rows"]}
        log(f"shot {r['shot']} fold {r['fold']}: " + " ".join(f"{k} {v:.3f}" for k, v in acc.items()))
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in trace_lines))
    (out / "loss_traces.csv").write_text(loss.getvalue())
    (out / "rows.json").write_text(serialize.dumps(clean(rows)))
    doc = write_reports(out, rows, norm_reference(sources), cfg.alpha, cfg.digest())
    log(f"wrote {out}")
    return doc


# --------------------------------------------------------------------------
# reports

def report_document(rows, norm_ref: ResourceCost, alpha, config_hash=None):
    reports = bench.summarize(rows, norm_ref)
    header = {"version": REPORT_VERSION, "alpha": alpha,
              "norm_ref": {"flops": norm_ref.flops, "params": norm_ref.params, "anchor": NORM_ANCHOR}}
    if config_hash is not None:
        header["config_hash"] = config_hash
    doc = clean({"header": header, "reports": [r.to_dict() for r in reports]})
    validate_against(doc, "report")
    return doc, reports


def write_reports(out, rows, norm_ref, alpha, config_hash=None):
    out = Path(out)
    doc, reports = report_document(rows, norm_ref, alpha, config_hash)
    (out / "report.json").write_text(serialize.dumps(doc))
    (out / "report.csv").write_text(bench.reports_csv(reports))
    (out / "long.csv").write_text(bench.long_format_csv(rows))
    return doc


def format_table(doc):
    lines = [f"{'method':<10} {'shot':>4} {'acc':>6} {'atr':>8} {'overfit':>8} {'flops':>9} {'params':>7}"]
    for r in doc["reports"]:
        ov = "-" if r["overfit"] is None else f"{r['overfit']:.3f}"
        lines.append(f"{r['method']:<10} {r['shot']:>4} {r['accuracy']:>6.3f} {r['atr']:>8.3f} {ov:>8} "
                     f"{r['flops']:>9} {r['params']:>7}")
    return "\n".join(lines)


def cmd_report(run_dir, log=print):
    """Rebuild report files from a run directory's per-seed rows."""
    run_dir = Path(run_dir)
    rows = json.loads((run_dir / "rows.json").read_text())
    for r in rows:
        if r.get("overfit") is None:
            r["overfit"] = float("nan")
    old = json.loads((run_dir / "report.json").read_text()) if (run_dir / "report.json").exists() else None
    cfg = json.loads((run_dir / "config.json").read_text())
    if old is not None:
        nr = old["header"]["norm_ref"]
        ref = ResourceCost(nr["flops"], nr["params"])
    else:
        ref = ResourceCost(max(r["flops"] for r in rows), max(r["params"] for r in rows))
    doc = write_reports(run_dir, rows, ref, cfg.get("alpha", 0.5),
                        ExperimentConfig.from_dict(cfg).digest())
    log(format_table(doc))
    return doc


# --------------------------------------------------------------------------
# eval

def cmd_eval(model_path, cfg: ExperimentConfig = None, shot=None, fold=None, out=None, log=print):
    """Load a recombined model, verify it and evaluate it on its task.

    The task is rebuilt from the model's provenance; ``cfg``/``shot``/``fold``
    override it.  Returns the report document.
    """
    model = serialize.load_recombined(model_path)
    prov = model.provenance
    if cfg is not None:
        target, base_seed, alpha = cfg.target, cfg.seed, cfg.alpha
    else:
        t = prov["target"]
        target = TargetSpec(t["n_classes"], tuple(t["shape"]), t["n_users"], t["n_query"])
        base_seed, alpha = prov["base_seed"], prov.get("alpha", 0.5)
    shot = prov["shot"] if shot is None else int(shot)
    fold = prov["fold"] if fold is None else int(fold)
    task = TaskStream(base_seed, target).task(shot, fold)
    ref = ResourceCost(**prov["norm_ref"])
    before = model.frozen_hash()
    row = bench.evaluate("xtransfer", model, task, model.total_cost, ref, alpha, prov.get("seed", 0))
    if model.frozen_hash() != before:
        raise IntegrityError("evaluation modified frozen layers")
    doc, _ = report_document([row], ref, alpha, prov.get("config_hash"))
    text = serialize.dumps(doc)
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    log(text.rstrip())
    return doc
