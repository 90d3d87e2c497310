"""Staged experiment runner: data -> train -> attack -> (defend) -> eval.

Every stage owns one directory under ``out`` and reads its inputs back
from disk, so a resumed run sees exactly what a fresh run would. The
manifest records each stage's key (config section + upstream digests)
and the sha256 of every file it wrote.
"""
from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from aip import __version__
from aip.attacks import AttackConfig, classifier_targeted_batch, csema, default_pgd_step, expa_batch, insa_batch
from aip.config import dump_config, validate
from aip.data import SynthConfig, load_dataset, load_image, make_dataset, save_dataset, save_image
from aip.defenses import apply_defense, defense_sweep
from aip.errors import StageError
from aip.evaluation import CandidatePool, evaluate_attack, reports_to_csv
from aip.recommenders import (BPR_DEFAULTS, DVBPR_DEFAULTS, VBPR_DEFAULTS, auc_leave_one_out, bpr_train,
                              build_simrank, dvbpr_train, load_model, most_popular_class, pretrain_extractor,
                              save_model, vbpr_train)

log = logging.getLogger("aip.pipeline")

STAGES = ("data", "train", "attack", "defend", "eval")
STAGE_DIRS = {"data": "dataset", "train": "models", "attack": "attacks", "defend": "defenses", "eval": "reports"}
SEED_OFFSETS = {"bpr": 0, "extractor": 1, "vbpr": 2, "amr": 2, "dvbpr": 3, "attack": 4}
RANKER_DEFAULTS = {"vbpr": VBPR_DEFAULTS, "amr": replace(VBPR_DEFAULTS, adv_weight=1.0), "dvbpr": DVBPR_DEFAULTS}


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def attack_tag(entry):
    return entry["kind"] if entry["kind"] == "csema" else f"{entry['kind']}_eps{entry.get('eps', 32)}"


def _train_config(section, default, seed):
    return replace(default, **section, seed=seed)


@dataclass
class PipelineResult:
    out: Path
    executed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @property
    def report_path(self):
        return self.out / "reports" / "report.json"

    @property
    def csv_path(self):
        return self.out / "reports" / "report.csv"


# -- stages --------------------------------------------------------------------

def stage_data(cfg, out):
    root = out / "dataset"
    section = cfg["dataset"]
    if "path" in section:
        ds = load_dataset(section["path"])
        save_dataset(ds, root)
        return
    params = dict(section["synth"])
    if "image_shape" in params:
        params["image_shape"] = tuple(params["image_shape"])
    synth = SynthConfig(**params, seed=cfg["seed"])
    synth.check()
    ds = make_dataset(synth, n_cold=synth.n_cold, seed=cfg["seed"])
    save_dataset(ds, root, synth)


def stage_train(cfg, out):
    ds = load_dataset(out / "dataset")
    root = out / "models"
    root.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    models = cfg["models"]
    bpr = bpr_train(ds, _train_config(models.get("bpr", {}), BPR_DEFAULTS, seed + SEED_OFFSETS["bpr"]))
    save_model(bpr, root / "bpr.rec")
    extractor, classifier = pretrain_extractor(ds, **models.get("extractor", {}), seed=seed + SEED_OFFSETS["extractor"])
    save_model(classifier, root / "classifier.rec")
    summary = {"bpr_auc": auc_leave_one_out(bpr, ds, seed=seed), "rankers": {}}
    for name, section in models["rankers"].items():
        if name == "simrank":
            model = build_simrank(extractor, ds)
        elif name == "dvbpr":
            model = dvbpr_train(ds, _train_config(section, DVBPR_DEFAULTS, seed + SEED_OFFSETS["dvbpr"]))
        else:
            tc = _train_config(section, RANKER_DEFAULTS[name], seed + SEED_OFFSETS[name])
            model = vbpr_train(ds, extractor, tc, kind=name)
        save_model(model, root / f"{name}.rec")
        history = getattr(model, "history", None) or {}
        summary["rankers"][name] = {"final_epoch_loss": history.get("epoch_loss", [None])[-1]}
    _write_json(root / "training.json", summary)


def _cold(ds, cfg):
    return list(ds.cold_items)[:cfg["eval"].get("n_cold", 50)]


def _resolve(value, auto):
    return auto if value == "auto" else int(value)


def _attack_config(entry, ds, seed):
    kind = entry["kind"]
    hook = _resolve(entry["hook"], ds.hook_item()) if kind in ("expa", "csema") else None
    target = _resolve(entry["target"], most_popular_class(ds)) if kind in ("fgsm", "pgd") else None
    ac = AttackConfig(kind=kind, eps=entry.get("eps", 32), iters=entry.get("iters", 30), step=entry.get("step", 0.01),
                      hook=hook, target=target, seed=seed, user_batch=entry.get("user_batch"),
                      optimizer=entry.get("optimizer", "adam"))
    if kind == "pgd" and "step" not in entry:
        ac = replace(ac, step=default_pgd_step(ac))
    return ac.check()


def _save_images(directory, items, results):
    directory.mkdir(parents=True, exist_ok=True)
    traces = {}
    for item, res in zip(items, results):
        image = res if isinstance(res, np.ndarray) else res.image
        save_image(image, directory / f"{item}.png")
        if not isinstance(res, np.ndarray):
            traces[str(item)] = res.to_json()
    _write_json(directory / "traces.json", traces)


def stage_attack(cfg, out):
    ds = load_dataset(out / "dataset")
    cold = _cold(ds, cfg)
    originals = ds.images[cold]
    rankers = {name: load_model(out / "models" / f"{name}.rec") for name in cfg["models"]["rankers"]}
    classifier = load_model(out / "models" / "classifier.rec")
    root = out / "attacks"
    index = {}
    for entry in cfg["attacks"]:
        ac = _attack_config(entry, ds, cfg["seed"] + SEED_OFFSETS["attack"])
        tag = attack_tag(entry)
        targets = entry.get("rankers", list(rankers))
        if ac.kind in ("fgsm", "pgd", "csema"):
            if ac.kind == "csema":
                results = [csema(x, ds.images[ac.hook]) for x in originals]
            else:
                results = classifier_targeted_batch(originals, classifier, ac)
            _save_images(root / tag / "shared", cold, results)
            for name in targets:
                index[f"{name}/{tag}"] = f"{tag}/shared"
            continue
        for name in targets:
            model = rankers[name]
            if ac.kind == "insa":
                results = insa_batch(model, originals, ac)
            else:
                results = expa_batch(model.extractor, originals, ds.images[ac.hook], ac)
            _save_images(root / tag / name, cold, results)
            index[f"{name}/{tag}"] = f"{tag}/{name}"
    _write_json(root / "index.json", {"cold_items": cold, "sets": index})


def _attack_sets(out):
    return json.loads((out / "attacks" / "index.json").read_text())


def _load_set(directory, items):
    return np.stack([load_image(directory / f"{i}.png") for i in items])


def _defense_targets(entry, sets):
    for key in sorted(sets):
        ranker, tag = key.split("/")
        if ranker in entry.get("rankers", [ranker]) and tag.split("_")[0] in entry.get("attacks", [tag.split("_")[0]]):
            yield key, ranker, tag


def stage_defend(cfg, out):
    ds = load_dataset(out / "dataset")
    index = _attack_sets(out)
    cold, sets = index["cold_items"], index["sets"]
    root = out / "defenses"
    root.mkdir(parents=True, exist_ok=True)
    ev = cfg["eval"]
    pools = {}
    bpr = load_model(out / "models" / "bpr.rec")
    table, applied = {}, {}
    for entry in cfg["defenses"]:
        kind = entry["kind"]
        for key, ranker, tag in _defense_targets(entry, sets):
            adv = _load_set(out / "attacks" / sets[key], cold)
            if "level" in entry:
                name = f"{tag}+{kind}{entry['level']}"
                target = root / name / ranker
                _save_images(target, cold, list(apply_defense(adv, kind, entry["level"])))
                applied[f"{ranker}/{name}"] = f"{name}/{ranker}"
                continue
            if ranker not in pools:
                pools[ranker] = CandidatePool(load_model(out / "models" / f"{ranker}.rec"), bpr, ds,
                                              ev.get("k", 100), ev.get("n", 5))
            pool = pools[ranker]
            coop_hits, _, _ = pool.evaluate_images(cold, ds.images[cold])
            result = defense_sweep(pool, cold, adv, float(coop_hits.mean()), kind,
                                   cooperative_images=ds.images[cold], defend_all=ev.get("defend_all", False))
            table[f"{ranker}/{tag}/{kind}"] = result.to_dict()
    _write_json(root / "sweep.json", {"table": {k: v["level"] for k, v in table.items()}, "details": table,
                                       "applied": applied})


def stage_eval(cfg, out):
    ds = load_dataset(out / "dataset")
    index = _attack_sets(out)
    cold, sets = index["cold_items"], dict(index["sets"])
    sweep = {}
    defenses = out / "defenses" / "sweep.json"
    if defenses.exists():
        sweep = json.loads(defenses.read_text())
        sets.update({k: str(Path("..") / "defenses" / v) for k, v in sweep["applied"].items()})
    ev = cfg["eval"]
    bpr = load_model(out / "models" / "bpr.rec")
    coop = ds.images[cold]
    reports = []
    for ranker in cfg["models"]["rankers"]:
        pool = CandidatePool(load_model(out / "models" / f"{ranker}.rec"), bpr, ds, ev.get("k", 100), ev.get("n", 5))
        reports.append(evaluate_attack(pool, cold, coop, coop, ranker, "none"))
        for key in sorted(k for k in sets if k.split("/")[0] == ranker):
            adv = _load_set((out / "attacks" / sets[key]).resolve(), cold)
            reports.append(evaluate_attack(pool, cold, coop, adv, ranker, key.split("/")[1]))
    root = out / "reports"
    root.mkdir(parents=True, exist_ok=True)
    _write_report(root / "report", reports, sweep, ev.get("n", 5))
    if cfg.get("sweep", {}).get("param") == "eps":
        for eps in cfg["sweep"]["values"]:
            chosen = [r for r in reports if r.attack == "none" or r.attack.split("+")[0].endswith(f"_eps{eps}")]
            _write_report(root / f"eps_{eps}", chosen, {}, ev.get("n", 5))


def _write_report(stem, reports, sweep, n):
    doc = {"version": __version__, "summaries": [r.summary() for r in reports],
           "reports": [r.to_dict() for r in reports], "defense_sweep": sweep.get("table", {}),
           "defense_details": sweep.get("details", {})}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=_plain) + "\n")
    stem.with_suffix(".csv").write_text(reports_to_csv(reports, n))


def _plain(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(type(value))


RUNNERS = {"data": stage_data, "train": stage_train, "attack": stage_attack, "defend": stage_defend,
           "eval": stage_eval}


# -- orchestration -------------------------------------------------------------

def _section(cfg, stage):
    return {
        "data": {"dataset": cfg["dataset"]},
        "train": {"models": cfg["models"]},
        "attack": {"attacks": cfg["attacks"], "n_cold": cfg["eval"].get("n_cold", 50)},
        "defend": {"defenses": cfg["defenses"], "eval": cfg["eval"]},
        "eval": {"eval": cfg["eval"], "sweep": cfg.get("sweep")},
    }[stage]


def _artifacts(out, stage):
    root = out / STAGE_DIRS[stage]
    return {str(p.relative_to(out)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def _intact(out, entry):
    return all((out / rel).is_file() and sha256_file(out / rel) == digest for rel, digest in entry["artifacts"].items())


def load_manifest(out):
    path = Path(out) / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else None


@contextlib.contextmanager
def thread_cap(threads):
    if not threads:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=int(threads)):
        yield


def run_pipeline(config, out=None, resume=False, threads=None, stop_after=None):
    """Execute every stage; raise StageError naming the failing stage.

    With ``resume``, a stage is skipped when its key matches the manifest and
    all of its recorded artifacts are intact on disk.
    """
    cfg = validate(config)
    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    previous = (load_manifest(out) or {}).get("stages", {}) if resume else {}
    stages = [s for s in STAGES if s != "defend" or cfg["defenses"]]
    if stop_after is not None:
        stages = stages[:stages.index(stop_after) + 1]
    manifest = {"version": __version__, "seed": cfg["seed"], "config": "config.json", "stages": {},
                "last_good_stage": None, "failed_stage": None, "error": None}
    (out / "config.json").write_text(dump_config(cfg) + "\n")
    result = PipelineResult(out, manifest=manifest)
    for stale in set(STAGES) - set(stages):
        if stop_after is None:
            shutil.rmtree(out / STAGE_DIRS[stale], ignore_errors=True)
    upstream = {}
    with thread_cap(threads):
        for stage in stages:
            key = _digest({"stage": stage, "seed": cfg["seed"], "section": _section(cfg, stage),
                           "upstream": upstream, "version": __version__})
            old = previous.get(stage)
            if old is not None and old["key"] == key and _intact(out, old):
                entry = old
                result.skipped.append(stage)
                log.info("stage %s: up to date, skipped", stage)
            else:
                shutil.rmtree(out / STAGE_DIRS[stage], ignore_errors=True)
                try:
                    RUNNERS[stage](cfg, out)
                except Exception as exc:
                    manifest["failed_stage"] = stage
                    manifest["error"] = f"{type(exc).__name__}: {exc}"
                    _write_json(out / "manifest.json", manifest)
                    raise StageError(f"stage {stage!r} failed: {exc}", stage=stage) from exc
                entry = {"key": key, "artifacts": _artifacts(out, stage)}
                result.executed.append(stage)
                log.info("stage %s: done (%d artifacts)", stage, len(entry["artifacts"]))
            manifest["stages"][stage] = entry
            manifest["last_good_stage"] = stage
            upstream[stage] = _digest(entry["artifacts"])
            _write_json(out / "manifest.json", manifest)
    return result


def orphans(out):
    """Files under ``out`` that the manifest does not account for."""
    out = Path(out)
    manifest = load_manifest(out) or {"stages": {}}
    known = {"manifest.json", "config.json"}
    for entry in manifest["stages"].values():
        known.update(entry["artifacts"])
    return sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and str(p.relative_to(out)) not in known)


# -- sweeps --------------------------------------------------------------------

EPS_GRID = (4, 8, 16, 32)
FACTOR_GRID = (10, 30, 50, 100)


def eps_sweep_config(config, values=EPS_GRID):
    """Replicate every budgeted attack once per eps; defenses are dropped."""
    cfg = copy.deepcopy(config)
    attacks = []
    for eps in values:
        for entry in config["attacks"]:
            if entry["kind"] != "csema":
                attacks.append({**entry, "eps": int(eps)})
    cfg["attacks"] = attacks
    cfg["defenses"] = []
    cfg["sweep"] = {"param": "eps", "values": [int(v) for v in values]}
    return cfg


def factors_config(config, factors):
    cfg = copy.deepcopy(config)
    for name, section in cfg["models"]["rankers"].items():
        if name != "simrank":
            section["factors"] = int(factors)
    cfg["defenses"] = []
    return cfg


def run_sweep(config, param, values=None, out=None, resume=False, threads=None):
    """ε: one pipeline, one report per value. factors: one pipeline per value.

    Returns (summary table, list of PipelineResult).
    """
    out = Path(out or config.get("out", "runs/sweep"))
    if param == "eps":
        values = values or EPS_GRID
        res = run_pipeline(eps_sweep_config(config, values), out, resume, threads)
        table = {}
        for eps in values:
            doc = json.loads((out / "reports" / f"eps_{eps}.json").read_text())
            table[str(eps)] = {f"{s['ranker']}/{s['attack']}": s["delta_HR"] for s in doc["summaries"]}
        _write_json(out / "reports" / "sweep_eps.json", table)
        res.manifest["stages"]["eval"]["artifacts"]["reports/sweep_eps.json"] = sha256_file(out / "reports" / "sweep_eps.json")
        _write_json(out / "manifest.json", res.manifest)
        return table, [res]
    if param == "factors":
        values = values or FACTOR_GRID
        table, results, subs = {}, [], {}
        out.mkdir(parents=True, exist_ok=True)
        for f in values:
            sub = out / f"factors_{f}"
            res = run_pipeline(factors_config(config, f), sub, resume, threads)
            doc = json.loads(res.report_path.read_text())
            table[str(f)] = {f"{s['ranker']}/{s['attack']}": s["delta_HR"] for s in doc["summaries"]}
            subs[str(f)] = {"manifest": f"factors_{f}/manifest.json",
                            "sha256": sha256_file(sub / "manifest.json")}
            results.append(res)
        _write_json(out / "sweep_factors.json", table)
        _write_json(out / "manifest.json", {"version": __version__, "param": "factors", "runs": subs,
                                            "summary": {"sweep_factors.json": sha256_file(out / "sweep_factors.json")}})
        return table, results
    raise ValueError(f"unknown sweep parameter {param!r}")
