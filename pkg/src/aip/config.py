"""Experiment configuration: one JSON document, validated all at once."""
from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from aip.attacks import KINDS as ATTACK_KINDS
from aip.defenses import LEVELS as DEFENSE_LEVELS
from aip.errors import ValidationError

RANKERS = ("simrank", "vbpr", "dvbpr", "amr")
SYNTH_KEYS = {"n_users", "n_items", "n_cold", "latent_dim", "n_clusters", "interactions_per_user",
              "image_shape", "skew", "affinity", "appeal_noise"}
TRAIN_KEYS = {"factors", "lr", "reg", "epochs", "batch_size", "optimizer", "adv_weight", "adv_eps"}
EXTRACTOR_KEYS = {"out_dim", "epochs", "lr", "batch_size"}
ATTACK_KEYS = {"kind", "eps", "iters", "step", "hook", "target", "user_batch", "optimizer", "rankers"}
REQUIRED = ("dataset", "models", "attacks", "eval", "seed")


def desk_config(out="runs/desk", seed=0):
    """Desk-scale default: four rankers over BPR candidates, attacked five ways."""
    return {
        "seed": seed,
        "out": out,
        "dataset": {"synth": {"n_users": 200, "n_items": 500, "n_cold": 50}},
        "models": {
            "bpr": {"factors": 16, "epochs": 20},
            "extractor": {"out_dim": 64, "epochs": 8},
            "rankers": {"simrank": {}, "vbpr": {}, "dvbpr": {"factors": 64, "epochs": 15},
                        "amr": {"adv_weight": 1.0}},
        },
        "attacks": [
            {"kind": "insa", "eps": 32, "iters": 30, "step": 0.01},
            {"kind": "expa", "eps": 32, "iters": 100, "step": 0.01, "hook": "auto"},
            {"kind": "pgd", "eps": 32, "iters": 20, "target": "auto"},
            {"kind": "fgsm", "eps": 32, "iters": 1, "target": "auto"},
            {"kind": "csema", "hook": "auto"},
        ],
        "defenses": [{"kind": "jpeg", "attacks": ["expa", "insa"], "rankers": ["dvbpr"]},
                     {"kind": "bitdepth", "attacks": ["expa", "insa"], "rankers": ["dvbpr"]}],
        "eval": {"k": 100, "n": 5, "n_cold": 50},
    }


def _unknown(section, keys, allowed):
    return [f"{section}: unknown key {k!r}" for k in sorted(set(keys) - allowed)]


def _positive_int(errors, where, value):
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        errors.append(f"{where} must be a positive integer, got {value!r}")


def collect_errors(doc):
    """Every violated invariant of ``doc`` (not just the first)."""
    if not isinstance(doc, dict):
        return ["config must be a JSON object"]
    errors = [f"missing required section {name!r}" for name in REQUIRED if name not in doc]

    ds = doc.get("dataset")
    if ds is not None:
        if not isinstance(ds, dict) or ("synth" in ds) == ("path" in ds):
            errors.append("dataset: give exactly one of 'synth' or 'path'")
        elif "path" in ds:
            if not (Path(ds["path"]) / "manifest.json").exists():
                errors.append(f"dataset: path {ds['path']!r} has no manifest.json")
        else:
            errors += _unknown("dataset.synth", ds["synth"], SYNTH_KEYS)
            for key in ("n_users", "n_items", "interactions_per_user"):
                if key in ds["synth"]:
                    _positive_int(errors, f"dataset.synth.{key}", ds["synth"][key])

    models = doc.get("models")
    if models is not None:
        if not isinstance(models, dict):
            errors.append("models must be an object")
        else:
            errors += _unknown("models", models, {"bpr", "extractor", "rankers"})
            errors += _unknown("models.bpr", models.get("bpr", {}), TRAIN_KEYS)
            errors += _unknown("models.extractor", models.get("extractor", {}), EXTRACTOR_KEYS)
            rankers = models.get("rankers", {})
            if not rankers:
                errors.append("models.rankers: at least one ranker is required")
            for name, section in rankers.items():
                if name not in RANKERS:
                    errors.append(f"models.rankers: unknown ranker {name!r}")
                else:
                    errors += _unknown(f"models.rankers.{name}", section, TRAIN_KEYS)
                    if "factors" in section:
                        _positive_int(errors, f"models.rankers.{name}.factors", section["factors"])

    attacks = doc.get("attacks")
    if attacks is not None:
        if not isinstance(attacks, list) or not attacks:
            errors.append("attacks must be a non-empty list")
        else:
            for pos, att in enumerate(attacks):
                where = f"attacks[{pos}]"
                errors += _unknown(where, att, ATTACK_KEYS)
                kind = att.get("kind")
                if kind not in ATTACK_KINDS:
                    errors.append(f"{where}: unknown kind {kind!r}")
                    continue
                if kind != "csema":
                    eps = att.get("eps", 32)
                    if not isinstance(eps, int) or not 1 <= eps <= 255:
                        errors.append(f"{where}: eps must be an integer in [1, 255], got {eps!r}")
                    _positive_int(errors, f"{where}.iters", att.get("iters", 1))
                if kind in ("expa", "csema") and att.get("hook") is None:
                    errors.append(f"{where}: {kind} requires a hook item id (or 'auto')")
                if kind in ("fgsm", "pgd") and att.get("target") is None:
                    errors.append(f"{where}: {kind} requires a target class (or 'auto')")

    for pos, d in enumerate(doc.get("defenses") or []):
        if d.get("kind") not in DEFENSE_LEVELS:
            errors.append(f"defenses[{pos}]: unknown kind {d.get('kind')!r}")
        elif "level" in d and d["level"] not in DEFENSE_LEVELS[d["kind"]]:
            errors.append(f"defenses[{pos}]: level {d['level']} not in {DEFENSE_LEVELS[d['kind']]}")

    ev = doc.get("eval")
    if ev is not None:
        errors += _unknown("eval", ev, {"k", "n", "n_cold", "defend_all"})
        for key in ("n",):
            _positive_int(errors, f"eval.{key}", ev.get(key, 5))
        if not isinstance(ev.get("k", 100), int) or ev.get("k", 100) < 0:
            errors.append("eval.k must be a non-negative integer")
        if not isinstance(ev.get("n_cold", 50), int) or ev.get("n_cold", 50) < 2:
            errors.append("eval.n_cold must be an integer >= 2 (paired tests need two items)")

    if "seed" in doc and (not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool)):
        errors.append(f"seed must be an integer, got {doc['seed']!r}")
    return errors


def validate(doc):
    """Return a normalized deep copy of ``doc`` or raise ValidationError listing every problem."""
    errors = collect_errors(doc)
    if errors:
        raise ValidationError(errors)
    out = copy.deepcopy(doc)
    if os.environ.get("AIP_SEED"):
        out["seed"] = int(os.environ["AIP_SEED"])
    out.setdefault("defenses", [])
    out.setdefault("out", "runs/experiment")
    return out


def load_config(path):
    return json.loads(Path(path).read_text())


def dump_config(doc):
    return json.dumps(doc, indent=1, sort_keys=True)
