"""Command-line entry point: ``aip <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from aip.attacks import KINDS, AttackConfig, classifier_targeted, csema, default_pgd_step, expa, insa, linf_8bit
from aip.config import load_config, desk_config, validate
from aip.data import SynthConfig, load_dataset, load_image, make_dataset, save_dataset, save_image
from aip.defenses import LEVELS, apply_defense
from aip.diffcore import load_extractor
from aip.errors import AIPError, ValidationError
from aip.pipeline import (EPS_GRID, FACTOR_GRID, RANKER_DEFAULTS, run_pipeline, run_sweep,
                          sha256_file, thread_cap)
from aip.recommenders import (BPR_DEFAULTS, auc_leave_one_out, bpr_train, build_simrank, dvbpr_train, load_model,
                              pretrain_extractor, save_model, vbpr_train)

MODEL_KINDS = ("bpr", "classifier", "simrank", "vbpr", "amr", "dvbpr")


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _add_common(p, out_help):
    p.add_argument("--out", required=True, type=Path, help=out_help)
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="aip", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", type=Path, help="experiment config; its dataset.synth section is used")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--cold", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, "dataset directory (manifest.json + images/)")

    p = sub.add_parser("train", help="train one model and write a .rec checkpoint")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--kind", required=True, choices=MODEL_KINDS)
    p.add_argument("--extractor", type=Path, help=".rec (classifier or visual model) or .fex supplying features")
    p.add_argument("--factors", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--reg", type=float)
    p.add_argument("--adv-weight", type=float, help="AMR lambda_adv")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, "output .rec path")

    p = sub.add_parser("attack", help="perturb one image; writes <out> and <out>.json")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.add_argument("--model", required=True, type=Path, help=".rec of the attacked ranker (classifier for fgsm/pgd)")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--eps", type=int, default=32, help="L-inf budget in 8-bit units, 1..255")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--step", type=float, help="step size (pgd default 2.5*eps/255/iters)")
    p.add_argument("--hook", type=int, help="hook item id (expa, csema); needs --dataset")
    p.add_argument("--target", type=int, help="target class (fgsm, pgd)")
    p.add_argument("--dataset", type=Path, help="dataset directory used to look up the hook image")
    _add_common(p, "output PNG")

    p = sub.add_parser("defend", help="apply an input transformation to every PNG in a directory")
    p.add_argument("--kind", required=True, choices=sorted(LEVELS))
    p.add_argument("--level", required=True, type=int, help="JPEG quality or bit depth")
    p.add_argument("--in", dest="inp", metavar="IN", required=True, type=Path)
    _add_common(p, "output directory")

    p = sub.add_parser("eval", help="evaluate a config, reusing completed stages")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--n", type=int, help="override eval.n (HR@N)")
    p.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("run", help="full pipeline: data, train, attack, defend, eval")
    p.add_argument("--config", type=Path, help="experiment config (default: desk config)")
    p.add_argument("--resume", action="store_true", help="skip stages whose hashes match the manifest")
    _add_common(p, "output directory")

    p = sub.add_parser("sweep", help="eps or embedding-length sweep")
    p.add_argument("--param", required=True, choices=("eps", "factors"))
    p.add_argument("--values", type=_ints, help=f"comma list (default eps {EPS_GRID}, factors {FACTOR_GRID})")
    p.add_argument("--config", type=Path)
    p.add_argument("--resume", action="store_true")
    _add_common(p, "output directory")

    parser.epilog = "subcommands:\n" + "\n".join(
        "  " + sp.format_usage().replace("usage: ", "").strip() for sp in sub.choices.values())
    parser.formatter_class = argparse.RawDescriptionHelpFormatter
    return parser


def _config(path):
    return load_config(path) if path else desk_config()


def cmd_gen_data(args):
    if args.config:
        cfg = validate(load_config(args.config))
        synth = SynthConfig(**{**cfg["dataset"]["synth"], "seed": cfg["seed"]})
    else:
        synth = SynthConfig(n_users=args.users, n_items=args.items, n_cold=args.cold, seed=args.seed)
    synth.check()
    ds = make_dataset(synth, n_cold=synth.n_cold, seed=synth.seed)
    save_dataset(ds, args.out, synth)
    print(f"wrote {ds.n_users} users, {ds.n_items} items, {len(ds.cold_items)} cold to {args.out}")


def _features_from(path):
    if path.suffix == ".fex":
        return load_extractor(path)
    return load_model(path).extractor


def cmd_train(args):
    ds = load_dataset(args.dataset)
    overrides = {k: v for k, v in {"factors": args.factors, "epochs": args.epochs, "lr": args.lr, "reg": args.reg,
                                   "adv_weight": args.adv_weight}.items() if v is not None}
    if args.kind == "bpr":
        model = bpr_train(ds, replace(BPR_DEFAULTS, **overrides, seed=args.seed))
        print(f"leave-one-out AUC {auc_leave_one_out(model, ds):.4f}")
    elif args.kind == "classifier":
        _, model = pretrain_extractor(ds, seed=args.seed, **({"epochs": args.epochs} if args.epochs else {}))
    elif args.kind == "dvbpr":
        model = dvbpr_train(ds, replace(RANKER_DEFAULTS["dvbpr"], **overrides, seed=args.seed))
    else:
        extractor = _features_from(args.extractor) if args.extractor else pretrain_extractor(ds, seed=args.seed)[0]
        if args.kind == "simrank":
            model = build_simrank(extractor, ds)
        else:
            model = vbpr_train(ds, extractor, replace(RANKER_DEFAULTS[args.kind], **overrides, seed=args.seed),
                               kind=args.kind)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    print(f"wrote {args.kind} checkpoint to {args.out}")


def cmd_attack(args):
    model = load_model(args.model)
    image = load_image(args.image)
    hook_image = None
    if args.kind in ("expa", "csema"):
        if args.hook is None or args.dataset is None:
            raise ValidationError([f"{args.kind} needs --hook and --dataset"])
        hook_image = load_dataset(args.dataset).images[args.hook]
    cfg = AttackConfig(kind=args.kind, eps=args.eps, iters=args.iters, step=0.01 if args.step is None else args.step,
                       hook=args.hook if args.kind in ("expa", "csema") else None,
                       target=args.target if args.kind in ("fgsm", "pgd") else None)
    if args.kind == "pgd" and args.step is None and args.target is not None:
        cfg = replace(cfg, step=default_pgd_step(cfg))
    cfg.check()
    if args.kind == "insa":
        result = insa(model, image, cfg)
    elif args.kind == "expa":
        result = expa(model.extractor, image, hook_image, cfg)
    elif args.kind == "csema":
        out = csema(image, hook_image)
        result = None
    else:
        result = classifier_targeted(image, model, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if result is None:
        save_image(out, args.out)
        sidecar = {"trace": [], "linf": linf_8bit(out, image) / 255.0, "linf_8bit": linf_8bit(out, image),
                   "wall_time": 0.0}
    else:
        save_image(result.image, args.out)
        sidecar = result.to_json()
    sidecar["kind"] = args.kind
    Path(f"{args.out}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    print(f"wrote {args.out} (L-inf {sidecar['linf_8bit']}/255)")


def cmd_defend(args):
    if args.level not in LEVELS[args.kind]:
        print(f"note: level {args.level} is outside the sweep menu {LEVELS[args.kind]}", file=sys.stderr)
    args.out.mkdir(parents=True, exist_ok=True)
    files = {}
    for path in sorted(args.inp.glob("*.png")):
        target = args.out / path.name
        save_image(apply_defense(load_image(path), args.kind, args.level), target)
        files[path.name] = sha256_file(target)
    manifest = {"kind": args.kind, "level": args.level, "source": str(args.inp), "artifacts": files}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"defended {len(files)} images into {args.out}")


def _print_summaries(report_path):
    doc = json.loads(Path(report_path).read_text())
    for s in doc["summaries"]:
        n = next(k for k in s if k.startswith("HR@") and k.endswith("_cooperative")).split("_")[0]
        p = s["integrity_p"]
        print(f"{s['ranker']:>8} {s['attack']:<22} {n} {s[n + '_cooperative']:.4f} -> {s[n + '_adversarial']:.4f}"
              f"  p={'n/a' if p is None else f'{p:.2e}'}")
    for key, level in doc.get("defense_sweep", {}).items():
        print(f"defense {key}: weakest neutralizing level = {level}")


def cmd_eval(args):
    cfg = load_config(args.config)
    if args.n is not None:
        cfg.setdefault("eval", {})["n"] = args.n
    res = run_pipeline(cfg, args.out, resume=True, threads=args.threads)
    _print_summaries(res.report_path)


def cmd_run(args):
    res = run_pipeline(_config(args.config), args.out, resume=args.resume, threads=args.threads)
    print(f"executed {res.executed or 'nothing'}; skipped {res.skipped or 'nothing'}")
    _print_summaries(res.report_path)


def cmd_sweep(args):
    table, _ = run_sweep(_config(args.config), args.param, args.values, args.out, args.resume, args.threads)
    print(json.dumps(table, indent=1, sort_keys=True))


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack, "defend": cmd_defend,
            "eval": cmd_eval, "run": cmd_run, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with thread_cap(getattr(args, "threads", None)):
            COMMANDS[args.command](args)
    except ValidationError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except AIPError as exc:
        stage = getattr(exc, "stage", None)
        where = f" (stage {stage}; see manifest.json)" if stage else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
