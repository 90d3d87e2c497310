"""Desk-scale run: every ranker against INSA, EXPA, FGSM, PGD and c-SEMA, then the defense sweep.

    python3 scripts/desk_experiment.py --out runs/desk
"""
import argparse
import json

from aip.config import desk_config
from aip.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--all-rankers-defended", action="store_true", help="sweep defenses on every ranker")
    ap.add_argument("--resume", action="store_true")
    args = ap.parse_args()

    cfg = desk_config(args.out, args.seed)
    if args.all_rankers_defended:
        for entry in cfg["defenses"]:
            entry.pop("rankers", None)
    res = run_pipeline(cfg, args.out, resume=args.resume)
    doc = json.loads(res.report_path.read_text())

    print(f"{'ranker':>8} {'attack':<14} {'coop':>7} {'adv':>7} {'dHR':>8} {'p':>9} {'test coop':>9} {'test adv':>9}")
    for s in doc["summaries"]:
        p = "-" if s["integrity_p"] is None else f"{s['integrity_p']:.1e}"
        print(f"{s['ranker']:>8} {s['attack']:<14} {s['HR@5_cooperative']:7.4f} {s['HR@5_adversarial']:7.4f} "
              f"{s['delta_HR']:+8.4f} {p:>9} {s['test_HR@5_cooperative']:9.4f} {s['test_HR@5_adversarial']:9.4f}")
    for key, level in sorted(doc.get("defense_sweep", {}).items()):
        print(f"defense {key}: {level}")
    print(f"report: {res.report_path}")


if __name__ == "__main__":
    main()
