"""INSA/EXPA/classifier-targeted lift over eps in {4, 8, 16, 32} (one pipeline, one report per eps)."""
import argparse

from aip.config import desk_config
from aip.pipeline import EPS_GRID, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/eps")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--values", default=",".join(map(str, EPS_GRID)))
    ap.add_argument("--insa-only", action="store_true")
    args = ap.parse_args()

    cfg = desk_config(args.out, args.seed)
    if args.insa_only:
        cfg["attacks"] = [a for a in cfg["attacks"] if a["kind"] == "insa"]
    values = [int(v) for v in args.values.split(",")]
    table, _ = run_sweep(cfg, "eps", values, args.out)

    keys = sorted({k for row in table.values() for k in row if not k.endswith("/none")})
    print(f"{'ranker/attack':<26}" + "".join(f"{'eps ' + str(v):>10}" for v in values))
    for key in sorted({k.rsplit("_eps", 1)[0] for k in keys}):
        cells = [table[str(v)].get(f"{key}_eps{v}") for v in values]
        print(f"{key:<26}" + "".join(f"{c:+10.4f}" if c is not None else f"{'-':>10}" for c in cells))


if __name__ == "__main__":
    main()
