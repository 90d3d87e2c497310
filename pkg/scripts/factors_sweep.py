"""Attack lift against embedding length: one full pipeline per factor count."""
import argparse

from aip.config import desk_config
from aip.pipeline import FACTOR_GRID, run_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/factors")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--values", default=",".join(map(str, FACTOR_GRID)))
    args = ap.parse_args()

    cfg = desk_config(args.out, args.seed)
    cfg["attacks"] = [a for a in cfg["attacks"] if a["kind"] in ("insa", "expa")]
    values = [int(v) for v in args.values.split(",")]
    table, _ = run_sweep(cfg, "factors", values, args.out)

    keys = sorted({k for row in table.values() for k in row if not k.endswith("/none")})
    print(f"{'ranker/attack':<26}" + "".join(f"{'F=' + str(v):>10}" for v in values))
    for key in keys:
        print(f"{key:<26}" + "".join(f"{table[str(v)][key]:+10.4f}" for v in values))


if __name__ == "__main__":
    main()
