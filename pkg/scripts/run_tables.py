"""Run a set of catalog experiments and write their summary tables.

    python scripts/run_tables.py --experiments 1-4 --n 1000 2000 --reps 1000 --out results/
"""
import argparse
import time
from pathlib import Path

from proxidc.simulation import experiment_config, format_summary_table, run_experiment


def id_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi or lo) + 1))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--experiments", type=id_list, default=id_list("1-12"))
    ap.add_argument("--n", type=int, nargs="+", default=[1000])
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20240611)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    blocks = []
    for n in args.n:
        for exp in args.experiments:
            t0 = time.perf_counter()
            res = run_experiment(experiment_config(exp, n=n, reps=args.reps, base_seed=args.seed),
                                 threads=args.threads)
            table = format_summary_table(res)
            blocks.append(table)
            print(table, f"\n({time.perf_counter() - t0:.1f}s)\n", flush=True)
    (args.out / "tables.txt").write_text("\n\n".join(blocks) + "\n")


if __name__ == "__main__":
    main()
