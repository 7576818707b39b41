"""Regenerate the bundled synthetic two-trial CSV fixtures under tests/fixtures/."""
import argparse
from pathlib import Path

from proxidc.data import write_dataset
from proxidc.simulation import FixtureParams, experiment_config, generate_fixture

SCHEMA = """# column mapping for the synthetic fixtures
s = s
a = a
delta = delta
y = y
x = x_
w = w_
z = z_
categorical = x_site
"""


def write_pair(ds, out: Path, stem: str) -> None:
    src = ds.subset(ds.source)
    tgt = ds.subset(ds.target).with_(z=None)  # z is not collected in the target trial
    write_dataset(src, out / f"{stem}_source.csv")
    write_dataset(tgt, out / f"{stem}_target.csv")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests" / "fixtures")
    ap.add_argument("--n", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    write_pair(generate_fixture(FixtureParams(), args.n, args.seed), args.out, "shift")
    # no unmeasured effect modifier: U is identically zero
    noshift = FixtureParams(dgp=experiment_config(11).dgp)
    write_pair(generate_fixture(noshift, args.n, args.seed), args.out, "noshift")
    (args.out / "schema.txt").write_text(SCHEMA)
    print(f"fixtures written to {args.out}")


if __name__ == "__main__":
    main()
