"""Write a popularity-skewed synthetic log in MovieLens ``ratings.dat`` or TSV layout.

    python scripts/make_surrogate.py out/ratings.dat --users 6040 --items 3700 --mean-len 165
"""

from __future__ import annotations

import argparse
from pathlib import Path

from popsteer.surrogate import SurrogateConfig, generate_log


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("path", type=Path)
    ap.add_argument("--users", type=int, default=1000)
    ap.add_argument("--items", type=int, default=400)
    ap.add_argument("--genres", type=int, default=8)
    ap.add_argument("--mean-len", type=int, default=60)
    ap.add_argument("--zipf", type=float, default=1.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--format", choices=("ml1m", "tsv"), default="ml1m")
    args = ap.parse_args(argv)
    lg = generate_log(SurrogateConfig(n_users=args.users, n_items=args.items, n_genres=args.genres,
                                      mean_len=args.mean_len, zipf=args.zipf, seed=args.seed))
    args.path.parent.mkdir(parents=True, exist_ok=True)
    sep = "::" if args.format == "ml1m" else "\t"
    with open(args.path, "w") as fh:
        for u, i, t in zip(lg.users, lg.items, lg.timestamps):
            row = [lg.user_ids[u].lstrip("u"), lg.item_ids[i].lstrip("i")]
            row += ["4", str(t)] if args.format == "ml1m" else [str(t)]
            fh.write(sep.join(row) + "\n")
    print(f"wrote {len(lg.users)} interactions for {len(lg.user_ids)} users to {args.path}")


if __name__ == "__main__":
    main()
