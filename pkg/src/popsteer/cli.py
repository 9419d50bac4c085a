"""Command-line pipeline: prepare, train-rec, train-sae, gen-synth, analyze, steer, evaluate, grid, ablate.

Every artifact lives under the output root (``--out``, ``out=`` in the config
file, or ``$POPSTEER_OUT``) in a path keyed by the hash of everything it
depends on. Existing artifacts are reused, never rewritten. Metric rows go to
the append-only ``results.csv``.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import fcntl
import itertools
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import encoder as E
from . import io as pio
from . import sae as S
from .config import ConfigError, RunConfig, derive_seed, load_config
from .neuronlab import NeuronProfile
from .pipeline import Evaluator, analyze
from .steer import SteeringConfig, compute_plan, steer_hidden
from .synthgen import SIDES, dump_profiles, generate_profiles

log = logging.getLogger("popsteer")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

RESULT_COLUMNS = (
    "row_hash", "analysis", "method", "alpha_pop", "alpha_unpop", "beta", "xi", "t", "ipr_alpha", "seed",
    "ndcg", "ndcg_head", "ndcg_tail", "item_coverage", "gini", "seconds",
)


def fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    tmp.replace(path)


# ------------------------------------------------------------------ artifact paths


class Workspace:
    """Resolves the hash-keyed location of every artifact for one RunConfig."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.out_dir
        self.root.mkdir(parents=True, exist_ok=True)

    def _dir(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def data_key(self) -> str:
        src = self.cfg.data.path
        if not src or not Path(src).is_file():
            raise FileNotFoundError(f"dataset file not found: {src!r}")
        return pio.config_hash({
            "data": dataclasses.asdict(self.cfg.data) | {"path": None},
            "digest": pio.file_digest(src),
            "seed": derive_seed(self.cfg.seed, "subsample"),
        })

    @property
    def encoder_key(self) -> str:
        return pio.config_hash({"data": self.data_key, "encoder": dataclasses.asdict(self.cfg.encoder)})

    @property
    def sae_key(self) -> str:
        return pio.config_hash({"encoder": self.encoder_key, "sae": dataclasses.asdict(self.cfg.sae)})

    @property
    def synth_seed(self) -> int:
        return derive_seed(self.cfg.seed, "synth")

    @property
    def analysis_key(self) -> str:
        return pio.config_hash({
            "sae": self.sae_key,
            "synth": dataclasses.asdict(self.cfg.synth),
            "M": self.cfg.synth_len,
            "seed": self.synth_seed,
            "k": self.cfg.k,
            "k_prime": self.cfg.grid.k_prime,
        })

    def prepared(self) -> Path:
        return self._dir("prepared") / f"{self.data_key}.npz"

    def encoder(self) -> Path:
        return self._dir("encoder") / f"{self.encoder_key}.npz"

    def sae(self) -> Path:
        return self._dir("sae") / f"{self.sae_key}.npz"

    def analysis(self) -> Path:
        return self._dir("analysis") / self.analysis_key

    @property
    def results(self) -> Path:
        return self.root / "results.csv"


def _require(path: Path, what: str, cmd: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run `popsteer {cmd}` first")
    return path


# ------------------------------------------------------------------ commands


def _load_raw(cfg: RunConfig) -> D.InteractionLog:
    if not 0 < cfg.data.user_fraction <= 1:
        raise ConfigError("data.user_fraction must lie in (0, 1]")
    lg = D.load_interactions(cfg.data.path, D.ColumnSpec.parse(cfg.data.format))
    return D.subsample_users(lg, cfg.data.user_fraction, derive_seed(cfg.seed, "subsample"))


def cmd_prepare(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    path = ws.prepared()
    lg = D.k_core_filter(_load_raw(cfg), cfg.data.user_min, cfg.data.item_min)
    stats = D.dataset_stats(lg)
    print(f"users {stats['users']}  items {stats['items']}  interactions {stats['interactions']}  "
          f"density {100 * stats['density']:.2f}%")
    if path.exists():
        print(f"prepared dataset exists: {path}")
        return EXIT_OK
    split = D.leave_one_out_split(lg)
    part = D.popularity_partition(split, cfg.data.head_frac, cfg.data.tail_frac)
    D.save_prepared(path, split, part, {"stats": stats})
    write_csv(path.with_suffix(".stats.csv"), ("users", "items", "interactions", "density"),
              [[stats["users"], stats["items"], stats["interactions"], stats["density"]]])
    print(f"wrote {path}")
    return EXIT_OK


def _prepared(ws: Workspace):
    return D.load_prepared(_require(ws.prepared(), "prepared dataset", "prepare"))


def cmd_train_rec(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    path = ws.encoder()
    if path.exists():
        print(f"encoder checkpoint exists: {path}")
        return EXIT_OK
    split, _, _ = _prepared(ws)
    state = path.with_suffix(".state.npz")
    params, hist = E.train_encoder(split, cfg.encoder, state_path=state, resume=args.resume)
    pio.save_encoder(path, params)
    hist.to_csv(path.with_suffix(".history.csv"))
    state.unlink(missing_ok=True)
    best = max(hist.val_ndcg) if hist.val_ndcg else float("nan")
    print(f"best epoch {hist.best_epoch}  val nDCG@{cfg.encoder.eval_k} {best:.4f}  ({hist.seconds:.1f}s)")
    print(f"wrote {path}")
    return EXIT_OK


def _encoder(ws: Workspace):
    return pio.load_encoder(_require(ws.encoder(), "encoder checkpoint", "train-rec"))


def _sae(ws: Workspace):
    return pio.load_sae(_require(ws.sae(), "SAE checkpoint", "train-sae"))


def cmd_train_sae(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    path = ws.sae()
    if path.exists():
        print(f"SAE checkpoint exists: {path}")
        return EXIT_OK
    split, part, _ = _prepared(ws)
    enc = _encoder(ws)
    X = E.encode_batch(enc, list(split.train))
    params, report = S.train_sae(X, cfg.sae)
    pio.save_sae(path, params)
    report.to_csv(path.with_suffix(".losses.csv"))
    ev = Evaluator(split, part, enc, params, k=cfg.k)
    fid = S.reconstruction_report(params, ev.X, ev.item_table, ev.histories, ev.targets, cfg.k)
    fd = fid.as_dict()
    write_csv(path.with_suffix(".fidelity.csv"), list(fd), [list(fd.values())])
    print(f"dead neurons {report.n_dead} / {params.n_hidden}")
    print(f"cosine mean {fid.cosine_mean:.4f}  nDCG@{cfg.k} orig {fid.ndcg_orig:.4f} recon {fid.ndcg_recon:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_gen_synth(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    _, part, _ = _prepared(ws)
    n = args.count or cfg.synth.n_prime
    out = ws._dir("synth")
    for side in SIDES:
        path = out / f"{ws.data_key}-{side}-{n}-{cfg.synth_len}-{ws.synth_seed}.txt"
        if path.exists():
            print(f"exists: {path}")
            continue
        prof = generate_profiles(part, side, n, cfg.synth_len, ws.synth_seed, cfg.synth.epoch_size)
        dump_profiles(path, prof)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    out = ws.analysis()
    if (out / "profile.csv").exists():
        print(f"analysis exists: {out}")
        return EXIT_OK
    split, part, _ = _prepared(ws)
    enc, sae = _encoder(ws), _sae(ws)
    res = analyze(split, part, enc, sae, cfg.synth.n_prime, cfg.synth_len, ws.synth_seed,
                  K_prime=cfg.grid.k_prime, k=cfg.k)
    tmp = out.with_name(out.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    nr = res.normality
    write_csv(tmp / "normality.csv", ("pct_skew_ok", "pct_kurt_ok"), [[nr.pct_skew_ok, nr.pct_kurt_ok]])
    write_csv(tmp / "neuron_moments.csv", ("neuron_id", "skewness", "excess_kurtosis"),
              [[j, s, k] for j, (s, k) in enumerate(zip(nr.skewness, nr.excess_kurtosis))])
    write_csv(tmp / "top_activators.csv",
              ("kind", "neuron_id", "d", "mean_h_top", "h_min", "h_q1", "h_median", "h_q3", "h_max", "top_users"),
              [[kind, r.neuron_id, res.profile.d[r.neuron_id], r.mean_h_top, r.h_min, r.h_q1, r.h_median, r.h_q3,
                r.h_max, " ".join(split.user_ids[split.users[u]] for u in r.top_users)]
               for kind, r in (("max_d", res.top_pos), ("min_d", res.top_neg))])
    for sign, curve in res.curves.items():
        cols = ("k_prime", "gini", "ndcg", "ndcg_head", "ndcg_tail", "item_coverage")
        write_csv(tmp / f"manipulation_{sign}.csv", cols, [[r.get(c) for c in cols] for r in curve])
    res.profile.to_csv(tmp / "profile.csv")
    tmp.replace(out)
    d = res.profile.d
    print(f"neurons {len(d)}  d>1: {int((d > 1).sum())}  d<-1: {int((d < -1).sum())}")
    print(f"normality: skew ok {nr.pct_skew_ok:.4f}  kurtosis ok {nr.pct_kurt_ok:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _profile(ws: Workspace) -> NeuronProfile:
    return NeuronProfile.from_csv(_require(ws.analysis() / "profile.csv", "neuron profile", "analyze"))


def cmd_steer(cfg: RunConfig, args) -> int:
    """Writes the steering plan and the steered top-k lists for every test user."""
    ws = Workspace(cfg)
    key = pio.config_hash({"analysis": ws.analysis_key, "steer": dataclasses.asdict(cfg.steer)})
    out = ws._dir("steer") / key
    if out.exists():
        print(f"steering output exists: {out}")
        return EXIT_OK
    split, part, _ = _prepared(ws)
    enc, sae, profile = _encoder(ws), _sae(ws), _profile(ws)
    plan = compute_plan(profile.d, profile.std_real, cfg.steer)
    ev = Evaluator(split, part, enc, sae, profile, k=cfg.k)
    lists = ev.lists_from_hidden(steer_hidden(ev.Z, plan))
    rep = ev.report(lists)
    tmp = out.with_name(out.name + ".tmp")
    tmp.mkdir(parents=True, exist_ok=True)
    plan.to_csv(tmp / "plan.csv")
    write_csv(tmp / "lists.csv", ("user_id", "rank", "item_id"),
              ([split.user_ids[split.users[u]], r + 1, split.item_ids[i]]
               for u, l in enumerate(lists) for r, i in enumerate(l)))
    write_csv(tmp / "metrics.csv", list(rep.as_dict()), [list(rep.as_dict().values())])
    tmp.replace(out)
    print(f"steered neurons {len(plan.steered)}  " + _report_line(rep))
    print(f"wrote {out}")
    return EXIT_OK


def _report_line(rep) -> str:
    return "  ".join(f"{k} {fmt(v)}" for k, v in rep.as_dict().items())


# ------------------------------------------------------------------ results store


@contextlib.contextmanager
def _locked(path: Path):
    with open(path, "a+", newline="") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield fh
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def read_results(path: Path) -> dict:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["row_hash"]: row for row in csv.DictReader(fh)}


def append_result(path: Path, row: dict) -> bool:
    """Appends ``row`` unless its hash is already present; returns whether it was written."""
    with _locked(path) as fh:
        fh.seek(0)
        existing = {r["row_hash"] for r in csv.DictReader(fh)}
        if row["row_hash"] in existing:
            return False
        fh.seek(0, 2)
        w = csv.writer(fh, lineterminator="\n")
        if fh.tell() == 0:
            w.writerow(RESULT_COLUMNS)
        w.writerow([fmt(row.get(c)) for c in RESULT_COLUMNS])
        fh.flush()
    return True


class Runner:
    """Evaluates (method, hyperparameter) configurations, skipping rows already on disk."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.ws = Workspace(cfg)
        self.analysis = self.ws.analysis_key
        self.done = read_results(self.ws.results)
        self._ev = None

    @property
    def ev(self) -> Evaluator:
        if self._ev is None:
            ws = self.ws
            split, part, _ = _prepared(ws)
            enc = _encoder(ws)
            sae = _sae(ws) if ws.sae().exists() else None
            prof = _profile(ws) if (ws.analysis() / "profile.csv").exists() else None
            self._ev = Evaluator(split, part, enc, sae, prof, k=self.cfg.k)
        return self._ev

    def row_hash(self, method: str, hp: dict) -> str:
        return pio.config_hash({"analysis": self.analysis, "method": method, "hp": hp})

    def run(self, method: str, hp: dict) -> dict:
        h = self.row_hash(method, hp)
        if h in self.done:
            return self.done[h]
        if method in ("sae", "popsteer", "noise", "randomselect") and self.ev.sae is None:
            _require(self.ws.sae(), "SAE checkpoint", "train-sae")
        if method in ("popsteer", "noise", "randomselect") and self.ev.profile is None:
            _require(self.ws.analysis() / "profile.csv", "neuron profile", "analyze")
        call = dict(hp)
        if method == "ipr":
            call["alpha"] = call.pop("ipr_alpha")
        if method == "noise":
            # xi is given in units of the median real-user activation std
            call["xi"] = hp["xi"] * float(np.median(self.ev.profile.std_real))
        rep, seconds = self.ev.run(method, **call)
        row = {"row_hash": h, "analysis": self.analysis, "method": method, **hp, **rep.as_dict(),
               "seconds": seconds}
        append_result(self.ws.results, row)
        self.done[h] = {c: fmt(row.get(c)) for c in RESULT_COLUMNS}
        return self.done[h]


def _baseline_seed(cfg: RunConfig) -> int:
    return derive_seed(cfg.seed, "baselines")


def method_hp(method: str, args, cfg: RunConfig) -> dict:
    seed = _baseline_seed(cfg)
    if method in ("base", "sae"):
        return {}
    if method == "popsteer":
        return {"alpha_pop": args.alpha_pop, "alpha_unpop": args.alpha_unpop, "beta": args.beta}
    if method == "randomselect":
        return {"alpha_pop": args.alpha_pop, "alpha_unpop": args.alpha_unpop, "beta": args.beta, "seed": seed}
    if method == "noise":
        return {"beta": args.beta, "xi": args.xi, "seed": seed}
    if method == "random":
        return {"t": args.t, "seed": seed}
    if method == "ipr":
        return {"ipr_alpha": args.ipr_alpha, "t": args.t}
    raise ConfigError(f"unknown method {method!r}")


def cmd_evaluate(cfg: RunConfig, args) -> int:
    r = Runner(cfg)
    if args.method == "popsteer":
        SteeringConfig(args.alpha_pop, args.alpha_unpop, args.beta)
    row = r.run(args.method, method_hp(args.method, args, cfg))
    print("  ".join(f"{c} {row[c]}" for c in ("method", "ndcg", "ndcg_head", "ndcg_tail", "item_coverage", "gini",
                                               "seconds")))
    return EXIT_OK


def grid_configs(cfg: RunConfig):
    g = cfg.grid
    seed = _baseline_seed(cfg)
    yield "base", {}
    yield "sae", {}
    for b, ap, au in itertools.product(g.beta, g.alpha_pop, g.alpha_unpop):
        yield "popsteer", {"alpha_pop": ap, "alpha_unpop": au, "beta": b}
    for t in g.random_t:
        yield "random", {"t": t, "seed": seed}
    for a in g.ipr_alpha:
        yield "ipr", {"ipr_alpha": a, "t": g.ipr_t}


def ablation_configs(cfg: RunConfig):
    g = cfg.grid
    seed = _baseline_seed(cfg)
    yield "base", {}
    for b in g.ablation_beta:
        for ap, au in itertools.product(g.alpha_pop, g.alpha_unpop):
            yield "popsteer", {"alpha_pop": ap, "alpha_unpop": au, "beta": b}
            yield "randomselect", {"alpha_pop": ap, "alpha_unpop": au, "beta": b, "seed": seed}
        for x in g.xi_scale:
            yield "noise", {"beta": b, "xi": x, "seed": seed}


def _sweep(cfg: RunConfig, configs) -> list[dict]:
    r = Runner(cfg)
    rows = []
    todo = list(configs)
    for n, (method, hp) in enumerate(todo, 1):
        fresh = r.row_hash(method, hp) not in r.done
        rows.append(r.run(method, hp))
        if fresh:
            log.info("[%d/%d] %s %s ndcg %s", n, len(todo), method, hp, rows[-1]["ndcg"])
    return rows


def _timing(rows) -> list[list]:
    by = {}
    for row in rows:
        by.setdefault(row["method"], []).append(float(row["seconds"]))
    return [[m, len(v), float(np.mean(v)), float(np.sum(v))] for m, v in sorted(by.items())]


def cmd_grid(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    key = pio.config_hash({"analysis": ws.analysis_key, "grid": dataclasses.asdict(cfg.grid),
                           "seed": _baseline_seed(cfg)})
    path = ws._dir("grid") / f"{key}.csv"
    if path.exists():
        print(f"grid table exists: {path}")
        return EXIT_OK
    rows = _sweep(cfg, grid_configs(cfg))
    rows.sort(key=lambda r: -float(r["ndcg"]))
    write_csv(path, RESULT_COLUMNS, [[r[c] for c in RESULT_COLUMNS] for r in rows])
    write_csv(path.with_suffix(".timing.csv"), ("method", "runs", "mean_seconds", "total_seconds"), _timing(rows))
    print(f"{len(rows)} rows; wrote {path}")
    return EXIT_OK


def best_within_budget(rows, base_ndcg: float, budget: float):
    ok = [r for r in rows if float(r["ndcg"]) >= (1 - budget) * base_ndcg]
    if not ok:
        return None, None
    return max(float(r["item_coverage"]) for r in ok), min(float(r["gini"]) for r in ok)


def cmd_ablate(cfg: RunConfig, args) -> int:
    ws = Workspace(cfg)
    key = pio.config_hash({"analysis": ws.analysis_key, "grid": dataclasses.asdict(cfg.grid),
                           "seed": _baseline_seed(cfg)})
    path = ws._dir("ablation") / f"{key}.csv"
    if path.exists():
        print(f"ablation table exists: {path}")
        return EXIT_OK
    rows = _sweep(cfg, ablation_configs(cfg))
    base = float(next(r for r in rows if r["method"] == "base")["ndcg"])
    table = []
    for b in cfg.grid.ablation_beta:
        for m in ("popsteer", "noise", "randomselect"):
            sel = [r for r in rows if r["method"] == m and r["beta"] and float(r["beta"]) == b]
            cov, gi = best_within_budget(sel, base, cfg.grid.ndcg_budget)
            table.append([b, m, len(sel), cov, gi])
            print(f"beta {b:g}  {m:<12} best coverage {fmt(cov) or '-':>8}  best gini {fmt(gi) or '-':>8}")
    write_csv(path, ("beta", "method", "configs", "best_item_coverage", "best_gini"), table)
    print(f"wrote {path}")
    return EXIT_OK


# ------------------------------------------------------------------ entry point

COMMANDS = {
    "prepare": cmd_prepare,
    "train-rec": cmd_train_rec,
    "train-sae": cmd_train_sae,
    "gen-synth": cmd_gen_synth,
    "analyze": cmd_analyze,
    "steer": cmd_steer,
    "evaluate": cmd_evaluate,
    "grid": cmd_grid,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popsteer", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI config file")
    common.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable; wins over the file)")
    common.add_argument("--data", help="dataset path (data.path)")
    common.add_argument("--format", help="tsv, csv, ml1m or a column spec (data.format)")
    common.add_argument("--out", help="output root (default $POPSTEER_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train-rec":
            sp.add_argument("--resume", action="store_true", help="continue from the last saved epoch")
        if name == "gen-synth":
            sp.add_argument("--count", type=int, default=0, help="profiles per side (default synth.n_prime)")
        if name == "evaluate":
            sp.add_argument("--method", required=True, choices=("base", "sae", "popsteer", "random", "ipr", "noise",
                                                                "randomselect"))
            sp.add_argument("--alpha-pop", type=float, default=1.0)
            sp.add_argument("--alpha-unpop", type=float, default=1.0)
            sp.add_argument("--beta", type=float, default=1.0)
            sp.add_argument("--xi", type=float, default=1.0, help="noise std in units of the median activation std")
            sp.add_argument("--t", type=int, default=50, help="long-list length for random / ipr")
            sp.add_argument("--ipr-alpha", type=float, default=0.1)
    return p


def config_from_args(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("data", "data.path"), ("format", "data.format"), ("out", "out"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"{key}={v}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = config_from_args(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, E.InvalidConfig, S.DimensionMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, D.MalformedRecord, D.EmptyFile, D.EmptyResult) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, E.DivergedLoss, S.DivergedLoss) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
