"""Command-line driver: ``sslcil {simulate,run,eval,sweep}``.

The default output root is ``$SSLCIL_OUT`` (falling back to ``./sslcil-out``)
unless ``--out`` or ``out_dir`` in the config says otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import harness
from .analytic import predict
from .config import DEFAULT_CONFIG_YAML, OUT_ENV, load_config
from .errors import ChecksumError, ParameterError, SslCilError
from .storage import load_phase, save_phase

logger = logging.getLogger("sslcil")

REPORT_COLUMNS = ["method", "phase", "n_test", "mae_deg", "acc_pct", "wall_ms"]
PHASE_GLOB = "phase_*.sslphase"


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["out_dir"] = str(args.out)
    if getattr(args, "methods", None):
        overrides["eval.methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(cfg, sub=None):
    out = cfg.output_dir() if sub is None else cfg.output_dir() / sub
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ParameterError(f"cannot create output directory {out}: {exc}") from exc
    return out


def write_csv(path, rows, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=float) + "\n")


def _phase_files(data):
    data = Path(data)
    files = [data] if data.is_file() else sorted(data.glob(PHASE_GLOB))
    if not files:
        raise ParameterError(f"no phase files found at {data}")
    return files


# subcommands --------------------------------------------------------------


def cmd_simulate(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    splits = harness.class_splits(cfg)
    manifest = []
    for k, cs in enumerate(splits):
        phase = harness.simulate_phase(cfg, cfg.seed, k, cs)
        path = out / f"phase_{k:02d}.sslphase"
        save_phase(path, phase)
        manifest.append({
            "phase": k,
            "classes": [min(cs), max(cs)] if cs == tuple(range(min(cs), max(cs) + 1)) else list(cs),
            "n_classes": len(cs),
            "n_train": len(phase.train),
            "n_test": len(phase.test),
            "file": path.name,
        })
    write_json(out / "manifest.json", {"seed": cfg.seed, "phases": manifest})
    for m in manifest:
        span = f"{m['classes'][0]}-{m['classes'][-1]}" if len(m["classes"]) == 2 else f"{m['n_classes']} classes"
        print(f"phase {m['phase']:2d}  classes {span:>9s}  train {m['n_train']:5d}  test {m['n_test']:5d}  {m['file']}")
    print(f"total classes: {sum(m['n_classes'] for m in manifest)}")
    return 0


def _benchmarks(cfg, data):
    """[(seed, Benchmark)]: from phase files for one seed, or simulated per seed."""
    if data:
        datasets = [load_phase(p) for p in _phase_files(data)]
        bench = harness.Benchmark.from_phase_datasets(datasets, harness.geometry_from(cfg),
                                                      cfg.features.tau_range, cfg.features.cache_dir or None)
        return [(cfg.seed, bench)]
    return [(s, harness.build_benchmark(cfg, s)) for s in cfg.seeds]


def cmd_run(args):
    cfg = _load(args)
    if args.seed is not None:
        cfg = cfg.replace(**{"eval.n_seeds": 1})
    methods = cfg.eval.methods
    if args.resume:
        if methods != ["ssl_cil"]:
            if "ssl_cil" not in methods:
                raise ParameterError("--resume needs the ssl_cil method")
            methods = ["ssl_cil"]
        meta_seed = ckpt_io.load(args.resume)[3]["seed"]
        cfg = cfg.replace(seed=meta_seed, **{"eval.n_seeds": 1})
    out = _out_dir(cfg)
    per_seed = {m: [] for m in methods}
    seed_rows = []
    for seed, bench in _benchmarks(cfg, args.data):
        for m in methods:
            ckpt_path = out / f"ssl_cil_seed{seed}.ckpt" if m == "ssl_cil" else None
            rec = harness.run_cil(m, bench, cfg, seed, resume=args.resume,
                                  stop_after=args.stop_after, checkpoint_path=ckpt_path)
            per_seed[m].append(rec)
            first = 0 if not args.resume else rec.state.phase + 1 - len(rec.reports)
            for i, row in enumerate(rec.rows()):
                row["phase"] = first + i
                seed_rows.append(dict(row, seed=seed))
            final = rec.reports[-1]
            print(f"seed {seed}  {m:8s}  final MAE {final.mae_deg:7.3f} deg  ACC {final.acc_pct:6.2f} %")
    rows, summary = [], {"seeds": cfg.seeds, "methods": {}, "config": cfg.to_dict()}
    for m, recs in per_seed.items():
        mean = harness.average_records(recs)
        offset = seed_rows[[r["method"] for r in seed_rows].index(m)]["phase"]
        for i, row in enumerate(mean.rows()):
            row["phase"] = offset + i
            rows.append(row)
        summary["methods"][m] = {
            "final_mae_deg": mean.reports[-1].mae_deg,
            "final_acc_pct": mean.reports[-1].acc_pct,
            "per_seed": [r.to_dict() for r in recs],
        }
    write_csv(out / "report.csv", rows, REPORT_COLUMNS)
    write_csv(out / "report_per_seed.csv", seed_rows, ["seed"] + REPORT_COLUMNS)
    write_json(out / "summary.json", summary)
    print(f"reports written to {out}")
    return 0


def cmd_eval(args):
    backbone, fe_map, state, meta = ckpt_io.load(args.checkpoint)
    cfg = load_config(args.config) if args.config else harness.ExperimentConfig()
    geometry = harness.geometry_from(cfg)
    xs, doas = [], []
    for path in _phase_files(args.data):
        test = load_phase(path).test
        if len(test):
            xs.append(harness.featurize(test, geometry, cfg.features.tau_range))
            doas.append(test.doa_deg)
    if not xs:
        raise ParameterError(f"no test samples in {args.data}")
    x, doa = np.concatenate(xs), np.concatenate(doas)
    if x.shape[1] != backbone.d_in:
        raise ParameterError(f"dataset features have {x.shape[1]} dims, checkpoint expects {backbone.d_in}")
    keep = np.isin(doa, np.asarray(state.seen_classes))
    pred = predict(x[keep], backbone, fe_map, state).angles if keep.any() else np.zeros(0, dtype=np.int64)
    report = harness.evaluate(pred, doa[keep], args.tolerance if args.tolerance is not None else cfg.eval.tolerance_deg)
    out = report.to_dict()
    out.update(n_excluded_unseen=int((~keep).sum()), phase=int(state.phase))
    print(json.dumps(out, indent=2))
    return 0


def cmd_sweep(args):
    cfg = _load(args)
    values = args.values
    if not values:
        raise ParameterError("--values must list at least one value")
    if args.param == "expansion_size":
        values = [int(v) for v in values]
    out = _out_dir(cfg, f"sweep_{args.param}")
    if args.param == "snr":
        rows, table = harness.snr_sweep(values, cfg)
        records = [(f"snr{s:g}_{m}", rec) for s, recs in table.items() for m, rec in recs.items()]
    else:
        methods = tuple(cfg.eval.methods) if args.methods else ("ssl_cil",)
        rows, table = harness.ablation_sweep(args.param, values, cfg, methods)
        records = [(f"{args.param}{v:g}_{m}", rec) for v, recs in table.items() for m, rec in recs.items()]
    write_csv(out / f"{args.param}.csv", rows)
    write_json(out / f"{args.param}.json", {
        "param": args.param, "values": values, "seeds": cfg.seeds, "rows": rows,
        "runs": {name: rec.to_dict() for name, rec in records},
    })
    cols = list(rows[0])
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r[c]:.3f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return 0


def cmd_config(args):
    print(DEFAULT_CONFIG_YAML, end="")
    return 0


# entry point --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="sslcil",
        description="Analytic class-incremental DoA estimation: simulate data, run the CIL protocol, "
                    "evaluate checkpoints and sweep hyperparameters.",
        epilog=f"Output goes to --out, else the config's out_dir, else ${OUT_ENV}, else ./sslcil-out.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per phase")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, methods=False):
        sp.add_argument("--config", help="YAML config file (see `sslcil config` for every key)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (run: use only this seed)")
        if methods:
            sp.add_argument("--methods", help="comma-separated subset of ssl_cil,joint,finetune")

    sp = sub.add_parser("simulate", help="write per-phase train/test containers and a manifest")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run the CIL protocol and write CSV/JSON reports plus the ssl_cil checkpoint")
    common(sp, methods=True)
    sp.add_argument("--data", help="directory of phase files from `simulate` (default: simulate on the fly)")
    sp.add_argument("--resume", help="ssl_cil checkpoint to continue from (phases it covers are skipped)")
    sp.add_argument("--stop-after", type=int, help="stop after this phase index")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="score a checkpoint on the test sets of phase files; prints JSON")
    sp.add_argument("checkpoint", help="checkpoint written by `run`")
    sp.add_argument("data", help="a phase file or a directory of them")
    sp.add_argument("--config", help="config used for feature extraction (default: built-in)")
    sp.add_argument("--tolerance", type=float, help="ACC tolerance in degrees")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="ablation (expansion_size, eta) or SNR sweep; writes a CSV table")
    common(sp, methods=True)
    sp.add_argument("--param", required=True, choices=["expansion_size", "eta", "snr"])
    sp.add_argument("--values", required=True, type=_float_list, help="comma-separated values, e.g. 1,0.1,0.01")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("config", help="print the default config as YAML")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    raw = list(sys.argv[1:] if argv is None else argv)
    # let "--values -20,-10" through: argparse would read the list as a flag
    argv, i = [], 0
    while i < len(raw):
        if raw[i] == "--values" and i + 1 < len(raw) and raw[i + 1].startswith("-"):
            argv.append(f"--values={raw[i + 1]}")
            i += 2
        else:
            argv.append(raw[i])
            i += 1
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ChecksumError as exc:
        print(f"sslcil: checksum error: {exc}", file=sys.stderr)
        return 3
    except SslCilError as exc:
        print(f"sslcil: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"sslcil: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
