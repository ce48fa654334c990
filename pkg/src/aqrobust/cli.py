"""Command-line interface.

Subcommands:
  synth     generate a synthetic cohort (CSV + schema + constraint catalog)
  train     train the questionnaire models on a cohort
  sweep     run an attack-method x epsilon sweep against a trained model
  stats     statistical comparison of sweep results
  validate  check a cohort against a constraint catalog

Options can come from a JSON config file (--config, unknown keys rejected)
with command-line flags taking precedence.  Relative --config paths are also
resolved against $AQROBUST_CONFIG_DIR.  Exit codes: 0 success, 2 bad
configuration or arguments, 3 bad input data, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

CONFIG_DIR_ENV = "AQROBUST_CONFIG_DIR"


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _fail(message, code):
    raise CliError(message, code)


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(path, allowed):
    """Read a JSON config, rejecting keys the subcommand does not define."""
    candidates = [path]
    cfg_dir = os.environ.get(CONFIG_DIR_ENV)
    if cfg_dir and not os.path.isabs(path):
        candidates.append(os.path.join(cfg_dir, path))
    target = next((c for c in candidates if os.path.exists(c)), None)
    if target is None:
        _fail(f"config file not found: {path}", EXIT_CONFIG)
    try:
        with open(target) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as exc:
        _fail(f"{target}: invalid JSON ({exc})", EXIT_CONFIG)
    if not isinstance(blob, dict):
        _fail(f"{target}: config must be a JSON object", EXIT_CONFIG)
    unknown = sorted(set(blob) - set(allowed))
    if unknown:
        _fail(f"{target}: unknown config keys: {', '.join(unknown)}",
              EXIT_CONFIG)
    return blob


def _merge_config(args, parser, argv):
    """Overlay precedence: defaults < config file < explicit flags."""
    if not getattr(args, "config", None):
        return args
    allowed = {a.dest for a in parser._actions
               if a.dest not in ("help", "config")}
    blob = _load_config(args.config, allowed)
    explicit = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if opt in argv or any(a.startswith(opt + "=") for a in argv):
                explicit.add(action.dest)
    for key, value in blob.items():
        if key not in explicit:
            setattr(args, key, value)
    return args


def _prepare_out(path, force):
    if os.path.exists(path) and os.listdir(path) and not force:
        _fail(f"output directory {path} is not empty (use --force)",
              EXIT_CONFIG)
    os.makedirs(path, exist_ok=True)


def _echo_config(args, out_dir, name):
    payload = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func", "parser")}
    with open(os.path.join(out_dir, name), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from . import data

    if args.d < 2 or args.n < 10:
        _fail("need --d >= 2 and --n >= 10", EXIT_CONFIG)
    _prepare_out(args.out, args.force)
    result = data.synth_generate(args.d, args.n, args.seed, args.difficulty)
    data.write_csv(result.table, os.path.join(args.out, "data.csv"))
    data.write_schema(result.dataset.schema,
                      os.path.join(args.out, "schema.txt"))
    with open(os.path.join(args.out, "catalog.txt"), "w") as fh:
        fh.write(result.catalog_text)
    data.save_dataset(result.dataset, os.path.join(args.out, "dataset.npz"))
    _echo_config(args, args.out, "synth_config.json")
    print(f"wrote cohort: {args.n} rows x {args.d} questions -> {args.out}")
    return EXIT_OK


def _load_cohort(data_dir):
    from . import data

    npz = os.path.join(data_dir, "dataset.npz")
    if os.path.exists(npz):
        return data.load_dataset(npz)
    csv_path = os.path.join(data_dir, "data.csv")
    schema_path = os.path.join(data_dir, "schema.txt")
    for p in (csv_path, schema_path):
        if not os.path.exists(p):
            _fail(f"missing input file: {p}", EXIT_DATA)
    try:
        schema = data.read_schema(schema_path)
        table = data.load_csv(csv_path, schema)
        table, _ = data.impute(table, schema)
        return data.encode_and_normalize(table, schema)
    except data.DataError as exc:
        _fail(str(exc), EXIT_DATA)


def _split_by_year(dataset, split_year):
    from . import data

    years = np.unique(dataset.years) if dataset.years is not None else []
    train_years = [int(y) for y in years if y < split_year]
    test_years = [int(y) for y in years if y >= split_year]
    if not train_years or not test_years:
        _fail(f"--split-year {split_year} leaves an empty partition "
              f"(years present: {list(map(int, years))})", EXIT_DATA)
    return data.temporal_split(dataset, train_years, test_years)


def cmd_train(args):
    from . import training

    _prepare_out(args.out, args.force)
    dataset = _load_cohort(args.data)
    train_ds, test_ds, excluded = _split_by_year(dataset, args.split_year)
    if train_ds.rows.shape[0] < 10 or test_ds.rows.shape[0] < 1:
        _fail("temporal split leaves too few rows", EXIT_DATA)
    cfg = training.TrainConfig(
        max_episodes=args.episodes, max_questions=args.max_questions,
        seed=args.seed, val_every=args.val_every, patience=args.patience)

    def progress(episode, auc, acc):
        print(f"episode {episode}: val AUC {auc:.4f}, accuracy {acc:.4f}",
              flush=True)

    bundle, history = training.train(
        train_ds.rows, train_ds.labels, train_ds.colmap.groups, cfg,
        progress=progress if args.verbose else None)
    test_auc, test_acc = training.validate(bundle, test_ds.rows,
                                           test_ds.labels, cfg.max_questions)
    bundle.config["test_auc"] = test_auc
    bundle.config["seed"] = args.seed
    bundle.save(os.path.join(args.out, "bundle.npz"))
    history.save_csv(os.path.join(args.out, "history.csv"))
    with open(os.path.join(args.out, "train_report.json"), "w") as fh:
        json.dump({
            "best_val_auc": history.best_auc,
            "test_auc": test_auc,
            "test_accuracy": test_acc,
            "episodes_run": history.rows[-1][0] if history.rows else 0,
            "excluded_rows": excluded,
            "seed": args.seed,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _echo_config(args, args.out, "train_config.json")
    print(f"best validation AUC {history.best_auc:.4f}; "
          f"test AUC {test_auc:.4f} -> {args.out}")
    return EXIT_OK


def cmd_sweep(args):
    from . import constraints, harness, mdp

    _prepare_out(args.out, args.force)
    if not os.path.exists(args.model):
        _fail(f"model bundle not found: {args.model}", EXIT_DATA)
    bundle = mdp.ModelBundle.load(args.model)
    dataset = _load_cohort(args.data)
    _, test_ds, _ = _split_by_year(dataset, args.split_year)
    schema = dataset.schema
    colmap = dataset.colmap
    cset = None
    catalog = args.catalog or os.path.join(args.data, "catalog.txt")
    if os.path.exists(catalog):
        try:
            cset = constraints.load_catalog_file(catalog, schema)
        except constraints.CatalogError as exc:
            _fail(str(exc), EXIT_DATA)
    methods = tuple(args.methods.split(","))
    unknown = [m for m in methods if m not in harness.DEFAULT_METHODS]
    if unknown:
        _fail(f"unknown attack methods: {', '.join(unknown)}", EXIT_CONFIG)
    try:
        epsilons = tuple(float(e) for e in args.epsilons.split(","))
    except ValueError:
        _fail(f"bad --epsilons value: {args.epsilons}", EXIT_CONFIG)
    cfg = harness.SweepConfig(
        methods=methods, epsilons=epsilons, n_samples=args.n_samples,
        max_questions=args.max_questions, mask_regime=args.mask_regime,
        seed=args.seed)

    def progress(cell):
        print(f"{cell.method} eps={cell.epsilon:g}: "
              f"{cell.success_rate:.1%} ({cell.successes}/{cell.n})",
              flush=True)

    cells, records, idx = harness.run_sweep(
        bundle, test_ds.rows, test_ds.labels, cfg, schema=schema,
        colmap=colmap, cset=cset,
        progress=progress if args.verbose else None)
    harness.write_grid_csv(cells, os.path.join(args.out, "grid.csv"))
    harness.write_timing_csv(cells, os.path.join(args.out, "timing.csv"))
    harness.write_heatmap_csv(cells, os.path.join(args.out, "heatmap.csv"))
    harness.write_records_csv(records, os.path.join(args.out, "records.csv"))
    harness.write_report(cells, cfg, os.path.join(args.out, "report.json"),
                         extra={"n_selected": int(len(idx)),
                                "model": os.path.abspath(args.model)})
    _echo_config(args, args.out, "sweep_config.json")
    print(f"swept {len(cells)} cells over {len(idx)} samples -> {args.out}")
    return EXIT_OK


def cmd_stats(args):
    import csv as csvmod

    from . import stats

    if not os.path.exists(args.grid):
        _fail(f"grid file not found: {args.grid}", EXIT_DATA)
    with open(args.grid, newline="") as fh:
        rows = list(csvmod.DictReader(fh))
    if not rows:
        _fail(f"{args.grid}: no rows", EXIT_DATA)
    required = {"method", "epsilon", "success_rate"}
    missing = required - set(rows[0])
    if missing:
        _fail(f"{args.grid}: missing columns: {', '.join(sorted(missing))}",
              EXIT_DATA)
    groups = {}
    for r in rows:
        try:
            rate = float(r["success_rate"])
        except ValueError:
            _fail(f"{args.grid}: bad success_rate {r['success_rate']!r}",
                  EXIT_DATA)
        groups.setdefault(r[args.group_by], []).append(rate)
    if len(groups) < 2:
        _fail("need at least two groups to compare", EXIT_DATA)
    short = {g for g, v in groups.items() if len(v) < 3}
    if short:
        _fail("groups with fewer than 3 observations: "
              + ", ".join(sorted(short)), EXIT_DATA)
    try:
        analysis = stats.analyze(list(groups.values()), list(groups.keys()),
                                 alpha=args.alpha)
    except stats.StatsError as exc:
        _fail(str(exc), EXIT_RUNTIME)
    report = stats.format_report(analysis)
    header = (f"Input: {os.path.abspath(args.grid)}\n"
              f"SHA-256: {_sha256(args.grid)}\n"
              f"Grouping column: {args.group_by}; alpha = {args.alpha:g}\n\n")
    text = header + report
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_validate(args):
    from . import constraints, data

    for p in (args.data, args.schema, args.catalog):
        if not os.path.exists(p):
            _fail(f"file not found: {p}", EXIT_DATA)
    try:
        schema = data.read_schema(args.schema)
        cset = constraints.load_catalog_file(args.catalog, schema)
        table = data.load_csv(args.data, schema)
        table, _ = data.impute(table, schema)
    except (data.DataError, constraints.CatalogError) as exc:
        _fail(str(exc), EXIT_DATA)
    # constraint records cover the question features only
    q_idx = [i for i, _ in schema.question_features()]
    records = table.values[:, q_idx]
    n_bad = 0
    counts = {}
    for i, row in enumerate(records):
        report = constraints.check(row, cset)
        if not report.valid:
            n_bad += 1
            for v in report.violations:
                counts[v.ident] = counts.get(v.ident, 0) + 1
            if args.verbose:
                for v in report.violations:
                    print(f"row {i + 1}: {v.ident}: observed {v.observed}, "
                          f"required {v.required}")
    corr = constraints.check_batch_correlations(records, cset)
    n = records.shape[0]
    print(f"checked {n} rows: {n - n_bad} valid, {n_bad} with violations")
    for ident, c in sorted(counts.items()):
        print(f"  {ident}: {c}")
    for entry in corr:
        status = "ok" if entry["ok"] else "drifted"
        print(f"correlation {entry['pair'][0]}~{entry['pair'][1]} "
              f"({entry['kind']}): observed {entry['observed']:.3f}, "
              f"expected {entry['expected']:g} "
              f"+/- {entry['tolerance']:g} [{status}]")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"rows": int(n), "invalid_rows": int(n_bad),
                       "violations": counts,
                       "correlations": [
                           {"pair": list(e["pair"]), "kind": e["kind"],
                            "observed": float(e["observed"]),
                            "expected": float(e["expected"]),
                            "tolerance": float(e["tolerance"]),
                            "ok": bool(e["ok"])}
                           for e in corr]},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK if n_bad == 0 else EXIT_DATA


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="aqrobust",
        description="Adversarial robustness toolkit for adaptive "
                    "questionnaire models.")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP thread counts")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags win")
        p.add_argument("--force", action="store_true",
                       help="overwrite non-empty output directories")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int, default=50, help="number of questions")
    p.add_argument("--n", type=int, default=20000, help="number of rows")
    p.add_argument("--difficulty", type=float, default=1.0,
                   help="label noise scale (0 = cleanly separable)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the questionnaire models")
    common(p)
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=50000)
    p.add_argument("--max-questions", type=int, default=8)
    p.add_argument("--split-year", type=int, default=2010,
                   help="first test year of the temporal split")
    p.add_argument("--val-every", type=int, default=1000)
    p.add_argument("--patience", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="attack-method x epsilon sweep")
    common(p)
    p.add_argument("--model", required=True, help="trained bundle (.npz)")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default=",".join(
        ("fgsm", "pgd", "bim", "cw", "deepfool", "autoattack")))
    p.add_argument("--epsilons", default="0.1,0.3,0.5,0.8,1.0,1.5,2.0")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--max-questions", type=int, default=8)
    p.add_argument("--split-year", type=int, default=2010)
    p.add_argument("--mask-regime", choices=("fixed", "episodic"),
                   default="fixed")
    p.add_argument("--catalog", help="constraint catalog "
                   "(default: <data>/catalog.txt if present)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="compare sweep results statistically")
    common(p)
    p.add_argument("--grid", required=True, help="grid.csv from a sweep")
    p.add_argument("--out", help="write the report here (default: stdout)")
    p.add_argument("--group-by", default="method")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check a cohort against a catalog")
    common(p)
    p.add_argument("--data", required=True, help="cohort CSV")
    p.add_argument("--schema", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--out", help="JSON summary path")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        _set_threads(args.threads)
    # find the subparser so config merging knows the allowed keys
    sub_actions = [a for a in parser._actions
                   if isinstance(a, argparse._SubParsersAction)]
    subparser = sub_actions[0].choices[args.command]
    try:
        args = _merge_config(args, subparser, argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
