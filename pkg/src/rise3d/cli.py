"""Command-line pipelines: generate, train, explain, annulus-study, oracle-check.

Every subcommand writes a manifest with the fully resolved configuration
and seeds; two runs with identical manifests produce byte-identical CSV
and JSON outputs. Wall-clock timings go to a plain-text run log instead.
Exit codes: 0 success, 2 usage error, 3 input error, 4 numeric or
optimization failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import backbone as bb
from . import datasets as ds
from . import evaluation as ev
from . import explainers as ex
from .errors import ContractError, NumericError, ParseError
from .geometry import quantile_annuli

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


class _Lock:
    """One CLI instance per output directory."""

    def __init__(self, outdir: Path):
        self.path = outdir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ContractError(
                f"{self.path} exists; another run owns this directory "
                "(remove the lock file if that run crashed)")
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False


def _write_manifest(outdir: Path, subcommand: str, config: dict) -> None:
    doc = {
        "artifact_version": __version__,
        "subcommand": subcommand,
        "config": config,
    }
    (outdir / "run_manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _log(outdir: Path, message: str) -> None:
    with open(outdir / "run.log", "a") as fh:
        fh.write(message + "\n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RISE_THREADS", "1")))
    except ValueError:
        return 1


def _map_molecules(fn, items):
    """Apply fn(index, item) in order; RISE_THREADS > 1 runs items in parallel."""
    n_threads = _threads()
    if n_threads <= 1 or len(items) <= 1:
        return [fn(i, it) for i, it in enumerate(items)]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        futures = [pool.submit(fn, i, it) for i, it in enumerate(items)]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_generate(args) -> int:
    if args.count <= 0:
        raise ContractError("--count must be positive")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with _Lock(outdir):
        config = ds.SyntheticCorpusConfig(
            count=args.count,
            atom_range=(args.atom_min, args.atom_max),
            bonded_weight=args.bonded_weight,
            nonbonded_weight=args.nonbonded_weight,
            decay_exponent=args.decay_exponent,
            seed=args.seed,
            cutoff=args.cutoff,
        )
        start = time.perf_counter()
        corpus = ds.generate_synthetic_corpus(config)
        ds.save_corpus(corpus, outdir, config)
        _write_manifest(outdir, "generate", _args_doc(args))
        _log(outdir, f"generated {len(corpus)} molecules in "
                     f"{time.perf_counter() - start:.2f}s")
    print(f"wrote {len(corpus)} molecules to {outdir}")
    return EXIT_OK


def cmd_train(args) -> int:
    corpus = ds.load_corpus(args.corpus)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with _Lock(outdir):
        config = bb.TrainConfig(
            epochs=args.epochs,
            lr=args.lr,
            seed=args.seed,
            val_fraction=args.val_fraction,
            patience=args.patience,
            hidden_dim=args.hidden,
            layer_count=args.layers,
            n_rbf=args.rbf,
        )
        start = time.perf_counter()
        result = bb.train(corpus, config)
        bb.save_checkpoint(result.params, outdir / "checkpoint.json")
        _write_manifest(outdir, "train", _args_doc(args))
        ev.write_json({
            "schema_version": 1,
            "train_mae": result.train_mae,
            "val_mae": result.val_mae,
            "epochs_run": result.epochs_run,
        }, outdir / "training_summary.json")
        _log(outdir, f"trained in {time.perf_counter() - start:.2f}s "
                     f"({result.epochs_run} epochs)")
    print(f"train MAE {result.train_mae:.6f}  validation MAE {result.val_mae:.6f}")
    return EXIT_OK


def _explain_config(args) -> ex.ExplainConfig:
    return ex.ExplainConfig(
        k=args.k,
        epochs=args.epochs,
        lr=args.step,
        seed=args.seed,
        budget_units=args.budget_units,
    )


def _loss_weights(args) -> ex.BaselineLossWeights:
    return ex.BaselineLossWeights(
        lambda_pred=args.lambda_pred,
        lambda_size=args.lambda_size,
        lambda_ent=args.lambda_ent,
    )


def cmd_explain(args) -> int:
    corpus = ds.load_corpus(args.corpus)
    params = bb.load_checkpoint(args.checkpoint)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    names = list(ev.EXPLAINER_NAMES) if "all" in args.explainer else args.explainer
    with _Lock(outdir):
        start = time.perf_counter()
        config = _explain_config(args)
        weights = _loss_weights(args)
        records = ev.fidelity_sweep(params, corpus, names, args.rho, seed=args.seed,
                                    config=config, weights=weights,
                                    with_bonds=True)
        # Per-molecule result files for the first requested ratio.
        rho0 = args.rho[0]
        items = ev.corpus_with_edges(corpus)
        per_mol = _per_molecule_results(params, items, names, rho0, config, weights)
        for mol_idx, mol_results in per_mol:
            for res in mol_results:
                path = outdir / f"result_{res.explainer}_{mol_idx:05d}.json"
                ev.write_json(res.to_json_dict(), path)
        (outdir / "records.csv").write_text(ev.records_to_csv(records))
        ev.write_json(ev.records_summary(records), outdir / "summary.json")
        _write_manifest(outdir, "explain", _args_doc(args))
        _log(outdir, f"explained {len(corpus)} molecules with {names} in "
                     f"{time.perf_counter() - start:.2f}s")
    for r in records:
        print(f"{r.explainer:>14s} rho={r.budget_ratio:.2f} "
              f"mae={r.mae:.6f} kept={r.edges_preserved_fraction:.3f}")
    return EXIT_OK


def _per_molecule_results(params, items, names, rho, config, weights):
    if rho in (0.0, 1.0):
        return [(i, [ex.trivial_result(n, g, e, full=rho == 1.0) for n in names])
                for i, (g, e, _y) in enumerate(items)]
    rise_kept = [0] * len(items)
    out = [(i, []) for i in range(len(items))]
    if "rise" in names:
        def run_rise(idx, item):
            graph, edges, y = item
            cfg = replace(config, seed=config.seed ^ idx)
            _, res = ex.rise_optimize(params, graph, edges, y, rho, cfg)
            return res
        for idx, res in enumerate(_map_molecules(run_rise, items)):
            rise_kept[idx] = res.edges.n_edges
            out[idx][1].append(res)
    for name in names:
        if name == "rise":
            continue
        if name == "pgexplainer":
            keeps = [max(int(np.floor(rho * e.n_edges)), k)
                     for (_, e, _), k in zip(items, rise_kept)]
            results = ex.pgexplainer_optimize(params, items, weights, rho,
                                              config, keep_counts=keeps)
            for idx, res in enumerate(results):
                out[idx][1].append(res)
            continue

        def run_baseline(idx, item, _name=name):
            graph, edges, y = item
            keep = max(int(np.floor(rho * edges.n_edges)), rise_kept[idx])
            cfg = replace(config, seed=config.seed ^ idx)
            if _name == "gnnexplainer":
                return ex.gnnexplainer_optimize(params, graph, edges, y, weights,
                                                rho, cfg, keep_count=keep)
            return ex.lri_bernoulli_optimize(params, graph, edges, y, weights,
                                             rho, cfg, keep_count=keep)
        for idx, res in enumerate(_map_molecules(run_baseline, items)):
            out[idx][1].append(res)
    return out


def cmd_annulus_study(args) -> int:
    corpus = ds.load_corpus(args.corpus)
    params = bb.load_checkpoint(args.checkpoint)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with _Lock(outdir):
        start = time.perf_counter()
        items = ev.corpus_with_edges(corpus)
        binning = quantile_annuli([e for _, e, _ in items], cutoff=params.cutoff)
        table = ev.annulus_study(params, corpus, binning, seed=args.seed,
                                 trials=args.trials, fraction=args.fraction)
        (outdir / "annulus_study.csv").write_text(ev.annulus_table_to_csv(table))
        _write_manifest(outdir, "annulus-study", _args_doc(args))
        _log(outdir, f"annulus study in {time.perf_counter() - start:.2f}s")
    print(f"original MAE {table.original_mae:.6f}; removal MAE by bin "
          + " ".join(f"{v:.4f}" for v in table.removal_mae))
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    params = bb.load_checkpoint(args.checkpoint)
    if args.max_nodes > 6:
        raise ContractError("oracle instances are limited to 6 nodes")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with _Lock(outdir):
        start = time.perf_counter()
        gen_config = ds.SyntheticCorpusConfig(
            count=args.instances,
            atom_range=(4, args.max_nodes),
            seed=args.seed,
            cutoff=params.cutoff,
        )
        instances = ds.generate_synthetic_corpus(gen_config)
        config = _explain_config(args)
        results = []
        within = 0
        for idx, (graph, y) in enumerate(instances):
            item = ev.corpus_with_edges([(graph, y)])[0]
            _, edges, _ = item
            budget = ex.resolve_budget(graph, args.rho, config.budget_units)
            _, oracle_loss = ev.brute_force_oracle(params, graph, edges, y, budget,
                                                   grid_levels=args.grid_levels)
            cfg = replace(config, seed=config.seed ^ idx)
            _, res = ex.rise_optimize(params, graph, edges, y, args.rho, cfg)
            snapped = ev.snap_radii_to_grid(res.radii, graph.construction_radii,
                                            args.grid_levels)
            snapped_result = ex.rise_extract(graph, edges, snapped)
            hard = ex.hard_mask_values(edges, snapped_result.kept_index)
            pred = bb.forward(graph, edges, hard, params).value
            rise_loss = (pred - y) ** 2
            ok = rise_loss <= 1.05 * oracle_loss
            within += int(ok)
            results.append({"instance": idx, "oracle_loss": oracle_loss,
                            "rise_loss": rise_loss, "within_1_05": bool(ok)})
        frac = within / len(instances) if instances else 0.0
        passed = frac >= 0.80
        ev.write_json({
            "schema_version": 1,
            "instances": results,
            "fraction_within_1_05": frac,
            "passed": passed,
        }, outdir / "oracle_check.json")
        _write_manifest(outdir, "oracle-check", _args_doc(args))
        _log(outdir, f"oracle check in {time.perf_counter() - start:.2f}s")
    print(f"{within}/{len(instances)} instances within 1.05x of the oracle "
          f"-> {'pass' if passed else 'fail'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument plumbing.

def _args_doc(args) -> dict:
    doc = {k: v for k, v in vars(args).items() if k != "func"}
    for key, value in doc.items():
        if isinstance(value, Path):
            doc[key] = str(value)
    return doc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rise3d",
        description="Radius-of-influence subgraph extraction for 3D molecular models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("generate", help="generate a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=500)
    g.add_argument("--atom-min", type=int, default=5)
    g.add_argument("--atom-max", type=int, default=12)
    g.add_argument("--cutoff", type=float, default=5.0)
    g.add_argument("--bonded-weight", type=float, default=1.0)
    g.add_argument("--nonbonded-weight", type=float, default=0.25)
    g.add_argument("--decay-exponent", type=float, default=6.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the backbone on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--patience", type=int, default=200)
    t.add_argument("--hidden", type=int, default=32)
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--rbf", type=int, default=64)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="run explainers over a corpus")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--explainer", nargs="+", default=["all"],
                   choices=[*ev.EXPLAINER_NAMES, "all"])
    e.add_argument("--rho", type=float, nargs="+", default=[0.3])
    e.add_argument("--k", type=float, default=50.0)
    e.add_argument("--epochs", type=int, default=300)
    e.add_argument("--step", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--budget-units", choices=["angstrom", "fraction"],
                   default="angstrom")
    e.add_argument("--lambda-pred", type=float, default=1.0)
    e.add_argument("--lambda-size", type=float, default=0.5)
    e.add_argument("--lambda-ent", type=float, default=0.1)
    e.set_defaults(func=cmd_explain)

    a = sub.add_parser("annulus-study", help="distance-band ablation table")
    a.add_argument("--corpus", required=True)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--trials", type=int, default=20)
    a.add_argument("--fraction", type=float, default=0.1)
    a.set_defaults(func=cmd_annulus_study)

    o = sub.add_parser("oracle-check", help="compare against the exhaustive oracle")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--instances", type=int, default=50)
    o.add_argument("--grid-levels", type=int, default=8)
    o.add_argument("--max-nodes", type=int, default=6)
    o.add_argument("--rho", type=float, default=0.5)
    o.add_argument("--k", type=float, default=50.0)
    o.add_argument("--epochs", type=int, default=300)
    o.add_argument("--step", type=float, default=0.05)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--budget-units", choices=["angstrom", "fraction"],
                   default="angstrom")
    o.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ParseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
