"""Evaluation protocols: annulus ablation, budgeted fidelity, bond recovery.

The annulus study measures how much prediction error grows when edges of
one distance band are removed, either completely or as a random 10%
sample repeated over seeded trials. The fidelity sweep compares
explainers by the error of the model restricted to each hard subgraph,
with baseline budgets aligned per molecule so every baseline keeps at
least as many edges as the radius-mask explainer kept. The brute-force
oracle enumerates radius assignments on a per-node grid and is the
independent yardstick for the radius optimizer.
"""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import backbone as bb
from . import explainers as ex
from .errors import ContractError, EmptyBinWarning
from .geometry import (AnnulusBinning, DirectedEdgeSet, EdgeMask, MolecularGraph,
                       build_dpg, mask_annulus)

EXPLAINER_NAMES = ("rise", "gnnexplainer", "pgexplainer", "lri_bernoulli")


@dataclass
class EvalRecord:
    explainer: str
    budget_ratio: float
    mae: float
    edges_preserved_fraction: float
    consistency_gap: float
    bond_precision: float | None = None
    bond_recall: float | None = None
    runtime_seconds: float = 0.0
    n_molecules: int = 0
    n_failed: int = 0

    def __post_init__(self):
        if self.mae < 0.0:
            raise ContractError("mae must be nonnegative")
        if not (0.0 <= self.edges_preserved_fraction <= 1.0):
            raise ContractError("edges_preserved_fraction must lie in [0, 1]")

    @property
    def valid(self) -> bool:
        """A run with more than 5% failed molecules is not comparable."""
        total = self.n_molecules + self.n_failed
        return total == 0 or self.n_failed <= 0.05 * total


@dataclass
class AnnulusStudyTable:
    original_mae: float
    removal_mae: np.ndarray        # (num_bins,)
    random_mean: np.ndarray        # (num_bins,)
    random_std: np.ndarray         # (num_bins,)
    trials: int
    cutoffs: np.ndarray
    edges_per_bin: np.ndarray
    empty_bins: list[int] = field(default_factory=list)


def corpus_with_edges(corpus) -> list[tuple[MolecularGraph, DirectedEdgeSet, float]]:
    return [(g, build_dpg(g, g.construction_radii), y) for g, y in corpus]


def mae_with_masks(items, params: bb.BackboneParams, mask_fn=None) -> float:
    """Mean |prediction - target|; mask_fn(idx, graph, edges) masks each item."""
    errs = []
    for idx, (graph, edges, y) in enumerate(items):
        mask = EdgeMask.ones(edges.n_edges) if mask_fn is None else mask_fn(idx, graph, edges)
        pred = bb.forward(graph, edges, mask, params).value
        errs.append(abs(pred - y))
    return float(np.mean(errs))


def annulus_study(params: bb.BackboneParams, corpus, binning: AnnulusBinning,
                  seed: int, trials: int = 20, fraction: float = 0.1) -> AnnulusStudyTable:
    """Per-bin MAE after full removal, and mean/std over seeded partial removals."""
    items = corpus_with_edges(corpus)
    nb = binning.num_bins
    original = mae_with_masks(items, params)

    counts = np.zeros(nb, dtype=np.intp)
    for _, edges, _ in items:
        if edges.n_edges:
            bins = binning.bin_of(edges.dist)
            for b in range(1, nb + 1):
                counts[b - 1] += int((bins == b).sum())
    empty = [b for b in range(1, nb + 1) if counts[b - 1] == 0]

    removal = np.empty(nb)
    rand_mean = np.empty(nb)
    rand_std = np.empty(nb)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyBinWarning)
        for b in range(1, nb + 1):
            if b in empty:
                removal[b - 1] = original
                rand_mean[b - 1] = original
                rand_std[b - 1] = 0.0
                continue
            removal[b - 1] = mae_with_masks(
                items, params,
                lambda idx, g, e, _b=b: mask_annulus(e, binning, _b, 1.0, seed=0))
            trial_maes = []
            for t in range(trials):
                trial_maes.append(mae_with_masks(
                    items, params,
                    lambda idx, g, e, _b=b, _t=t: mask_annulus(
                        e, binning, _b, fraction,
                        seed=(seed + 104729 * _b + 7919 * _t) ^ idx)))
            rand_mean[b - 1] = float(np.mean(trial_maes))
            rand_std[b - 1] = float(np.std(trial_maes))

    return AnnulusStudyTable(
        original_mae=original,
        removal_mae=removal,
        random_mean=rand_mean,
        random_std=rand_std,
        trials=trials,
        cutoffs=binning.cutoffs.copy(),
        edges_per_bin=counts,
        empty_bins=empty,
    )


def bond_recovery(result: ex.ExplanationResult, truth) -> tuple[float, float]:
    """Precision/recall of kept undirected pairs against ground-truth bonds.

    A pair counts as kept when either direction survives extraction.
    """
    if truth is None:
        raise ContractError("graph carries no bond ground truth")
    truth = {(min(i, j), max(i, j)) for i, j in truth}
    kept_pairs = {(min(i, j), max(i, j))
                  for i, j in zip(result.edges.src.tolist(), result.edges.dst.tolist())}
    if not kept_pairs:
        return 0.0, 0.0
    hit = len(kept_pairs & truth)
    return hit / len(kept_pairs), hit / len(truth)


# ---------------------------------------------------------------------------
# Exhaustive radius-grid oracle.

def brute_force_oracle(params: bb.BackboneParams, graph: MolecularGraph,
                       edges: DirectedEdgeSet, target: float, budget: float,
                       grid_levels: int = 8) -> tuple[np.ndarray, float]:
    """Best per-node radii over the grid {0, R/(g-1), ..., R} with sum <= budget.

    Exhaustive up to exact dominance pruning: for a fixed set of covered
    out-edges only the cheapest grid radius can be optimal, so larger radii
    with identical coverage are skipped; subgraph losses are memoized by
    kept-edge set. Minimizes the squared error of the model's prediction on
    the hard subgraph. grid_levels = 1 degenerates to the all-or-nothing
    grid {0, R}.
    """
    n = graph.node_count
    if n > 6:
        raise ContractError("oracle instances are limited to 6 nodes")
    if not (1 <= grid_levels <= 8):
        raise ContractError("oracle grids are limited to 1..8 levels")
    if budget < 0.0:
        raise ContractError("budget must be nonnegative")

    out_edges = [np.nonzero(edges.src == i)[0] for i in range(n)]
    candidates: list[list[tuple[float, tuple[int, ...]]]] = []
    for i in range(n):
        levels = _node_grid(float(graph.construction_radii[i]), grid_levels)
        dists = edges.dist[out_edges[i]]
        seen: dict[tuple[int, ...], float] = {}
        for r in levels:
            covered = tuple(int(e) for e in out_edges[i][dists < r])
            if covered not in seen:  # levels ascend, so the first radius is cheapest
                seen[covered] = float(r)
        candidates.append(sorted(((r, cov) for cov, r in seen.items())))

    loss_cache: dict[tuple[int, ...], float] = {}

    def subgraph_loss(kept: tuple[int, ...]) -> float:
        if kept not in loss_cache:
            values = np.zeros(edges.n_edges)
            values[list(kept)] = 1.0
            pred = bb.forward(graph, edges, EdgeMask.hard(values), params).value
            loss_cache[kept] = (pred - target) ** 2
        return loss_cache[kept]

    best_loss = np.inf
    best_radii = np.zeros(n)
    radii = np.zeros(n)
    chosen: list[tuple[int, ...]] = [()] * n

    def dfs(i: int, spent: float):
        nonlocal best_loss, best_radii
        if i == n:
            kept = tuple(sorted(e for cov in chosen for e in cov))
            loss = subgraph_loss(kept)
            if loss < best_loss:
                best_loss = loss
                best_radii = radii.copy()
            return
        for r, cov in candidates[i]:
            if spent + r > budget + 1e-12:
                break  # candidates are cost-sorted
            radii[i] = r
            chosen[i] = cov
            dfs(i + 1, spent + r)
        radii[i] = 0.0
        chosen[i] = ()

    dfs(0, 0.0)
    return best_radii, float(best_loss)


def _node_grid(r_max: float, grid_levels: int) -> np.ndarray:
    if grid_levels == 1:
        return np.array([0.0, r_max])
    return np.linspace(0.0, r_max, grid_levels)


def snap_radii_to_grid(radii: np.ndarray, max_radii: np.ndarray,
                       grid_levels: int) -> np.ndarray:
    """Round each radius down to its node grid, so the budget stays satisfied."""
    radii = np.asarray(radii, dtype=np.float64)
    out = np.empty_like(radii)
    for i, (r, r_max) in enumerate(zip(radii, max_radii)):
        levels = _node_grid(float(r_max), grid_levels)
        out[i] = levels[levels <= r + 1e-12].max()
    return out


# ---------------------------------------------------------------------------
# Budgeted fidelity sweep.

def fidelity_sweep(params: bb.BackboneParams, corpus, explainer_names,
                   budget_ratios, seed: int,
                   train_corpus=None,
                   config: ex.ExplainConfig | None = None,
                   weights: ex.BaselineLossWeights | None = None,
                   with_bonds: bool = False) -> list[EvalRecord]:
    """One EvalRecord per (explainer, budget ratio) over the corpus.

    When the radius-mask explainer participates, it runs first at each
    ratio and each baseline then keeps at least as many edges per molecule
    (never below the nominal floor(ratio * |E|)), honoring the convention
    that baselines never preserve fewer edges. Failed molecules are
    skipped, counted, and reported.
    """
    names = list(explainer_names)
    if not names:
        raise ContractError("select at least one explainer")
    unknown = [n for n in names if n not in EXPLAINER_NAMES]
    if unknown:
        raise ContractError(f"unknown explainers: {unknown}")
    config = config if config is not None else ex.ExplainConfig(seed=seed)
    weights = weights if weights is not None else ex.BaselineLossWeights()

    items = corpus_with_edges(corpus)
    scorer_items = corpus_with_edges(train_corpus) if train_corpus else items

    # Soft values of budget-independent baselines are reused across ratios;
    # only the extraction count changes.
    soft_cache: dict[tuple[str, int], np.ndarray] = {}
    records: list[EvalRecord] = []

    for rho in budget_ratios:
        if rho in (0.0, 1.0):
            # Degenerate budgets bypass optimization: every explainer keeps
            # everything (ratio 1) or nothing (ratio 0).
            for name in names:
                start = time.perf_counter()
                errs, fracs, precisions, recalls = [], [], [], []
                for graph, edges, y in items:
                    result = ex.trivial_result(name, graph, edges, full=rho == 1.0)
                    hard = ex.hard_mask_values(edges, result.kept_index)
                    pred = bb.forward(graph, edges, hard, params).value
                    errs.append(abs(pred - y))
                    fracs.append(result.edges_preserved_fraction)
                    if with_bonds and graph.bond_truth is not None:
                        p, r = bond_recovery(result, graph.bond_truth)
                        precisions.append(p)
                        recalls.append(r)
                records.append(EvalRecord(
                    explainer=name,
                    budget_ratio=float(rho),
                    mae=float(np.mean(errs)),
                    edges_preserved_fraction=float(np.mean(fracs)),
                    consistency_gap=0.0,
                    bond_precision=float(np.mean(precisions)) if precisions else None,
                    bond_recall=float(np.mean(recalls)) if recalls else None,
                    runtime_seconds=time.perf_counter() - start,
                    n_molecules=len(errs),
                ))
            continue

        rise_results: list[ex.ExplanationResult | None] = [None] * len(items)
        rise_kept = [0] * len(items)
        rise_failed = 0
        if "rise" in names:
            for idx, (graph, edges, y) in enumerate(items):
                cfg = replace(config, seed=config.seed ^ idx)
                try:
                    _, res = ex.rise_optimize(params, graph, edges, y, rho, cfg)
                    rise_results[idx] = res
                    rise_kept[idx] = res.edges.n_edges
                except Exception:
                    rise_failed += 1

        pg_results = None
        if "pgexplainer" in names:
            keeps = [max(int(np.floor(rho * e.n_edges)), k)
                     for (_, e, _), k in zip(items, rise_kept)]
            try:
                scorer, _ = ex.train_edge_scorer(params, scorer_items, weights, config)
                pg_results = []
                for (graph, edges, _y), keep in zip(items, keeps):
                    soft = expit(scorer.logits(ex.scorer_features(params, graph, edges)))
                    pg_results.append(ex.result_from_topk("pgexplainer", edges, soft, keep, []))
            except Exception:
                pg_results = None

        for name in names:
            start = time.perf_counter()
            errs, fracs, gaps = [], [], []
            precisions, recalls = [], []
            failed = rise_failed if name == "rise" else 0
            for idx, (graph, edges, y) in enumerate(items):
                keep = max(int(np.floor(rho * edges.n_edges)), rise_kept[idx])
                try:
                    result, soft_mask = _run_explainer(
                        name, params, graph, edges, y, rho, config, weights,
                        idx, keep, rise_results, pg_results, soft_cache)
                except Exception:
                    failed += 1
                    continue
                hard = ex.hard_mask_values(edges, result.kept_index)
                pred = bb.forward(graph, edges, hard, params).value
                errs.append(abs(pred - y))
                fracs.append(result.edges_preserved_fraction)
                if soft_mask is not None:
                    gap = ex.consistency_gap(params, graph, edges, soft_mask, hard, y)
                    gaps.append(gap.prediction_gap)
                if with_bonds and graph.bond_truth is not None:
                    p, r = bond_recovery(result, graph.bond_truth)
                    precisions.append(p)
                    recalls.append(r)

            records.append(EvalRecord(
                explainer=name,
                budget_ratio=float(rho),
                mae=float(np.mean(errs)) if errs else float("nan"),
                edges_preserved_fraction=float(np.mean(fracs)) if fracs else 0.0,
                consistency_gap=float(np.mean(gaps)) if gaps else 0.0,
                bond_precision=float(np.mean(precisions)) if precisions else None,
                bond_recall=float(np.mean(recalls)) if recalls else None,
                runtime_seconds=time.perf_counter() - start,
                n_molecules=len(errs),
                n_failed=failed,
            ))
    return records


def _run_explainer(name, params, graph, edges, y, rho, config, weights,
                   idx, keep, rise_results, pg_results, soft_cache):
    cfg = replace(config, seed=config.seed ^ idx)
    if name == "rise":
        result = rise_results[idx]
        if result is None:
            raise RuntimeError("radius optimization failed for this molecule")
        return result, EdgeMask.soft(result.soft_values)
    if name == "pgexplainer":
        if pg_results is None:
            raise RuntimeError("edge scorer training failed")
        result = pg_results[idx]
        return result, EdgeMask.soft(result.soft_values)
    cache_key = (name, idx)
    if cache_key in soft_cache:
        result = ex.result_from_topk(name, edges, soft_cache[cache_key], keep, [])
    elif name == "gnnexplainer":
        result = ex.gnnexplainer_optimize(params, graph, edges, y, weights, rho,
                                          cfg, keep_count=keep)
        soft_cache[cache_key] = result.soft_values
    else:  # lri_bernoulli
        result = ex.lri_bernoulli_optimize(params, graph, edges, y, weights, rho,
                                           cfg, keep_count=keep)
        soft_cache[cache_key] = result.soft_values
    return result, EdgeMask.soft(result.soft_values)


# ---------------------------------------------------------------------------
# Output writers. The CSV header documents the fixed column order; wall-clock
# runtimes stay out of these files so reruns are byte-identical.

RECORD_COLUMNS = ("explainer", "budget_ratio", "mae", "edges_preserved_fraction",
                  "consistency_gap", "bond_precision", "bond_recall",
                  "n_molecules", "n_failed", "valid")


def records_to_csv(records: list[EvalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for r in records:
        writer.writerow([
            r.explainer,
            repr(float(r.budget_ratio)),
            repr(float(r.mae)),
            repr(float(r.edges_preserved_fraction)),
            repr(float(r.consistency_gap)),
            "" if r.bond_precision is None else repr(float(r.bond_precision)),
            "" if r.bond_recall is None else repr(float(r.bond_recall)),
            r.n_molecules,
            r.n_failed,
            int(r.valid),
        ])
    return buf.getvalue()


def records_summary(records: list[EvalRecord]) -> dict:
    return {
        "schema_version": 1,
        "records": [
            {
                "explainer": r.explainer,
                "budget_ratio": r.budget_ratio,
                "mae": r.mae,
                "edges_preserved_fraction": r.edges_preserved_fraction,
                "consistency_gap": r.consistency_gap,
                "bond_precision": r.bond_precision,
                "bond_recall": r.bond_recall,
                "n_molecules": r.n_molecules,
                "n_failed": r.n_failed,
                "valid": r.valid,
            }
            for r in records
        ],
    }


def annulus_table_to_csv(table: AnnulusStudyTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "d_lo", "d_hi", "n_edges", "removal_mae",
                     "random_mae_mean", "random_mae_std", "trials", "empty"])
    writer.writerow(["original", "", "", "", repr(float(table.original_mae)), "", "",
                     table.trials, ""])
    for b in range(table.removal_mae.size):
        writer.writerow([
            b + 1,
            repr(float(table.cutoffs[b])),
            repr(float(table.cutoffs[b + 1])),
            int(table.edges_per_bin[b]),
            repr(float(table.removal_mae[b])),
            repr(float(table.random_mean[b])),
            repr(float(table.random_std[b])),
            table.trials,
            int((b + 1) in table.empty_bins),
        ])
    return buf.getvalue()


def write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
