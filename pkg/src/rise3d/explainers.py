"""Explanatory-subgraph extractors: the radius-mask optimizer and baselines.

The radius-mask explainer learns one radius of influence per node under an
exact total budget. With learnable vectors theta and omega and budget B,

    m_i = B * softmax(theta)_i * sigmoid(omega_i),

so sum(m) <= B holds by construction and no size or entropy penalty is
needed. Each directed edge (i, j) of the original graph gets the soft
weight sigmoid(k * (rho_i - d_ij)), where rho_i is node i's effective
radius; a large sharpness k drives the soft mask toward the hard
proximity-graph indicator. The hard explanation is simply the proximity
graph of the optimized radii intersected with the original edges.

Baselines (per-edge logits, an inductive edge scorer, and node-product
masks) optimize prediction loss plus size and entropy regularizers and
extract by top-k soft value; ties break toward the smaller edge index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import backbone as bb
from .errors import ContractError, OptimizationFailureError
from .geometry import DirectedEdgeSet, EdgeMask, MolecularGraph
from .optim import Adam

RESULT_SCHEMA_VERSION = 1
_ENTROPY_CLIP = 1e-9


# ---------------------------------------------------------------------------
# Types.

@dataclass
class RadiusMask:
    """Learned per-node radius state and the derived radius values."""

    theta: np.ndarray
    omega: np.ndarray
    budget: float
    sharpness: float
    m_r: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.m_r = np.asarray(self.m_r, dtype=np.float64)
        if self.budget <= 0.0:
            raise ContractError("budget must be positive")
        if self.sharpness <= 0.0:
            raise ContractError("sharpness must be positive")
        if self.m_r.sum() > self.budget * (1.0 + 1e-12):
            raise ContractError("radius mass exceeds the budget")


@dataclass
class BaselineLossWeights:
    lambda_pred: float = 1.0
    lambda_size: float = 0.5
    lambda_ent: float = 0.1

    def __post_init__(self):
        if self.lambda_pred <= 0.0:
            raise ContractError("lambda_pred must be positive")
        if self.lambda_size < 0.0 or self.lambda_ent < 0.0:
            raise ContractError("loss weights must be nonnegative")


@dataclass
class ExplanationResult:
    explainer: str
    edges: DirectedEdgeSet
    kept_index: np.ndarray
    edges_preserved_fraction: float
    radii: np.ndarray | None = None
    trace: list[float] = field(default_factory=list)
    trace_smoothed: list[float] = field(default_factory=list)
    soft_values: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "explainer": self.explainer,
            "kept_edges": [[int(i), int(j)] for i, j in zip(self.edges.src, self.edges.dst)],
            "edges_preserved_fraction": self.edges_preserved_fraction,
            "radii": self.radii.tolist() if self.radii is not None else None,
            "trace": self.trace,
            "trace_smoothed": self.trace_smoothed,
        }


@dataclass
class ExplainConfig:
    """Shared optimizer settings for all explainers."""

    k: float = 50.0
    epochs: int = 300
    lr: float = 0.05
    seed: int = 0
    budget_units: str = "angstrom"  # or "fraction"
    k_ramp: tuple[float, float] | None = None
    init_theta: float = 0.0
    init_omega: float = 2.0
    pg_hidden: int = 32
    pg_lr: float = 0.01
    pg_epochs: int = 100

    def __post_init__(self):
        if self.budget_units not in ("angstrom", "fraction"):
            raise ContractError("budget_units must be 'angstrom' or 'fraction'")
        if self.k <= 0.0:
            raise ContractError("sharpness k must be positive")


@dataclass
class ConsistencyGap:
    prediction_gap: float
    loss_gap: float
    prediction_soft: float
    prediction_hard: float

    @property
    def relative_gap(self) -> float:
        scale = max(abs(self.prediction_soft), abs(self.prediction_hard), 1e-8)
        return self.prediction_gap / scale


# ---------------------------------------------------------------------------
# Radius-mask machinery.

def rise_radii(theta, omega, budget: float) -> np.ndarray:
    """m = B * softmax(theta) * sigmoid(omega); sum(m) <= B by construction."""
    theta = np.asarray(theta, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    if budget <= 0.0:
        raise ContractError("budget must be positive")
    e = np.exp(theta - theta.max())
    return budget * (e / e.sum()) * expit(omega)


def resolve_budget(graph: MolecularGraph, budget_ratio: float, units: str) -> float:
    if not (0.0 < budget_ratio <= 1.0):
        raise ContractError("budget ratio must lie in (0, 1]")
    if units == "angstrom":
        return budget_ratio * float(graph.construction_radii.sum())
    return budget_ratio * graph.node_count


def effective_radii(m_r: np.ndarray, graph: MolecularGraph, units: str) -> np.ndarray:
    """Radii in angstroms fed to edge masking and extraction."""
    return m_r if units == "angstrom" else m_r * graph.construction_radii


def rise_edge_mask(radii: np.ndarray, edges: DirectedEdgeSet, k: float) -> EdgeMask:
    """Soft edge weights sigmoid(k * (rho_src - d)) over an existing edge set."""
    if k <= 0.0:
        raise ContractError("sharpness k must be positive")
    radii = np.asarray(radii, dtype=np.float64)
    if not np.all(np.isfinite(radii)):
        raise ContractError("effective radii must be finite")
    return EdgeMask.soft(expit(k * (radii[edges.src] - edges.dist)))


def rise_extract(graph: MolecularGraph, edges: DirectedEdgeSet, m_r: np.ndarray,
                 units: str = "angstrom", explainer: str = "rise") -> ExplanationResult:
    """Hard subgraph of the optimized radii: keep (i, j) iff d_ij < rho_i.

    Equivalent to building the proximity graph of the effective radii and
    intersecting it with the original edge set.
    """
    rho = effective_radii(np.asarray(m_r, dtype=np.float64), graph, units)
    keep = np.nonzero(edges.dist < rho[edges.src])[0]
    kept = edges.subset(keep)
    frac = kept.n_edges / edges.n_edges if edges.n_edges else 0.0
    return ExplanationResult(
        explainer=explainer,
        edges=kept,
        kept_index=keep,
        edges_preserved_fraction=frac,
        radii=rho,
    )


def _smoothed(trace: list[float]) -> list[float]:
    return np.minimum.accumulate(np.asarray(trace)).tolist() if trace else []


def trivial_result(explainer: str, graph: MolecularGraph, edges: DirectedEdgeSet,
                   full: bool) -> ExplanationResult:
    """Degenerate budgets: keep everything (ratio 1) or nothing (ratio 0)."""
    keep = np.arange(edges.n_edges) if full else np.arange(0)
    radii = graph.construction_radii.copy() if full else np.zeros(graph.node_count)
    return ExplanationResult(
        explainer=explainer,
        edges=edges.subset(keep),
        kept_index=keep,
        edges_preserved_fraction=1.0 if full and edges.n_edges else 0.0,
        radii=radii if explainer == "rise" else None,
        soft_values=np.ones(edges.n_edges) if full else np.zeros(edges.n_edges),
    )


def rise_optimize(params: bb.BackboneParams, graph: MolecularGraph,
                  edges: DirectedEdgeSet, target: float, budget_ratio: float,
                  config: ExplainConfig | None = None,
                  ) -> tuple[RadiusMask, ExplanationResult]:
    """Gradient descent on the squared prediction error over (theta, omega).

    The budget is structural (built into the radius construction), so the
    loss carries no size or entropy terms. Deterministic per config.
    """
    config = config if config is not None else ExplainConfig()
    n = graph.node_count
    budget = resolve_budget(graph, budget_ratio, config.budget_units)
    theta = np.full(n, float(config.init_theta))
    omega = np.full(n, float(config.init_omega))
    batch = bb.pack([graph], [edges], [target])
    opt = Adam({"theta": theta, "omega": omega}, lr=config.lr)

    trace: list[float] = []
    best_loss = np.inf
    best = (theta.copy(), omega.copy())
    for epoch in range(config.epochs):
        k = _sharpness_at(config, epoch)
        tape = ad.Tape()
        th = tape.leaf(theta, "theta")
        om = tape.leaf(omega, "omega")
        mask = _taped_soft_mask(tape, th, om, budget, graph, edges, k, config.budget_units)
        wv = bb.weights_as_constants(tape, params)
        pred = bb.taped_predictions(tape, batch, mask, wv, params)
        err = pred - tape.constant([target])
        loss = (err * err).sum()
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise OptimizationFailureError("radius optimization diverged", epoch=epoch)
        trace.append(loss_val)
        # Snapshots are comparable only at full sharpness; while ramping,
        # earlier soft losses understate the hard-extraction loss.
        k_final = config.k if config.k_ramp is None else config.k_ramp[1]
        if k >= k_final and loss_val < best_loss:
            best_loss = loss_val
            best = (theta.copy(), omega.copy())
        grads = ad.backward(tape, loss)
        opt.step(grads)

    theta, omega = best
    k_final = config.k if config.k_ramp is None else config.k_ramp[1]
    m_r = rise_radii(theta, omega, budget)
    radius_mask = RadiusMask(theta=theta, omega=omega, budget=budget,
                             sharpness=k_final, m_r=m_r)
    result = rise_extract(graph, edges, m_r, config.budget_units)
    result.trace = trace
    result.trace_smoothed = _smoothed(trace)
    rho = effective_radii(m_r, graph, config.budget_units)
    result.soft_values = rise_edge_mask(rho, edges, k_final).values
    return radius_mask, result


def _sharpness_at(config: ExplainConfig, epoch: int) -> float:
    """Fixed sharpness, or a linear ramp that plateaus at config.k for the
    final 30% of epochs."""
    if config.k_ramp is None:
        return config.k
    lo, hi = config.k_ramp
    ramp_end = max(int(0.7 * config.epochs) - 1, 1)
    frac = min(epoch / ramp_end, 1.0)
    return lo + (hi - lo) * frac


def _taped_soft_mask(tape: ad.Tape, th: ad.Var, om: ad.Var, budget: float,
                     graph: MolecularGraph, edges: DirectedEdgeSet, k: float,
                     units: str) -> ad.Var:
    shift = tape.constant(float(np.max(th.value)))  # detached max keeps exp in range
    e = (th - shift).exp()
    m_r = (e / e.sum()) * om.sigmoid() * budget
    if units == "fraction":
        m_r = m_r * tape.constant(graph.construction_radii)
    rho_e = ad.gather(m_r, edges.src)
    return ((rho_e - tape.constant(edges.dist)) * k).sigmoid()


# ---------------------------------------------------------------------------
# Shared baseline machinery.

def entropy(mask: EdgeMask) -> float:
    """Sum of binary entropies of the mask entries, with 0 ln 0 := 0."""
    m = mask.values
    out = np.zeros_like(m)
    inner = (m > 0.0) & (m < 1.0)
    mi = m[inner]
    out[inner] = -mi * np.log(mi) - (1.0 - mi) * np.log(1.0 - mi)
    return float(out.sum())


def _taped_entropy_from_values(m: ad.Var) -> ad.Var:
    # Affine clip keeps log finite when sigmoids saturate to exactly 0 or 1.
    mc = m * (1.0 - 2.0 * _ENTROPY_CLIP) + _ENTROPY_CLIP
    return (-(mc * mc.log()) - (1.0 - mc) * (1.0 - mc).log()).sum()


def topk_hard_mask(soft_values: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the top-k soft values; ties break toward smaller index."""
    n = soft_values.size
    keep = max(0, min(int(keep), n))
    order = np.lexsort((np.arange(n), -soft_values))
    return np.sort(order[:keep])


def result_from_topk(explainer: str, edges: DirectedEdgeSet, soft: np.ndarray,
                      keep: int, trace: list[float]) -> ExplanationResult:
    kept_idx = topk_hard_mask(soft, keep)
    kept = edges.subset(kept_idx)
    frac = kept.n_edges / edges.n_edges if edges.n_edges else 0.0
    return ExplanationResult(
        explainer=explainer,
        edges=kept,
        kept_index=kept_idx,
        edges_preserved_fraction=frac,
        trace=trace,
        trace_smoothed=_smoothed(trace),
        soft_values=soft,
    )


def _keep_count(edges: DirectedEdgeSet, budget_ratio: float, keep_count: int | None) -> int:
    if keep_count is not None:
        return keep_count
    if not (0.0 < budget_ratio <= 1.0):
        raise ContractError("budget ratio must lie in (0, 1]")
    return int(np.floor(budget_ratio * edges.n_edges))


def hard_mask_values(edges: DirectedEdgeSet, kept_index: np.ndarray) -> EdgeMask:
    values = np.zeros(edges.n_edges)
    values[kept_index] = 1.0
    return EdgeMask.hard(values)


# ---------------------------------------------------------------------------
# Per-edge logit baseline (transductive).

def gnnexplainer_optimize(params: bb.BackboneParams, graph: MolecularGraph,
                          edges: DirectedEdgeSet, target: float,
                          weights: BaselineLossWeights, budget_ratio: float,
                          config: ExplainConfig | None = None,
                          keep_count: int | None = None) -> ExplanationResult:
    """Free per-edge logits through a sigmoid; loss adds size and entropy terms."""
    config = config if config is not None else ExplainConfig()
    rng = np.random.default_rng(config.seed)
    logits = 0.1 * rng.standard_normal(edges.n_edges)
    batch = bb.pack([graph], [edges], [target])
    opt = Adam({"logits": logits}, lr=config.lr)
    trace: list[float] = []
    best_loss = np.inf
    best = logits.copy()
    for epoch in range(config.epochs):
        tape = ad.Tape()
        z = tape.leaf(logits, "logits")
        mask = z.sigmoid()
        loss = _baseline_loss(tape, batch, mask, z, params, target, weights)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise OptimizationFailureError("edge-logit optimization diverged", epoch=epoch)
        trace.append(loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best = logits.copy()
        opt.step(ad.backward(tape, loss))
    soft = expit(best)
    return result_from_topk("gnnexplainer", edges, soft,
                             _keep_count(edges, budget_ratio, keep_count), trace)


def _baseline_loss(tape: ad.Tape, batch: bb.PackedBatch, mask: ad.Var,
                   logits: ad.Var | None, params: bb.BackboneParams,
                   target: float, weights: BaselineLossWeights) -> ad.Var:
    wv = bb.weights_as_constants(tape, params)
    pred = bb.taped_predictions(tape, batch, mask, wv, params)
    err = pred - tape.constant([target])
    loss = (err * err).sum() * weights.lambda_pred
    if weights.lambda_size > 0.0:
        loss = loss + mask.sum() * weights.lambda_size
    if weights.lambda_ent > 0.0:
        if logits is not None:
            m = logits.sigmoid()
            ent = (m * (-logits).softplus() + (1.0 - m) * logits.softplus()).sum()
        else:
            ent = _taped_entropy_from_values(mask)
        loss = loss + ent * weights.lambda_ent
    return loss


# ---------------------------------------------------------------------------
# Node-product baseline (transductive).

def lri_bernoulli_optimize(params: bb.BackboneParams, graph: MolecularGraph,
                           edges: DirectedEdgeSet, target: float,
                           weights: BaselineLossWeights, budget_ratio: float,
                           config: ExplainConfig | None = None,
                           keep_count: int | None = None) -> ExplanationResult:
    """Per-node masks; each edge weight is the product of its endpoint masks.

    The edge value is a function of the two node masks only, regardless of
    the edge's length.
    """
    config = config if config is not None else ExplainConfig()
    rng = np.random.default_rng(config.seed)
    logits = 0.1 * rng.standard_normal(graph.node_count)
    batch = bb.pack([graph], [edges], [target])
    opt = Adam({"node_logits": logits}, lr=config.lr)
    trace: list[float] = []
    best_loss = np.inf
    best = logits.copy()
    for epoch in range(config.epochs):
        tape = ad.Tape()
        z = tape.leaf(logits, "node_logits")
        node_mask = z.sigmoid()
        mask = ad.gather(node_mask, edges.src) * ad.gather(node_mask, edges.dst)
        loss = _baseline_loss(tape, batch, mask, None, params, target, weights)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise OptimizationFailureError("node-mask optimization diverged", epoch=epoch)
        trace.append(loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best = logits.copy()
        opt.step(ad.backward(tape, loss))
    node_mask = expit(best)
    soft = lri_edge_values(node_mask, edges)
    return result_from_topk("lri_bernoulli", edges, soft,
                             _keep_count(edges, budget_ratio, keep_count), trace)


def lri_edge_values(node_mask: np.ndarray, edges: DirectedEdgeSet) -> np.ndarray:
    return node_mask[edges.src] * node_mask[edges.dst]


# ---------------------------------------------------------------------------
# Shared edge scorer baseline (inductive).

@dataclass
class EdgeScorer:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return bb.shifted_softplus(feats @ self.w1 + self.b1) @ self.w2 + float(self.b2)


def scorer_features(params: bb.BackboneParams, graph: MolecularGraph,
                     edges: DirectedEdgeSet) -> np.ndarray:
    states = bb.node_states(graph, edges, params)
    rbf = bb.rbf_expand(edges.dist, params)
    return np.concatenate([states[edges.src], states[edges.dst], rbf], axis=1)


def pgexplainer_optimize(params: bb.BackboneParams, corpus, weights: BaselineLossWeights,
                         budget_ratio: float, config: ExplainConfig | None = None,
                         keep_counts: list[int] | None = None) -> list[ExplanationResult]:
    """Train one edge scorer over the corpus, then extract per molecule.

    ``corpus`` is a list of (graph, edges, target). The scorer reads the
    concatenation of both endpoint node states and the edge's RBF features;
    its output layer starts at zero, so training begins from soft value 0.5
    everywhere.
    """
    config = config if config is not None else ExplainConfig()
    if not corpus:
        raise ContractError("scorer corpus is empty")
    scorer, trace = train_edge_scorer(params, corpus, weights, config)
    results = []
    for idx, (graph, edges, _target) in enumerate(corpus):
        soft = expit(scorer.logits(scorer_features(params, graph, edges)))
        keep = keep_counts[idx] if keep_counts is not None else None
        res = result_from_topk("pgexplainer", edges, soft,
                                _keep_count(edges, budget_ratio, keep), list(trace))
        results.append(res)
    return results


def train_edge_scorer(params: bb.BackboneParams, corpus,
                      weights: BaselineLossWeights,
                      config: ExplainConfig) -> tuple[EdgeScorer, list[float]]:
    rng = np.random.default_rng(config.seed)
    feats = [scorer_features(params, g, e) for g, e, _ in corpus]
    d_in = feats[0].shape[1]
    scorer_params = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, config.pg_hidden)),
        "b1": np.zeros(config.pg_hidden),
        "w2": np.zeros(config.pg_hidden),
        "b2": np.zeros(()),
    }
    graphs = [g for g, _, _ in corpus]
    edge_sets = [e for _, e, _ in corpus]
    targets = [y for _, _, y in corpus]
    batch = bb.pack(graphs, edge_sets, targets)
    all_feats = np.concatenate(feats, axis=0)

    opt = Adam(scorer_params, lr=config.pg_lr)
    trace: list[float] = []
    best_loss = np.inf
    best = {k: v.copy() for k, v in scorer_params.items()}
    for epoch in range(config.pg_epochs):
        tape = ad.Tape()
        sv = {k: tape.leaf(v, k) for k, v in scorer_params.items()}
        x = tape.constant(all_feats)
        z = (x @ sv["w1"] + sv["b1"]).shifted_softplus() @ sv["w2"] + sv["b2"]
        mask = z.sigmoid()
        wv = bb.weights_as_constants(tape, params)
        pred = bb.taped_predictions(tape, batch, mask, wv, params)
        err = pred - tape.constant(batch.targets)
        loss = (err * err).sum() * (weights.lambda_pred / batch.n_mols)
        if weights.lambda_size > 0.0:
            loss = loss + mask.sum() * (weights.lambda_size / batch.n_mols)
        if weights.lambda_ent > 0.0:
            m = z.sigmoid()
            ent = (m * (-z).softplus() + (1.0 - m) * z.softplus()).sum()
            loss = loss + ent * (weights.lambda_ent / batch.n_mols)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise OptimizationFailureError("edge-scorer training diverged", epoch=epoch)
        trace.append(loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best = {k: v.copy() for k, v in scorer_params.items()}
        opt.step(ad.backward(tape, loss))
    return EdgeScorer(**best), trace


# ---------------------------------------------------------------------------
# Soft-vs-hard discrepancy.

def consistency_gap(params: bb.BackboneParams, graph: MolecularGraph,
                    edges: DirectedEdgeSet, soft: EdgeMask, hard: EdgeMask,
                    target: float) -> ConsistencyGap:
    """Absolute prediction gap between the soft and hard forwards, and the
    induced squared-loss gap against the target."""
    pred_soft = bb.forward(graph, edges, soft, params).value
    pred_hard = bb.forward(graph, edges, hard, params).value
    return ConsistencyGap(
        prediction_gap=abs(pred_soft - pred_hard),
        loss_gap=abs((pred_soft - target) ** 2 - (pred_hard - target) ** 2),
        prediction_soft=pred_soft,
        prediction_hard=pred_hard,
    )
