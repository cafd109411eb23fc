"""Molecule ingestion (XYZ), synthetic corpus generation, and splitting.

Synthetic molecules are random valence-respecting trees of heavy atoms
decorated with hydrogens, embedded in 3D with tabulated bond lengths plus
2% jitter. The regression target is a pair potential that decays as
d^-p, with separate weights for bonded and non-bonded pairs, so the true
signal concentrates on short edges and every bond is ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ContractError, GenerationError, ParseError
from .geometry import MolecularGraph

DEFAULT_ELEMENTS: tuple[str, ...] = ("H", "C", "N", "O")

# Equilibrium bond lengths in angstroms for unordered element pairs.
DEFAULT_BOND_LENGTHS: dict[tuple[str, str], float] = {
    ("H", "H"): 0.740,
    ("C", "H"): 1.095,
    ("C", "C"): 1.530,
    ("C", "N"): 1.470,
    ("C", "O"): 1.430,
    ("H", "N"): 1.010,
    ("H", "O"): 0.960,
    ("N", "N"): 1.450,
    ("N", "O"): 1.400,
    ("O", "O"): 1.480,
}

_VALENCE = {"H": 1, "C": 4, "N": 3, "O": 2}

# Non-bonded atoms keep physical distances: pairs sharing a bonded neighbor
# (1-3 pairs) must stay near the tetrahedral-angle separation their bond
# lengths imply (geminal H-H ~1.78, vicinal C..H ~2.15), everything further
# apart stays beyond 1.9. Bonded distances (<= 1.57 jittered) therefore
# occupy a band disjoint from all non-bonded distances.
MIN_NONBONDED_SEPARATION = 1.69
MIN_DISTANT_SEPARATION = 1.90
ANGLE_FLOOR_FRACTION = 0.93  # of the ideal 109.47-degree 1-3 distance


def bond_length(table: dict, a: str, b: str) -> float:
    key = (a, b) if (a, b) in table else (b, a)
    if key not in table:
        raise ContractError(f"no bond length tabulated for pair {a}-{b}")
    return table[key]


def one_hot_features(labels, elements=DEFAULT_ELEMENTS) -> np.ndarray:
    feats = np.zeros((len(labels), len(elements)))
    for i, lbl in enumerate(labels):
        feats[i, elements.index(lbl)] = 1.0
    return feats


# ---------------------------------------------------------------------------
# XYZ interchange.

@dataclass
class XyzRecord:
    count: int
    comment: str
    atoms: list[tuple[str, float, float, float]]


def parse_xyz_record(text: str) -> XyzRecord:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing atom count", line=1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"atom count is not an integer: {lines[0].strip()!r}", line=1)
    if count < 1:
        raise ParseError("atom count must be positive", line=1)
    if len(lines) < 2:
        raise ParseError("missing comment line", line=2)
    comment = lines[1]
    atoms = []
    for k in range(count):
        lineno = k + 3
        if lineno > len(lines) or not lines[lineno - 1].strip():
            raise ParseError(f"expected {count} atom lines, missing atom line {k + 1}",
                             line=lineno)
        parts = lines[lineno - 1].split()
        if len(parts) != 4:
            raise ParseError(f"expected 'Symbol x y z', got {lines[lineno - 1]!r}", line=lineno)
        sym = parts[0]
        try:
            xyz = tuple(float(p) for p in parts[1:])
        except ValueError:
            raise ParseError(f"unparseable coordinate in {lines[lineno - 1]!r}", line=lineno)
        if not all(np.isfinite(xyz)):
            raise ParseError("coordinates must be finite", line=lineno)
        atoms.append((sym, *xyz))
    return XyzRecord(count=count, comment=comment, atoms=atoms)


def parse_xyz(text: str, cutoff: float = 5.0,
              elements: tuple[str, ...] = DEFAULT_ELEMENTS) -> MolecularGraph:
    """Graph from XYZ text: one-hot features, uniform construction radii."""
    rec = parse_xyz_record(text)
    labels = []
    for k, (sym, *_xyz) in enumerate(rec.atoms):
        if sym not in elements:
            raise ParseError(f"unknown element {sym!r}", line=k + 3)
        labels.append(sym)
    positions = np.asarray([a[1:] for a in rec.atoms], dtype=np.float64)
    return MolecularGraph(
        positions=positions,
        construction_radii=np.full(rec.count, float(cutoff)),
        node_features=one_hot_features(labels, elements),
        atom_labels=labels,
    )


def write_xyz(graph: MolecularGraph, comment: str = "") -> str:
    """Six-decimal XYZ text; parse(write(g)) preserves coordinates to 1e-6."""
    lines = [str(graph.node_count), comment]
    for lbl, (x, y, z) in zip(graph.atom_labels, graph.positions):
        lines.append(f"{lbl} {x:.6f} {y:.6f} {z:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic corpus.

@dataclass
class SyntheticCorpusConfig:
    count: int = 500
    atom_range: tuple[int, int] = (5, 12)
    bond_lengths: dict = field(default_factory=lambda: dict(DEFAULT_BOND_LENGTHS))
    bonded_weight: float = 1.0
    # Constant formation term per bond: bonded pairs contribute
    # w_b * (offset + d^-p), a Morse-like well depth plus distance decay,
    # keeping every bond well above the non-bonded background.
    bond_offset: float = 1.0
    nonbonded_weight: float = 0.25
    decay_exponent: float = 6.0
    seed: int = 0
    cutoff: float = 5.0
    heavy_fraction: float = 1 / 3
    oxygen_fraction: float = 0.15
    jitter: float = 0.02

    def __post_init__(self):
        if self.decay_exponent < 1.0:
            raise ContractError("decay exponent must be at least 1")
        if any(v <= 0.0 for v in self.bond_lengths.values()):
            raise ContractError("bond lengths must be positive")
        if self.count < 0:
            raise ContractError("count must be nonnegative")
        lo, hi = self.atom_range
        if lo < 2 or hi < lo:
            raise ContractError("atom range must satisfy 2 <= lo <= hi")


def pair_energy_map(positions: np.ndarray, bonds: set[tuple[int, int]],
                    config: "SyntheticCorpusConfig") -> dict[tuple[int, int], float]:
    """Energy of every unordered atom pair.

    Bonded pairs contribute w_b * (offset + d^-p); non-bonded pairs w_n * d^-p.
    """
    n = positions.shape[0]
    p = config.decay_exponent
    out: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(positions[i] - positions[j]))
            if (min(i, j), max(i, j)) in bonds:
                out[(i, j)] = config.bonded_weight * (config.bond_offset + d ** (-p))
            else:
                out[(i, j)] = config.nonbonded_weight * d ** (-p)
    return out


def pair_potential_target(positions: np.ndarray, bonds: set[tuple[int, int]],
                          config: "SyntheticCorpusConfig") -> float:
    """Y = sum_bonded w_b d^-p + sum_nonbonded w_n d^-p over all atom pairs."""
    return float(sum(pair_energy_map(positions, bonds, config).values()))


def _tree_topology(n: int, rng: np.random.Generator, heavy_fraction: float,
                   oxygen_fraction: float) -> tuple[list[str], list[tuple[int, int]]]:
    """Random valence-respecting tree: heavy skeleton first, hydrogens after."""
    m = max(1, int(round(n * heavy_fraction)))
    while True:  # grow the skeleton until it can hold the remaining hydrogens
        labels = []
        for k in range(m):
            lbl = "O" if (k > 0 and rng.random() < oxygen_fraction) else "C"
            labels.append(lbl)
        capacity = sum(_VALENCE[lbl] for lbl in labels) - 2 * (m - 1)
        if capacity >= n - m or m >= n:
            break
        m += 1
    m = min(m, n)
    labels = labels[:m]

    free = [_VALENCE[lbl] for lbl in labels]
    bonds: list[tuple[int, int]] = []
    for k in range(1, m):
        hosts = [i for i in range(k) if free[i] > 0]
        host = int(rng.choice(hosts))
        bonds.append((host, k))
        free[host] -= 1
        free[k] -= 1
    for _ in range(m, n):
        # The capacity check above guarantees an open heavy valence here.
        hosts = [i for i in range(len(labels)) if labels[i] != "H" and free[i] > 0]
        labels.append("H")
        free.append(1)
        host = int(rng.choice(hosts))
        bonds.append((host, len(labels) - 1))
        free[host] -= 1
        free[-1] -= 1
    return labels, bonds


def _place_atoms(labels, bonds, rng: np.random.Generator,
                 config: SyntheticCorpusConfig) -> np.ndarray | None:
    """Embed the tree in 3D; None when a placement collides repeatedly."""
    n = len(labels)
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for a, b in bonds:
        neighbors[a].append(b)
        neighbors[b].append(a)

    pos = np.zeros((n, 3))
    placed = [0]
    # Parent of each atom in placement (BFS) order.
    parent = {0: None}
    queue = [0]
    order = []
    while queue:
        v = queue.pop(0)
        order.append(v)
        for u in neighbors[v]:
            if u not in parent:
                parent[u] = v
                queue.append(u)

    for v in order[1:]:
        par = parent[v]
        length = bond_length(config.bond_lengths, labels[par], labels[v])
        length *= 1.0 + config.jitter * rng.uniform(-1.0, 1.0)
        anchored = [u for u in neighbors[par] if u in placed]
        others = [u for u in placed if u != par]
        floors = np.array([_separation_floor(u, v, par, labels, neighbors, config)
                           for u in others]) if others else np.zeros(0)
        units = [(pos[u] - pos[par]) / np.linalg.norm(pos[u] - pos[par])
                 for u in anchored]
        best = None
        best_margin = -np.inf
        for direction in _slot_directions(units, rng):
            candidate = pos[par] + length * direction
            if others:
                seps = np.linalg.norm(candidate - pos[others], axis=1)
                margin = float((seps - floors).min())
            else:
                margin = np.inf
            if margin > best_margin:
                best_margin = margin
                best = candidate
        if best is None or best_margin < 0.0:
            return None
        pos[v] = best
        placed.append(v)
    return pos


_COS_TET = -1.0 / 3.0  # cosine of the tetrahedral angle


def _orthonormal_pair(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probe = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, probe)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(axis, e1)


def _slot_directions(units: list[np.ndarray], rng: np.random.Generator):
    """Unit directions completing a near-tetrahedral shell around a parent.

    Exact ring/slot construction given the already-placed neighbor
    directions, with a few degrees of jitter; crowded parents therefore
    always see their remaining slots.
    """
    jitter = 0.06
    if not units:
        d = rng.normal(size=3)
        yield d / np.linalg.norm(d)
        return
    if len(units) == 1:
        u = units[0]
        e1, e2 = _orthonormal_pair(u)
        sin_t = np.sqrt(1.0 - _COS_TET ** 2)
        for _ in range(24):
            phi = rng.uniform(0.0, 2.0 * np.pi)
            d = _COS_TET * u + sin_t * (np.cos(phi) * e1 + np.sin(phi) * e2)
            d = d + jitter * rng.normal(size=3)
            yield d / np.linalg.norm(d)
        return
    if len(units) == 2:
        bisect = -(units[0] + units[1])
        nb = np.linalg.norm(bisect)
        if nb > 1e-9:
            b = bisect / nb
            t = np.cross(units[0], units[1])
            nt = np.linalg.norm(t)
            if nt > 1e-9:
                t = t / nt
                alpha = _COS_TET / float(b @ units[0])
                alpha = np.clip(alpha, -1.0, 1.0)
                beta = np.sqrt(max(1.0 - alpha * alpha, 0.0))
                for sign in (1.0, -1.0):
                    for _ in range(8):
                        d = alpha * b + sign * beta * t + jitter * rng.normal(size=3)
                        yield d / np.linalg.norm(d)
                return
    # Three (or degenerate) neighbors: the single remaining slot.
    away = -np.sum(units, axis=0)
    norm = np.linalg.norm(away)
    base = away / norm if norm > 1e-9 else rng.normal(size=3)
    base = base / np.linalg.norm(base)
    for _ in range(16):
        d = base + jitter * rng.normal(size=3)
        yield d / np.linalg.norm(d)


def _separation_floor(u: int, v: int, par: int, labels, neighbors, config) -> float:
    if u in neighbors[par]:
        # 1-3 pair through the shared neighbor: stay near the tetrahedral
        # separation the two bond lengths imply.
        a = bond_length(config.bond_lengths, labels[par], labels[v])
        b = bond_length(config.bond_lengths, labels[par], labels[u])
        ideal = np.sqrt(a * a + b * b + (2.0 / 3.0) * a * b)
        return max(ANGLE_FLOOR_FRACTION * ideal, MIN_NONBONDED_SEPARATION)
    return MIN_DISTANT_SEPARATION


def generate_molecule(rng: np.random.Generator,
                      config: SyntheticCorpusConfig) -> tuple[MolecularGraph, float]:
    lo, hi = config.atom_range
    n = int(rng.integers(lo, hi + 1))
    for _ in range(100):
        labels, bonds = _tree_topology(n, rng, config.heavy_fraction,
                                       config.oxygen_fraction)
        positions = _place_atoms(labels, bonds, rng, config)
        if positions is not None:
            truth = {(min(a, b), max(a, b)) for a, b in bonds}
            energies = pair_energy_map(positions, truth, config)
            graph = MolecularGraph(
                positions=positions,
                construction_radii=np.full(len(labels), config.cutoff),
                node_features=one_hot_features(labels),
                atom_labels=list(labels),
                bond_truth=truth,
                pair_energies=energies,
            )
            return graph, float(sum(energies.values()))
    raise GenerationError(f"could not place a molecule of {n} atoms in 100 attempts")


def generate_synthetic_corpus(config: SyntheticCorpusConfig) -> list[tuple[MolecularGraph, float]]:
    """Deterministic corpus of (graph, target) pairs for one seed."""
    rng = np.random.default_rng(config.seed)
    return [generate_molecule(rng, config) for _ in range(config.count)]


# ---------------------------------------------------------------------------
# Splitting.

def split_corpus(corpus, fractions, seed: int):
    """Disjoint, exhaustive, seed-deterministic split by largest remainder."""
    fractions = [float(f) for f in fractions]
    if any(f < 0.0 for f in fractions):
        raise ContractError("fractions must be nonnegative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions sum to {sum(fractions)}, expected 1")
    n = len(corpus)
    ideal = [f * n for f in fractions]
    sizes = [int(np.floor(x)) for x in ideal]
    remainders = sorted(range(len(fractions)),
                        key=lambda k: (-(ideal[k] - sizes[k]), k))
    for k in remainders[: n - sum(sizes)]:
        sizes[k] += 1
    order = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for s in sizes:
        out.append([corpus[i] for i in order[start:start + s]])
        start += s
    return tuple(out)


# ---------------------------------------------------------------------------
# Corpus persistence: a directory of XYZ files plus one JSON manifest.

MANIFEST_VERSION = 1


def save_corpus(corpus, directory, config: SyntheticCorpusConfig | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    molecules = []
    for i, (graph, target) in enumerate(corpus):
        name = f"mol_{i:05d}.xyz"
        (directory / name).write_text(write_xyz(graph, comment=f"molecule {i}"))
        entry = {
            "file": name,
            "target": float(target),
            "n_atoms": graph.node_count,
            "bond_truth": sorted([list(p) for p in graph.bond_truth])
            if graph.bond_truth is not None else None,
            "cutoff": float(graph.construction_radii[0]),
        }
        molecules.append(entry)
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "config": _config_doc(config),
        "molecules": molecules,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def _config_doc(config: SyntheticCorpusConfig | None):
    if config is None:
        return None
    doc = asdict(config)
    doc["bond_lengths"] = {f"{a}-{b}": v for (a, b), v in config.bond_lengths.items()}
    doc["atom_range"] = list(config.atom_range)
    return doc


def load_corpus(directory) -> list[tuple[MolecularGraph, float]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise ContractError(f"unsupported manifest version {manifest.get('schema_version')}")
    gen_config = _config_from_doc(manifest.get("config"))
    corpus = []
    for entry in manifest["molecules"]:
        text = (directory / entry["file"]).read_text()
        graph = parse_xyz(text, cutoff=entry["cutoff"])
        if entry.get("bond_truth") is not None:
            graph.bond_truth = {(min(a, b), max(a, b)) for a, b in entry["bond_truth"]}
            if gen_config is not None:
                graph.pair_energies = pair_energy_map(graph.positions,
                                                      graph.bond_truth, gen_config)
        corpus.append((graph, float(entry["target"])))
    return corpus


def _config_from_doc(doc) -> SyntheticCorpusConfig | None:
    if not doc:
        return None
    doc = dict(doc)
    doc["bond_lengths"] = {tuple(k.split("-")): v
                           for k, v in doc["bond_lengths"].items()}
    doc["atom_range"] = tuple(doc["atom_range"])
    return SyntheticCorpusConfig(**doc)
