"""Small-scale empirical checks of the region-counting and S-REC results.

Region counts are exact: each open cell of a hyperplane arrangement is a
sign pattern whose strict inequalities are jointly feasible, decided by
linear programming.  For simple arrangements a second, independent count
collects the 2^k cells around every vertex.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb

import numpy as np
from scipy.optimize import linprog
from scipy.stats import chi2

from .data import PlantedInstance, sparse_latents
from .errors import BudgetError, ConfigError
from .models import GeneratorModel, as_rng, build_linear_sensor, gen_forward
from .pml import PmlConfig, recover
from . import seeding

DEGENERACY_TOL = 1e-9
FEASIBILITY_TOL = 1e-9
EXACT_MAX_H = 12
RESTRICTED_BUDGET = 1 << 20


@dataclass
class ArrangementSpec:
    """Hyperplanes ``normals[i] . x = offsets[i]`` in R^k."""

    normals: np.ndarray
    offsets: np.ndarray
    s: int | None = None

    @property
    def k(self):
        return self.normals.shape[1]

    @property
    def h(self):
        return self.normals.shape[0]

    def restrict(self, coords):
        """The arrangement seen inside the coordinate subspace ``coords``."""
        return ArrangementSpec(self.normals[:, list(coords)], self.offsets, None)


def general_position_count(h, k):
    """Number of regions cut by h generic hyperplanes in R^k."""
    return sum(comb(h, i) for i in range(min(h, k) + 1))


def restricted_bound(k, s, h):
    """C(k, s) * sum_{i<=s} C(h, i): regions summed over coordinate s-subspaces."""
    return comb(k, s) * general_position_count(h, s)


def is_simple(spec: ArrangementSpec, tol=DEGENERACY_TOL):
    """General position: any <=k normals independent, no k+1 planes concurrent."""
    A, b = spec.normals, spec.offsets
    h, k = A.shape
    if h <= k:
        sv = np.linalg.svd(A, compute_uv=False)
        return h == 0 or sv[-1] > tol
    for rows in itertools.combinations(range(h), k):
        if abs(np.linalg.det(A[list(rows)])) < tol:
            return False
    aug = np.hstack([A, -b[:, None]])
    for rows in itertools.combinations(range(h), k + 1):
        if abs(np.linalg.det(aug[list(rows)])) < tol:
            return False
    return True


def random_arrangement(k, h, s=None, seed=None, restricted=False, max_tries=1000):
    """Gaussian hyperplanes, resampled until simple.

    With ``restricted`` every coordinate s-subspace restriction must be
    simple as well.
    """
    rng = as_rng(seed)
    for _ in range(max_tries):
        spec = ArrangementSpec(rng.standard_normal((h, k)), rng.standard_normal(h), s)
        if not is_simple(spec):
            continue
        if restricted and s is not None and not all(
            is_simple(spec.restrict(c)) for c in itertools.combinations(range(k), s)
        ):
            continue
        return spec
    raise RuntimeError("could not sample a simple arrangement")


def _interior_point(A, b, signs):
    """Point strictly inside {x : signs_i (A_i x - b_i) > 0}, or None."""
    k = A.shape[1]
    # maximise t  s.t.  -signs_i (A_i x - b_i) + t <= 0,  t <= 1
    A_ub = np.hstack([-(signs[:, None] * A), np.ones((len(signs), 1))])
    b_ub = -signs * b
    c = np.zeros(k + 1)
    c[-1] = -1.0
    bounds = [(None, None)] * k + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0 or -res.fun <= FEASIBILITY_TOL:
        return None
    return res.x[:k]


def enumerate_cells(spec: ArrangementSpec):
    """Sign patterns (tuples of +/-1) of all nonempty open cells."""
    A, b = spec.normals, spec.offsets
    h, k = A.shape
    if h == 0:
        return [()]
    # depth-first over hyperplanes; the parent's interior point certifies one child
    cells = []
    stack = [((), np.zeros(k))]
    while stack:
        prefix, point = stack.pop()
        j = len(prefix)
        if j == h:
            cells.append(prefix)
            continue
        side = A[j] @ point - b[j]
        for sgn in (1.0, -1.0):
            signs = np.array(prefix + (sgn,))
            if side * sgn > FEASIBILITY_TOL and _strictly_inside(A[:j + 1], b[:j + 1], signs, point):
                stack.append((prefix + (sgn,), point))
                continue
            p = _interior_point(A[:j + 1], b[:j + 1], signs)
            if p is not None:
                stack.append((prefix + (sgn,), p))
    return cells


def _strictly_inside(A, b, signs, x):
    return bool(np.all(signs * (A @ x - b) > FEASIBILITY_TOL))


def count_regions_exact(spec: ArrangementSpec, max_h=EXACT_MAX_H):
    """Exact number of open cells; refuses when k > 3 and h > ``max_h``."""
    if spec.k > 3 and spec.h > max_h:
        raise BudgetError(
            f"exact enumeration needs k <= 3 or h <= {max_h} (2^h sign patterns); got k={spec.k}, h={spec.h}"
        )
    return len(enumerate_cells(spec))


def count_regions_vertices(spec: ArrangementSpec):
    """Independent count for simple arrangements with h >= k.

    Every cell of such an arrangement has a vertex, and each vertex touches
    exactly 2^k cells (all sign choices for its k hyperplanes).
    """
    A, b = spec.normals, spec.offsets
    h, k = A.shape
    if h < k:
        raise ConfigError("vertex count needs h >= k")
    cells = set()
    for rows in itertools.combinations(range(h), k):
        rows = list(rows)
        v = np.linalg.solve(A[rows], b[rows])
        base = np.sign(A @ v - b)
        for signs in itertools.product((1.0, -1.0), repeat=k):
            pattern = base.copy()
            pattern[rows] = signs
            cells.add(tuple(pattern))
    return len(cells)


def count_regions_restricted(spec: ArrangementSpec, s=None, budget=RESTRICTED_BUDGET):
    """Total region count over all C(k, s) coordinate s-subspaces."""
    s = spec.s if s is None else s
    if s is None or not 0 <= s <= spec.k:
        raise ConfigError(f"restricted count needs 0 <= s <= k, got s={s}")
    if comb(spec.k, s) * 2 ** spec.h > budget:
        raise BudgetError(
            f"C({spec.k},{s}) * 2^{spec.h} = {comb(spec.k, s) * 2 ** spec.h} exceeds budget {budget}"
        )
    return sum(len(enumerate_cells(spec.restrict(c))) for c in itertools.combinations(range(spec.k), s))


# -- generator linear pieces ------------------------------------------------------

@dataclass
class PiecesReport:
    patterns: int
    ceiling: float
    samples: int
    k: int
    s: int
    h: int
    t: int
    d: int

    @property
    def ok(self):
        return self.patterns <= self.ceiling


def activation_patterns(G: GeneratorModel, Z):
    """Piece index of every hidden unit, one row per input."""
    h = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    cols = []
    for W, b in zip(G.weights[:-1], G.biases[:-1]):
        pre = h @ W.T + b
        cols.append(G.activation.piece_index(pre))
        h = G.activation(pre)
    if not cols:
        return np.zeros((h.shape[0], 0), dtype=np.int64)
    return np.hstack(cols)


def pieces_ceiling(k, s, h, t, d, const=1.0):
    """const * (k h t / s)^(s d)."""
    return const * (k * h * t / s) ** (s * d)


def count_generator_pieces(G: GeneratorModel, s, samples=20000, box=3.0, seed=None, const=1.0):
    """Distinct activation patterns hit by random s-sparse inputs.

    A lower bound on the number of linear pieces of G restricted to
    s-sparse latents; compared against the ceiling with ``d`` = number of
    activation layers and ``h`` = widest hidden layer.
    """
    rng = as_rng(seed)
    k = G.k
    if not 1 <= s <= k:
        raise ConfigError(f"s={s} outside [1, {k}]")
    Z = np.zeros((samples, k))
    for i in range(samples):
        supp = rng.choice(k, size=s, replace=False)
        Z[i, supp] = rng.uniform(-box, box, size=s)
    pats = activation_patterns(G, Z)
    count = len({row.tobytes() for row in pats}) if pats.shape[1] else 1
    hidden = G.layer_dims[1:-1]
    d = len(hidden)
    h = max(hidden) if hidden else 1
    ceiling = pieces_ceiling(k, s, h, G.t, max(d, 1), const) if d else 1.0
    return PiecesReport(count, ceiling, samples, k, s, h, G.t, d)


def first_layer_arrangement(G: GeneratorModel):
    """Hyperplanes W_j z + b_j = breakpoint for every first-layer unit and breakpoint."""
    W, b = G.weights[0], G.biases[0]
    normals, offsets = [], []
    for bp in G.activation.breakpoints:
        normals.append(W)
        offsets.append(bp - b)
    return ArrangementSpec(np.vstack(normals), np.concatenate(offsets))


# -- S-REC Monte-Carlo -------------------------------------------------------------

@dataclass
class SrecReport:
    m: int
    alpha: float
    gamma_target: float
    trials: int
    violations: int
    empirical_rate: float
    std_err: float
    bound_rate: float
    bound_note: str = "single-pair violation probability P(chi2_m / m < (1-alpha)^2)"


def srec_violations(A, X1, X2, gamma, delta=0.0):
    """Boolean per pair: ||A(x1 - x2)|| < gamma ||x1 - x2|| - delta.

    ``A`` is (m, n) shared by all pairs or (P, m, n), one matrix per pair.
    """
    U = np.atleast_2d(X1) - np.atleast_2d(X2)
    AU = U @ A.T if A.ndim == 2 else np.einsum("pmn,pn->pm", A, U)
    return np.linalg.norm(AU, axis=1) < gamma * np.linalg.norm(U, axis=1) - delta


def single_pair_violation_prob(m, alpha):
    """Exact P(||Au|| < (1-alpha)||u||) for A ~ N(0, 1/m) and any fixed u != 0."""
    return float(chi2.cdf(m * (1.0 - alpha) ** 2, df=m))


def verify_srec(G: GeneratorModel, s, m, alpha, trials=10000, seed=0, delta=0.0, chunk=1000):
    """Violation rate of S-REC(S_{s,G}, 1 - alpha, delta) over fresh A per trial."""
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    rng = as_rng(seed)
    gamma = 1.0 - alpha
    n = G.n
    violations = 0
    done = 0
    while done < trials:
        B = min(chunk, trials - done)
        X1 = gen_forward(G, sparse_latents(B, G.k, s, rng)).value
        X2 = gen_forward(G, sparse_latents(B, G.k, s, rng)).value
        A = rng.standard_normal((B, m, n)) / np.sqrt(m)
        violations += int(np.sum(srec_violations(A, X1, X2, gamma, delta)))
        done += B
    p = violations / trials
    return SrecReport(m, alpha, gamma, trials, violations, p, float(np.sqrt(p * (1 - p) / trials)),
                      single_pair_violation_prob(m, alpha))


def srec_sweep(G, s, m_list, alpha, trials=10000, seed=0, threads=1):
    """One report per m; each m has its own pre-split stream."""
    def run(m):
        return verify_srec(G, s, m, alpha, trials, seeding.stream(seed, "verify", m))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(run, m_list))
    return [run(m) for m in m_list]


def nonincreasing_within(values, errors, z=2.0):
    """values[i+1] <= values[i] + z * combined standard error, for all i."""
    for i in range(len(values) - 1):
        tol = z * np.hypot(errors[i], errors[i + 1])
        if values[i + 1] > values[i] + tol:
            return False
    return True


# -- sample complexity ---------------------------------------------------------------

@dataclass
class SweepRow:
    m: int
    median_rel_err: float
    q25: float
    q75: float
    mean_rel_err: float
    std_err: float
    instances: int


def relative_errors(planted: PlantedInstance, m, cfg: PmlConfig, instances=30, restarts=3, seed=0):
    """Relative recovery error ||x_hat - x|| / ||x|| for ``instances`` signals."""
    errs = np.empty(instances)
    for i in range(instances):
        x = planted.signals[i % len(planted.signals)]
        A = build_linear_sensor(m, planted.n, seeding.stream(seed, "sensor", m, i))
        y = A.matrix @ x
        rec = recover(y, planted.generator, A, cfg, restarts=restarts,
                      rng=seeding.stream(seed, "latent", m, i))
        errs[i] = np.linalg.norm(rec.x - x) / np.linalg.norm(x)
    return errs


def sample_complexity_sweep(planted: PlantedInstance, m_list, cfg: PmlConfig, instances=30,
                            restarts=3, seed=0, threads=1):
    def run(m):
        e = relative_errors(planted, m, cfg, instances, restarts, seed)
        q25, med, q75 = np.percentile(e, [25, 50, 75])
        return SweepRow(m, float(med), float(q25), float(q75), float(e.mean()),
                        float(e.std() / np.sqrt(len(e))), len(e))

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(run, m_list))
    return [run(m) for m in m_list]


def recovery_config(s, T=500, beta=0.1, beta_decay=0.995):
    """Inner-loop settings for recovery sweeps on small planted generators."""
    return PmlConfig(s=s, T=T, beta=beta, beta_decay=beta_decay, t_eval=T)
