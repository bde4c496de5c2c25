"""Tail scores: difficulty, spatial/temporal rarity, their combination, LDS weights."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import RngStream
from .scene import Scenario, normalize_frame

MODELS_FORMAT = "cdk-rarity"
MODELS_VERSION = 1
SCORE_COLUMNS = ("id", "S_d", "S_rs", "S_rt", "S_r", "S", "S_tilde")


# ---------------------------------------------------------------------------
# Difficulty: constant-velocity Kalman predictor


def cv_kalman_forecast(positions: np.ndarray, mask: np.ndarray, t_fut: int, dt: float,
                       process_noise: float = 0.5, measurement_noise: float = 0.1) -> np.ndarray:
    """Filter [x, y, vx, vy] over the observed window, then roll forward ``t_fut`` steps.

    The state starts from the first two valid observations, so an exactly
    constant-velocity track yields zero innovations and an exact forecast.
    """
    valid = np.flatnonzero(mask)
    if valid.size == 0:
        raise ValueError("no valid observation")
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    q = process_noise
    Q = q * np.array([[dt**4 / 4, 0, dt**3 / 2, 0], [0, dt**4 / 4, 0, dt**3 / 2],
                      [dt**3 / 2, 0, dt**2, 0], [0, dt**3 / 2, 0, dt**2]])
    H = np.eye(2, 4)
    R = measurement_noise * np.eye(2)

    t0 = valid[0]
    x = np.zeros(4)
    x[:2] = positions[t0]
    P = np.diag([measurement_noise, measurement_noise, 1e2, 1e2])
    start = t0 + 1
    if valid.size >= 2:
        t1 = valid[1]
        x[:2] = positions[t1]
        x[2:] = (positions[t1] - positions[t0]) / ((t1 - t0) * dt)
        vv = 2 * measurement_noise / ((t1 - t0) * dt) ** 2
        P = np.diag([measurement_noise, measurement_noise, vv, vv])
        start = t1 + 1
    for t in range(start, len(mask)):
        x = F @ x
        P = F @ P @ F.T + Q
        if mask[t]:
            innov = positions[t] - H @ x
            S = H @ P @ H.T + R
            K = np.linalg.solve(S, H @ P).T
            x = x + K @ innov
            P = (np.eye(4) - K @ H) @ P
    # roll forward from the last observed step, not the last valid one
    out = np.zeros((t_fut, 2))
    for k in range(t_fut):
        x = F @ x
        out[k] = x[:2]
    return out


def difficulty_score(scenario: Scenario, process_noise: float = 0.5,
                     measurement_noise: float = 0.1) -> float:
    """ADE of the constant-velocity Kalman forecast against the ground-truth future."""
    if scenario.future is None:
        raise ValueError(f"scenario {scenario.id!r}: no future for difficulty score")
    tgt = scenario.target
    pred = cv_kalman_forecast(tgt.positions, tgt.mask, scenario.t_fut, 1.0 / scenario.hz,
                              process_noise, measurement_noise)
    return float(np.linalg.norm(pred - scenario.future, axis=1).mean())


# ---------------------------------------------------------------------------
# Gaussian mixture via EM


@dataclass
class GmmModel:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K, D]
    covariances: np.ndarray  # [K, D, D]
    log_likelihoods: list = field(default_factory=list)  # mean log-lik per EM iteration

    @property
    def k(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GmmModel":
        return cls(np.asarray(d["weights"], dtype=float), np.asarray(d["means"], dtype=float),
                   np.asarray(d["covariances"], dtype=float))


def _component_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x_n; mu_k, Sigma_k) as [N, K]."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    for k, (mu, cov) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(cov)
        z = np.linalg.solve(L, (x - mu).T)
        maha = (z * z).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(L)).sum()
        out[:, k] = -0.5 * (d * math.log(2 * math.pi) + logdet + maha)
    return out


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _kmeans_pp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    centers = [x[gen.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        total = d2.sum()
        idx = gen.integers(len(x)) if total <= 0 else gen.choice(len(x), p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0) + 1e-300
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    d = x.shape[1]
    covs = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = x - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg * np.eye(d)
    return weights, means, covs


def fit_gmm(points: np.ndarray, k: int, rng: RngStream, max_iter: int = 200, tol: float = 1e-8,
            reg: float = 1e-6) -> GmmModel:
    """EM from a k-means++ start; stops when the mean log-likelihood gain drops below ``tol``."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if d < 1 or n <= k:
        raise ValueError(f"need N > K_g (N={n}, K_g={k})")
    if np.all(x == x[0]):
        raise ValueError("degenerate input: all points identical")
    gen = rng.numpy()
    centers = _kmeans_pp(x, k, gen)
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    weights, means, covs = _m_step(x, resp, reg)
    # clusters left with < 2 points borrow the global covariance
    glob = np.cov(x.T, bias=True).reshape(d, d) + reg * np.eye(d)
    counts = resp.sum(axis=0)
    for j in range(k):
        if counts[j] < 2:
            covs[j] = glob
    history = []
    for _ in range(max_iter):
        logp = _component_logpdf(x, means, covs) + np.log(weights)
        ll = _logsumexp(logp, axis=1)
        history.append(float(ll.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(logp - ll[:, None])
        nk = resp.sum(axis=0)
        keep = nk >= d + 1
        if not keep.all() and keep.any():
            # a component starved below d + 1 points collapses onto them and
            # would hand its outliers the highest density; drop it and restart
            # the likelihood trace for the reduced mixture
            sub = logp[:, keep]
            resp = np.exp(sub - _logsumexp(sub, axis=1)[:, None])
            history = []
        weights, means, covs = _m_step(x, resp, reg)
    return GmmModel(weights, means, covs, history)


def gmm_nll(model: GmmModel, x) -> np.ndarray | float:
    """-log sum_k w_k N(x; mu_k, Sigma_k); x is [D] (scalar result) or [N, D]."""
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = arr[None] if single else arr
    logp = _component_logpdf(arr, model.means, model.covariances) + np.log(model.weights)
    nll = -_logsumexp(logp, axis=1)
    return float(nll[0]) if single else nll


def gmm_bic(model: GmmModel, points: np.ndarray) -> float:
    x = np.asarray(points, dtype=float)
    n, d = x.shape
    p = (model.k - 1) + model.k * d + model.k * d * (d + 1) / 2
    return float(2.0 * gmm_nll(model, x).sum() + p * math.log(n))


def select_gmm_bic(points, candidates: Sequence[int], rng: RngStream, **kw) -> GmmModel:
    best = None
    for k in candidates:
        if len(points) <= k:
            continue
        m = fit_gmm(points, k, rng.substream(k), **kw)
        bic = gmm_bic(m, np.asarray(points, dtype=float))
        if best is None or bic < best[0]:
            best = (bic, m)
    if best is None:
        raise ValueError("no candidate component count fits the data size")
    return best[1]


# ---------------------------------------------------------------------------
# Functional PCA on uniformly sampled curves


@dataclass
class FpcaBasis:
    mean: np.ndarray  # [2, T]
    components: list  # per coordinate: [n_c, T], rows orthonormal
    ratios: list  # per coordinate: explained-variance ratio of each retained component
    total_variance: np.ndarray  # [2]

    @property
    def retained(self) -> tuple:
        return tuple(len(c) for c in self.components)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "components": [c.tolist() for c in self.components],
                "ratios": [r.tolist() for r in self.ratios], "total_variance": self.total_variance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FpcaBasis":
        T = len(d["mean"][0])
        return cls(np.asarray(d["mean"], dtype=float),
                   [np.asarray(c, dtype=float).reshape(-1, T) for c in d["components"]],
                   [np.asarray(r, dtype=float) for r in d["ratios"]],
                   np.asarray(d["total_variance"], dtype=float))


def fpca_fit(trajectories: np.ndarray, threshold: float = 0.9, max_components: int = 4) -> FpcaBasis:
    """Per-coordinate eigen-decomposition of the discretized curve covariance.

    Keeps the fewest components reaching ``threshold`` of the variance (at
    most ``max_components``); a coordinate with no variance keeps none.
    """
    x = np.asarray(trajectories, dtype=float)
    if x.ndim != 3 or x.shape[2] != 2:
        raise ValueError("trajectories must be [N, T, 2]")
    n, T, _ = x.shape
    if n < 2:
        raise ValueError("need at least 2 trajectories")
    if T < 2:
        raise ValueError("need T >= 2")
    means, comps, ratios, totals = [], [], [], []
    for c in range(2):
        data = x[:, :, c]
        mu = data.mean(axis=0)
        centered = data - mu
        cov = centered.T @ centered / n
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals = np.clip(evals[order], 0.0, None)
        evecs = evecs[:, order]
        total = float(evals.sum())
        means.append(mu)
        totals.append(total)
        if total <= 1e-12 * max(1.0, float(np.abs(data).max()) ** 2):
            comps.append(np.zeros((0, T)))
            ratios.append(np.zeros(0))
            continue
        r = evals / total
        keep = int(np.searchsorted(np.cumsum(r), threshold - 1e-12) + 1)
        keep = min(keep, max_components, T)
        comps.append(evecs[:, :keep].T.copy())
        ratios.append(r[:keep].copy())
    if sum(len(c) for c in comps) == 0:
        # no variation anywhere: one all-zero score keeps downstream shapes valid
        comps[0] = np.eye(1, T)
        ratios[0] = np.zeros(1)
    return FpcaBasis(np.array(means), comps, ratios, np.array(totals))


def fpca_scores(basis: FpcaBasis, trajectory: np.ndarray) -> np.ndarray:
    traj = np.asarray(trajectory, dtype=float)
    return np.concatenate([basis.components[c] @ (traj[:, c] - basis.mean[c]) for c in range(2)])


def fpca_reconstruct(basis: FpcaBasis, scores: np.ndarray) -> np.ndarray:
    out = basis.mean.T.copy()
    i = 0
    for c in range(2):
        n_c = len(basis.components[c])
        out[:, c] += scores[i:i + n_c] @ basis.components[c]
        i += n_c
    return out


# ---------------------------------------------------------------------------
# Combination and smoothing


def normalize(values, lo: Optional[float] = None, hi: Optional[float] = None) -> np.ndarray:
    """Min-max to [0, 1]; bounds default to the data's own range; zero range gives zeros."""
    v = np.asarray(values, dtype=float)
    lo = float(v.min()) if lo is None else lo
    hi = float(v.max()) if hi is None else hi
    if not hi > lo:
        return np.zeros_like(v)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def tail_score(s_d, s_r):
    s_d = np.asarray(s_d, dtype=float)
    s_r = np.asarray(s_r, dtype=float)
    if (s_d < 0).any() or (s_r < 0).any():
        raise ValueError("tail_score inputs must be nonnegative")
    out = np.sqrt(s_d * s_r)
    return float(out) if out.ndim == 0 else out


def _gaussian_kernel(sigma: float) -> np.ndarray:
    half = int(math.ceil(3 * sigma))
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smoothed_density(scores, bins: int = 50, kernel_sigma: float = 2.0) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(scores, dtype=float), bins=bins, range=(0.0, 1.0))
    dens = counts / max(counts.sum(), 1)
    kern = _gaussian_kernel(kernel_sigma)
    half = len(kern) // 2
    padded = np.pad(dens, half, mode="symmetric")
    return np.convolve(padded, kern, mode="valid")


def bin_index(scores, bins: int) -> np.ndarray:
    s = np.clip(np.asarray(scores, dtype=float), 0.0, 1.0)
    return np.minimum((s * bins).astype(int), bins - 1)


def smooth_scores(scores, bins: int = 50, kernel_sigma: float = 2.0,
                  density: Optional[np.ndarray] = None) -> np.ndarray:
    """Inverse smoothed score density per sample, renormalized to mean 1.

    ``density`` lets held-out data reuse the training histogram.
    """
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("empty corpus")
    dens = smoothed_density(s, bins, kernel_sigma) if density is None else np.asarray(density)
    floor = 1.0 / (10.0 * max(s.size, 1) * bins)
    w = 1.0 / np.maximum(dens[bin_index(s, bins)], floor)
    return w / w.mean()


# ---------------------------------------------------------------------------
# Corpus pipeline


@dataclass
class TailScore:
    id: str
    S_d: float
    S_rs: float
    S_rt: float
    S_r: float
    S: float
    S_tilde: float


@dataclass
class RarityModels:
    endpoint_gmm: GmmModel
    fpc_gmm: GmmModel
    basis: FpcaBasis
    bounds: dict  # name -> (min, max) over the training corpus
    bins: int
    kernel_sigma: float
    density: np.ndarray
    kalman: dict

    def to_json(self, provenance: Optional[dict] = None) -> str:
        doc = {"format": MODELS_FORMAT, "version": MODELS_VERSION}
        if provenance:
            doc["provenance"] = provenance
        doc.update({
            "endpoint_gmm": self.endpoint_gmm.to_dict(),
            "fpc_gmm": self.fpc_gmm.to_dict(),
            "fpca": self.basis.to_dict(),
            "bounds": {k: list(v) for k, v in self.bounds.items()},
            "smoothing": {"bins": self.bins, "kernel_sigma": self.kernel_sigma, "density": self.density.tolist()},
            "kalman": self.kalman,
        })
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RarityModels":
        doc = json.loads(text)
        if doc.get("format") != MODELS_FORMAT or doc.get("version") != MODELS_VERSION:
            raise ValueError("not a rarity-model document of a supported version")
        sm = doc["smoothing"]
        return cls(GmmModel.from_dict(doc["endpoint_gmm"]), GmmModel.from_dict(doc["fpc_gmm"]),
                   FpcaBasis.from_dict(doc["fpca"]), {k: tuple(v) for k, v in doc["bounds"].items()},
                   int(sm["bins"]), float(sm["kernel_sigma"]), np.asarray(sm["density"], dtype=float),
                   dict(doc.get("kalman", {})))


def default_components(n: int) -> int:
    return 4 if n < 500 else 10


def full_trajectory(sc: Scenario) -> np.ndarray:
    return np.vstack([sc.target.positions, sc.future])


def _raw_terms(models_parts, corpus_n: Sequence[Scenario], kalman: dict):
    endpoint_gmm, fpc_gmm, basis = models_parts
    s_d = np.array([difficulty_score(s, **kalman) for s in corpus_n])
    ends = np.array([s.future[-1] for s in corpus_n])
    fpc = np.array([fpca_scores(basis, full_trajectory(s)) for s in corpus_n])
    return s_d, gmm_nll(endpoint_gmm, ends), gmm_nll(fpc_gmm, fpc)


def _assemble(ids, s_d, s_rs, s_rt, bounds, weights) -> list:
    nd = normalize(s_d, *bounds["S_d"])
    nrs = normalize(s_rs, *bounds["S_rs"])
    nrt = normalize(s_rt, *bounds["S_rt"])
    rows = []
    for i, sid in enumerate(ids):
        a, b, c = float(nd[i]), float(nrs[i]), float(nrt[i])
        s_r = math.sqrt(b * c)
        rows.append(TailScore(sid, a, b, c, s_r, math.sqrt(a * s_r), 0.0))
    if weights is not None:
        tilde = weights([r.S for r in rows])
        for r, w in zip(rows, tilde):
            r.S_tilde = float(w)
    return rows


def fit_tail_scores(train: Sequence[Scenario], rng: RngStream, k_g: Optional[int] = None, bic: bool = False,
                    bins: int = 50, kernel_sigma: float = 2.0, kalman: Optional[dict] = None):
    """Fit rarity models on the training split and score it. Returns (models, rows)."""
    kalman = dict(kalman or {"process_noise": 0.5, "measurement_noise": 0.1})
    corpus_n = [normalize_frame(s) for s in train]
    if any(s.future is None for s in corpus_n):
        raise ValueError("tail scoring needs ground-truth futures")
    k = k_g or default_components(len(corpus_n))
    ends = np.array([s.future[-1] for s in corpus_n])
    basis = fpca_fit(np.array([full_trajectory(s) for s in corpus_n]))
    fpc = np.array([fpca_scores(basis, full_trajectory(s)) for s in corpus_n])
    if bic:
        cands = range(1, k + 1)
        endpoint_gmm = select_gmm_bic(ends, cands, rng.substream(11))
        fpc_gmm = select_gmm_bic(fpc, cands, rng.substream(12))
    else:
        endpoint_gmm = fit_gmm(ends, k, rng.substream(11))
        fpc_gmm = fit_gmm(fpc, k, rng.substream(12))
    s_d, s_rs, s_rt = _raw_terms((endpoint_gmm, fpc_gmm, basis), corpus_n, kalman)
    bounds = {name: (float(v.min()), float(v.max())) for name, v in
              (("S_d", s_d), ("S_rs", s_rs), ("S_rt", s_rt))}
    rows = _assemble([s.id for s in train], s_d, s_rs, s_rt, bounds, None)
    density = smoothed_density([r.S for r in rows], bins, kernel_sigma)
    tilde = smooth_scores([r.S for r in rows], bins, kernel_sigma, density)
    for r, w in zip(rows, tilde):
        r.S_tilde = float(w)
    models = RarityModels(endpoint_gmm, fpc_gmm, basis, bounds, bins, kernel_sigma, density, kalman)
    return models, rows


def apply_tail_scores(models: RarityModels, corpus: Sequence[Scenario]) -> list:
    """Score held-out scenarios with training bounds and the training score density."""
    corpus_n = [normalize_frame(s) for s in corpus]
    s_d, s_rs, s_rt = _raw_terms((models.endpoint_gmm, models.fpc_gmm, models.basis), corpus_n, models.kalman)
    return _assemble([s.id for s in corpus], s_d, s_rs, s_rt, models.bounds,
                     lambda sc: smooth_scores(sc, models.bins, models.kernel_sigma, models.density))


def rarity_score(models: RarityModels, scenario: Scenario) -> tuple:
    """(S_rs, S_rt) as raw NLLs and S_r from their training-normalized values."""
    sc = normalize_frame(scenario)
    s_rs = gmm_nll(models.endpoint_gmm, sc.future[-1])
    s_rt = gmm_nll(models.fpc_gmm, fpca_scores(models.basis, full_trajectory(sc)))
    nrs = float(normalize([s_rs], *models.bounds["S_rs"])[0])
    nrt = float(normalize([s_rt], *models.bounds["S_rt"])[0])
    return s_rs, s_rt, math.sqrt(nrs * nrt)


def scores_csv(rows: Sequence[TailScore], header: Optional[str] = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for r in rows:
        w.writerow([r.id] + [repr(float(getattr(r, c))) for c in SCORE_COLUMNS[1:]])
    return buf.getvalue()


def read_scores_csv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(SCORE_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"scores file lacks columns {sorted(missing)}")
    return [TailScore(row["id"], *(float(row[c]) for c in SCORE_COLUMNS[1:])) for row in reader]
