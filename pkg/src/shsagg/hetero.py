"""
Heterogeneous populations and their reduction to weighted cluster models.

A population of n loads is described by i.i.d. samples (alpha^i, theta^i)
from a compactly supported parameter distribution.  The aggregate density
is then the parameter average of the conditional densities; with n large
that average is well approximated by a small number of homogeneous
"cluster loads": k-means over the sampled parameters gives centers
(alpha-bar^k, theta-bar^k) and weights w_k = n_k / n, and the population
density and power are the w-weighted mixtures of the per-cluster
solutions.  The within-cluster distance

    eps(n) = sum_k sum_{i in I_k} || z-bar^k - z^i ||

measured on standardized coordinates is the knob that controls the
mixture error: it is non-increasing in the cluster count (up to Lloyd
suboptimality) and the approximation error scales like eps(n)/n.

Clustering operates on derived dynamics coefficients (entries of A and
b_q plus the setpoint), not on raw house constants: two houses with the
same matrices are the same load regardless of how they were built.
Distances are Euclidean after standardizing each coordinate to zero
mean and unit variance, since raw scales are incommensurate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .model import (
    EtpParameters,
    HouseParameters,
    HvacControl,
    LoadModel,
    PevParameters,
    ETP_FEATURE_NAMES,
    etp_feature_vector,
    etp_from_features,
    etp_matrices,
    make_hvac_etp,
    make_pev,
)

__all__ = [
    "Coordinate",
    "ParameterDistribution",
    "LoadSample",
    "ClusterSet",
    "default_hvac_distribution",
    "sample_parameters",
    "models_from_samples",
    "kmeans",
    "cluster_models",
    "mixture_density",
    "mixture_power",
    "save_clusters",
    "load_clusters",
]


# ---------------------------------------------------------------------------
# parameter distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coordinate:
    """One scalar coordinate of the parameter distribution.

    kind 'uniform' draws from [lo, hi]; 'point' is a point mass (no draw
    consumed); 'choice' draws uniformly from an explicit value list.
    """
    kind: str
    lo: float = 0.0
    hi: float = 0.0
    values: Optional[tuple] = None

    @staticmethod
    def uniform(lo, hi):
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ValueError(f"uniform bounds must be finite and ordered, got [{lo}, {hi}]")
        return Coordinate("uniform", float(lo), float(hi))

    @staticmethod
    def point(value):
        return Coordinate("point", float(value), float(value))

    @staticmethod
    def choice(values):
        vals = tuple(float(v) for v in values)
        if not vals:
            raise ValueError("choice coordinate needs at least one value")
        return Coordinate("choice", min(vals), max(vals), vals)

    @staticmethod
    def spread(nominal, rel):
        """Uniform on nominal * [1 - rel, 1 + rel]."""
        lo, hi = nominal * (1.0 - rel), nominal * (1.0 + rel)
        return Coordinate.uniform(min(lo, hi), max(lo, hi))

    def support(self):
        return (self.lo, self.hi)

    def draw(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            return float(rng.uniform(self.lo, self.hi))
        if self.kind == "point":
            return self.lo
        if self.kind == "choice":
            return self.values[rng.integers(len(self.values))]
        raise ValueError(f"unknown coordinate kind {self.kind!r}")


# Canonical draw order per family.  Draws are consumed in this order for
# every load, so a given (distribution, n, seed) triple always maps to the
# same sample list regardless of how the coordinate dict was assembled.
_HVAC_COORDS = ("c_air", "c_mass", "ua", "hm", "q_gain", "q_hvac", "t_out",
                "power_kw", "u_set", "deadband", "sigma0",
                "hazard_off", "hazard_on", "price_gain", "price_cap")
_PEV_COORDS = ("charge_rate_kw", "deadline_slack", "hazard_wait")

_HOUSE_FIELDS = ("c_air", "c_mass", "ua", "hm", "q_gain", "q_hvac",
                 "t_out", "power_kw")


@dataclass
class ParameterDistribution:
    """Joint distribution of load parameters, one Coordinate per scalar.

    Coordinates omitted from `coords` are point masses at the family
    defaults.  Supported families: 'hvac', 'pev'.
    """
    family: str
    coords: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in ("hvac", "pev"):
            raise ValueError(f"unknown load family {self.family!r}")
        known = _HVAC_COORDS if self.family == "hvac" else _PEV_COORDS
        for key in self.coords:
            if key not in known:
                raise ValueError(f"unknown {self.family} coordinate {key!r}")

    def _defaults(self):
        if self.family == "hvac":
            house = HouseParameters()
            ctl = HvacControl()
            base = {name: getattr(house, name) for name in _HOUSE_FIELDS}
            base.update(u_set=ctl.u_set, deadband=ctl.deadband, sigma0=0.0,
                        hazard_off=ctl.hazard_off, hazard_on=ctl.hazard_on,
                        price_gain=ctl.price_gain, price_cap=ctl.price_cap)
            return base
        pev = PevParameters()
        return {"charge_rate_kw": pev.charge_rate_kw,
                "deadline_slack": pev.deadline_slack,
                "hazard_wait": pev.hazard_wait}

    def coordinate(self, name) -> Coordinate:
        if name in self.coords:
            return self.coords[name]
        return Coordinate.point(self._defaults()[name])

    def support(self):
        """Per-coordinate (lo, hi) bounds; compact by construction."""
        order = _HVAC_COORDS if self.family == "hvac" else _PEV_COORDS
        return {name: self.coordinate(name).support() for name in order}


def default_hvac_distribution(spread: float = 0.2,
                              setpoint_range=(70.0, 78.0),
                              sigma0: float = 0.0) -> ParameterDistribution:
    """The stock heterogeneous cooling population.

    +-`spread` relative uniform variation on the five thermal constants,
    setpoints uniform over `setpoint_range`, everything else nominal.
    """
    house = HouseParameters()
    coords = {name: Coordinate.spread(getattr(house, name), spread)
              for name in ("c_air", "c_mass", "ua", "hm", "q_gain")}
    coords["u_set"] = Coordinate.uniform(*setpoint_range)
    if sigma0 > 0.0:
        coords["sigma0"] = Coordinate.point(sigma0)
    return ParameterDistribution("hvac", coords)


class LoadSample(NamedTuple):
    """One sampled load: control parameters alpha, dynamics parameters theta."""
    alpha: object
    theta: object


def sample_parameters(dist: ParameterDistribution, n: int, seed) -> list:
    """Draw n i.i.d. loads from the distribution.

    Deterministic under (dist, n, seed); draws are consumed per load in
    the canonical coordinate order, point-mass coordinates consuming
    none.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    order = _HVAC_COORDS if dist.family == "hvac" else _PEV_COORDS
    coords = [dist.coordinate(name) for name in order]
    out = []
    for _ in range(n):
        vals = dict(zip(order, (c.draw(rng) for c in coords)))
        if dist.family == "hvac":
            house = HouseParameters(**{k: vals[k] for k in _HOUSE_FIELDS})
            house.validate()
            a, b_off, b_on = etp_matrices(house)
            theta = EtpParameters(a, b_off, b_on, power_kw=vals["power_kw"],
                                  sigma0=vals["sigma0"])
            alpha = HvacControl(u_set=vals["u_set"], deadband=vals["deadband"],
                                price_gain=vals["price_gain"],
                                price_cap=vals["price_cap"],
                                hazard_off=vals["hazard_off"],
                                hazard_on=vals["hazard_on"])
        else:
            theta = PevParameters(vals["charge_rate_kw"],
                                  vals["deadline_slack"], vals["hazard_wait"])
            alpha = None
        out.append(LoadSample(alpha, theta))
    return out


def models_from_samples(samples, family: str = "hvac") -> list:
    """Materialize LoadModel objects from sampled (alpha, theta) pairs."""
    models = []
    for alpha, theta in samples:
        if family == "hvac":
            models.append(make_hvac_etp(theta, alpha))
        elif family == "pev":
            models.append(make_pev(theta.charge_rate_kw, theta.deadline_slack,
                                   theta.hazard_wait))
        else:
            raise ValueError(f"unknown load family {family!r}")
    return models


# ---------------------------------------------------------------------------
# k-means reduction
# ---------------------------------------------------------------------------

@dataclass
class ClusterSet:
    """A weighted homogeneous approximation of a sampled population."""
    centers: list                     # (alpha, theta) per cluster, or raw vectors
    weights: np.ndarray               # n_k / n, sums to 1
    within_cluster_distance: float    # eps(n), standardized coordinates
    feature_centers: np.ndarray       # (n_c, d), de-standardized
    feature_names: tuple
    labels: np.ndarray                # (n,) cluster index per sample
    seed: object = None
    family: str = "hvac"

    @property
    def n_clusters(self):
        return len(self.weights)

    def validate(self, feature_bounds=None):
        w = self.weights
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("cluster weights must be a probability vector")
        if feature_bounds is not None:
            lo, hi = feature_bounds
            tol = 1e-9 * (1.0 + np.abs(hi - lo))
            if np.any(self.feature_centers < lo - tol) or \
               np.any(self.feature_centers > hi + tol):
                raise ValueError("cluster center escaped the sample support")


def _features(samples, family):
    if isinstance(samples, np.ndarray):
        feats = np.atleast_2d(np.asarray(samples, dtype=float))
        return feats, None
    if family == "hvac":
        feats = np.array([etp_feature_vector(th, al) for al, th in samples])
        return feats, ETP_FEATURE_NAMES
    raise ValueError("clustering is defined for hvac samples or raw vectors")


def _kmeans_pp(z, n_c, rng):
    # k-means++ seeding: first center uniform, then proportional to the
    # squared distance from the chosen set.
    n = len(z)
    idx = [int(rng.integers(n))]
    d2 = np.sum((z - z[idx[0]]) ** 2, axis=1)
    for _ in range(1, n_c):
        total = d2.sum()
        if total <= 0.0:
            idx.append(int(rng.integers(n)))
        else:
            idx.append(int(rng.choice(n, p=d2 / total)))
        d2 = np.minimum(d2, np.sum((z - z[idx[-1]]) ** 2, axis=1))
    return z[idx].copy()


def kmeans(samples, n_c: int, seed, max_iter: int = 100) -> ClusterSet:
    """Reduce a sampled population to n_c weighted cluster loads.

    Lloyd iterations on standardized coordinates, k-means++ seeding under
    `seed`, stopping when no assignment changes or after `max_iter`
    rounds.  An empty cluster is re-seeded from the sample farthest from
    its current center.  Returns de-standardized centers, weights
    n_k / n and the within-cluster distance eps(n) (sum of member
    distances to their center, standardized space).
    """
    feats, names = _features(samples, "hvac")
    n, d = feats.shape
    if not 1 <= n_c <= n:
        raise ValueError(f"need 1 <= n_c <= n, got n_c={n_c}, n={n}")

    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    scale = np.where(std > 0.0, std, 1.0)
    z = (feats - mean) / scale

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(z, n_c, rng)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        d2 = ((z[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        for k in range(n_c):
            members = new_labels == k
            if members.any():
                centers[k] = z[members].mean(axis=0)
            else:
                # farthest sample from its own center restarts the cluster
                far = int(np.argmax(d2[np.arange(n), new_labels]))
                centers[k] = z[far]
                new_labels[far] = k
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    dist = np.sqrt(((z - centers[labels]) ** 2).sum(axis=1))
    eps = float(dist.sum())
    counts = np.bincount(labels, minlength=n_c)
    weights = counts / n
    feat_centers = centers * scale + mean

    if names is None:
        center_objs = [feat_centers[k].copy() for k in range(n_c)]
        names = tuple(f"x{i}" for i in range(d))
        family = "raw"
    else:
        al0, th0 = samples[0]
        center_objs = []
        for k in range(n_c):
            th, al = etp_from_features(feat_centers[k], th0, al0)
            center_objs.append(LoadSample(al, th))
        family = "hvac"

    cs = ClusterSet(center_objs, weights, eps, feat_centers, names, labels,
                    seed=seed, family=family)
    cs.validate((feats.min(axis=0), feats.max(axis=0)))
    return cs


def cluster_models(clusters: ClusterSet) -> list:
    """LoadModel per cluster center (hvac families only)."""
    if clusters.family != "hvac":
        raise ValueError("cluster centers do not describe hvac loads")
    return [make_hvac_etp(th, al) for al, th in clusters.centers]


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------

def _check_weights(weights, n):
    w = np.asarray(weights, dtype=float)
    if len(w) != n:
        raise ValueError(f"{n} inputs but {len(w)} weights")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be a probability vector")
    return w


def mixture_density(cluster_densities: Sequence, weights):
    """Cellwise convex combination of per-cluster density fields.

    All fields must live on the identical partition/grid; total mass of
    the mixture is the same combination of the input masses by
    linearity.
    """
    if not cluster_densities:
        raise ValueError("no density fields to combine")
    w = _check_weights(weights, len(cluster_densities))
    first = cluster_densities[0]
    for other in cluster_densities[1:]:
        if not first.same_grid(other):
            raise ValueError("density fields live on different grids")
    out = first.zeros_like()
    for wk, fld in zip(w, cluster_densities):
        for q in out.data:
            out.data[q] += wk * fld.data[q]
        out.escaped_mass += wk * fld.escaped_mass
    return out


def mixture_power(cluster_series: Sequence, weights, n_loads: int = 1,
                  ratings=None):
    """Population power from per-cluster series.

    Each input series holds the expected per-load power of its cluster
    in kW; the result is n_loads * sum_k w_k y_k(t).  If `ratings` is
    given the inputs are instead dimensionless mode-mass series and
    cluster k is scaled by ratings[k] kW first.
    """
    from .mc import PowerSeries

    if not cluster_series:
        raise ValueError("no power series to combine")
    w = _check_weights(weights, len(cluster_series))
    times = cluster_series[0].times
    for s in cluster_series[1:]:
        if len(s.times) != len(times) or not np.allclose(s.times, times,
                                                         rtol=0.0, atol=1e-12):
            raise ValueError("power series live on different time grids")
    if ratings is None:
        ratings = np.ones(len(cluster_series))
    ratings = np.asarray(ratings, dtype=float)
    values = np.zeros_like(times)
    for wk, rk, s in zip(w, ratings, cluster_series):
        values += wk * rk * s.values
    meta = {"n_loads": n_loads, "weights": w.tolist()}
    return PowerSeries(times.copy(), n_loads * values, source="mixture",
                       meta=meta)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_clusters(clusters: ClusterSet, path):
    """Write centers, weights, eps and seed as JSON so a PDE run can be
    reproduced without re-clustering."""
    payload = {
        "family": clusters.family,
        "feature_names": list(clusters.feature_names),
        "feature_centers": clusters.feature_centers.tolist(),
        "weights": clusters.weights.tolist(),
        "within_cluster_distance": clusters.within_cluster_distance,
        "seed": clusters.seed,
        "n_samples": int(len(clusters.labels)),
    }
    if clusters.family == "hvac":
        al, th = clusters.centers[0]
        payload["template"] = {
            "power_kw": th.power_kw, "sigma0": th.sigma0,
            "deadband": al.deadband, "price_gain": al.price_gain,
            "price_cap": al.price_cap if np.isfinite(al.price_cap) else None,
            "hazard_off": al.hazard_off, "hazard_on": al.hazard_on,
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_clusters(path) -> ClusterSet:
    with open(path) as fh:
        payload = json.load(fh)
    feat_centers = np.array(payload["feature_centers"], dtype=float)
    weights = np.array(payload["weights"], dtype=float)
    family = payload["family"]
    centers = []
    if family == "hvac":
        tpl = payload["template"]
        cap = tpl["price_cap"]
        al0 = HvacControl(deadband=tpl["deadband"],
                          price_gain=tpl["price_gain"],
                          price_cap=np.inf if cap is None else cap,
                          hazard_off=tpl["hazard_off"],
                          hazard_on=tpl["hazard_on"])
        th0 = EtpParameters(np.eye(2), np.zeros(2), np.zeros(2),
                            power_kw=tpl["power_kw"], sigma0=tpl["sigma0"])
        for vec in feat_centers:
            th, al = etp_from_features(vec, th0, al0)
            centers.append(LoadSample(al, th))
    else:
        centers = [vec.copy() for vec in feat_centers]
    return ClusterSet(centers, weights, payload["within_cluster_distance"],
                      feat_centers, tuple(payload["feature_names"]),
                      labels=np.zeros(payload.get("n_samples", 0), dtype=int),
                      seed=payload.get("seed"), family=family)
