"""Dirichlet-process mixture posterior with diagonal Normal-Gamma components.

The diagonal Normal-Wishart factor of every cluster is stored as D
independent Normal-Gamma factors sharing one precision scale lambda_hat:

    tau_d ~ Gamma(a_hat_d, rate=b_hat_d)
    mu_d | tau_d ~ N(mu_hat_d, 1 / (lambda_hat * tau_d))

Stick-breaking weights use Beta(alpha1_k, alpha0_k) factors.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from diva.errors import (
    ContractError,
    DegeneratePosteriorError,
    ShapeError,
)
from diva.numerics import LOG_2PI, digamma, kl_beta, kl_gamma, normalize_log_weights

logger = logging.getLogger(__name__)

RESP_FLOOR = 1e-12
_CHUNK_ROWS = 4096


# -----------------------------
#  Domain types
# -----------------------------
@dataclass(frozen=True)
class DpmmPrior:
    """Fixed hyperparameters of the DP mixture."""
    alpha: float
    mu0: np.ndarray
    lambda_scale: float
    sF: float
    nu: float
    D: int

    def __post_init__(self):
        mu0 = np.asarray(self.mu0, dtype=float)
        if mu0.ndim == 0:
            mu0 = np.full(self.D, float(mu0))
        object.__setattr__(self, "mu0", mu0)

        if self.D < 1:
            raise ContractError("prior dimensionality D must be >= 1")
        if mu0.shape != (self.D,):
            raise ShapeError(f"mu0 has shape {mu0.shape}, expected ({self.D},)")
        for name in ("alpha", "lambda_scale", "sF", "nu"):
            if not getattr(self, name) > 0:
                raise ContractError(f"prior {name} must be > 0")

    @classmethod
    def create(cls, D, alpha=5.0, mu0=0.0, lambda_scale=1.0, sF=0.1, nu=None):
        """Build a prior, defaulting nu to D + 2 so every dimension has a finite variance."""
        if nu is None:
            nu = D + 2.0
        return cls(alpha=float(alpha), mu0=mu0, lambda_scale=float(lambda_scale),
                   sF=float(sF), nu=float(nu), D=int(D))

    @property
    def a0(self) -> float:
        return 0.5 * self.nu

    @property
    def b0(self) -> float:
        return 0.5 * self.nu * self.sF

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "mu0": self.mu0.tolist(),
            "lambda_scale": self.lambda_scale,
            "sF": self.sF,
            "nu": self.nu,
            "D": self.D,
        }


@dataclass(frozen=True)
class StickPosterior:
    alpha1: np.ndarray
    alpha0: np.ndarray


@dataclass(frozen=True)
class NormalWishartPosterior:
    mu_hat: np.ndarray      # K x D
    lambda_hat: np.ndarray  # K
    a_hat: np.ndarray       # K x D
    b_hat: np.ndarray       # K x D


@dataclass(frozen=True)
class DpmmModel:
    """Full variational posterior. Treated as an immutable value."""
    prior: DpmmPrior
    stick: StickPosterior
    nw: NormalWishartPosterior
    component_ids: Tuple[int, ...]
    next_id: int

    @property
    def K(self) -> int:
        return len(self.component_ids)

    @property
    def D(self) -> int:
        return self.prior.D

    def select(self, order: Sequence[int]) -> "DpmmModel":
        """Keep (and reorder) the clusters at the given positions."""
        idx = np.asarray(order, dtype=int)
        return DpmmModel(
            prior=self.prior,
            stick=StickPosterior(self.stick.alpha1[idx], self.stick.alpha0[idx]),
            nw=NormalWishartPosterior(
                mu_hat=self.nw.mu_hat[idx],
                lambda_hat=self.nw.lambda_hat[idx],
                a_hat=self.nw.a_hat[idx],
                b_hat=self.nw.b_hat[idx],
            ),
            component_ids=tuple(self.component_ids[i] for i in idx),
            next_id=self.next_id,
        )

    def index_of(self, component_id: int) -> int:
        return self.component_ids.index(component_id)

    # ---------- Serialisation ----------

    def to_dict(self) -> dict:
        return {
            "format": "diva-dpmm",
            "prior": self.prior.to_dict(),
            "K": self.K,
            "D": self.D,
            "component_ids": list(self.component_ids),
            "next_id": self.next_id,
            "shapes": {
                "alpha1": [self.K],
                "alpha0": [self.K],
                "mu_hat": [self.K, self.D],
                "lambda_hat": [self.K],
                "a_hat": [self.K, self.D],
                "b_hat": [self.K, self.D],
            },
            "alpha1": self.stick.alpha1.tolist(),
            "alpha0": self.stick.alpha0.tolist(),
            "mu_hat": self.nw.mu_hat.tolist(),
            "lambda_hat": self.nw.lambda_hat.tolist(),
            "a_hat": self.nw.a_hat.tolist(),
            "b_hat": self.nw.b_hat.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DpmmModel":
        if doc.get("format") != "diva-dpmm":
            raise ContractError("not a diva DPMM checkpoint")
        p = doc["prior"]
        prior = DpmmPrior(alpha=p["alpha"], mu0=np.array(p["mu0"], dtype=float),
                          lambda_scale=p["lambda_scale"], sF=p["sF"], nu=p["nu"], D=p["D"])

        def arr(name):
            values = np.array(doc[name], dtype=float)
            return values.reshape(doc["shapes"][name])

        return cls(
            prior=prior,
            stick=StickPosterior(arr("alpha1"), arr("alpha0")),
            nw=NormalWishartPosterior(arr("mu_hat"), arr("lambda_hat"),
                                      arr("a_hat"), arr("b_hat")),
            component_ids=tuple(int(i) for i in doc["component_ids"]),
            next_id=int(doc["next_id"]),
        )


@dataclass
class Responsibilities:
    """B x K soft assignment matrix, rows sum to one."""
    r: np.ndarray

    @property
    def B(self) -> int:
        return self.r.shape[0]

    @property
    def K(self) -> int:
        return self.r.shape[1]


@dataclass
class SufficientStats:
    """Memoized summary of a batch under a set of responsibilities."""
    n_hat: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    entropy_k: np.ndarray
    merge_entropy: np.ndarray
    count: int = 0

    @property
    def K(self) -> int:
        return self.n_hat.shape[0]

    @property
    def D(self) -> int:
        return self.s1.shape[1]

    @property
    def entropy(self) -> float:
        return float(np.sum(self.entropy_k))

    @classmethod
    def zeros(cls, K: int, D: int) -> "SufficientStats":
        return cls(
            n_hat=np.zeros(K),
            s1=np.zeros((K, D)),
            s2=np.zeros((K, D)),
            entropy_k=np.zeros(K),
            merge_entropy=np.zeros((K, K)),
            count=0,
        )

    def copy(self) -> "SufficientStats":
        return SufficientStats(self.n_hat.copy(), self.s1.copy(), self.s2.copy(),
                               self.entropy_k.copy(), self.merge_entropy.copy(), self.count)

    def _check_same_k(self, other):
        if other.K != self.K or other.D != self.D:
            raise ShapeError(f"stats shapes differ: K={self.K}/{other.K}, D={self.D}/{other.D}")

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        self._check_same_k(other)
        return SufficientStats(
            n_hat=self.n_hat + other.n_hat,
            s1=self.s1 + other.s1,
            s2=self.s2 + other.s2,
            entropy_k=self.entropy_k + other.entropy_k,
            merge_entropy=self.merge_entropy + other.merge_entropy,
            count=self.count + other.count,
        )

    def subtract(self, other: "SufficientStats") -> "SufficientStats":
        """Remove a summarised batch again. Mass is clipped at zero."""
        self._check_same_k(other)
        return SufficientStats(
            n_hat=np.maximum(self.n_hat - other.n_hat, 0.0),
            s1=self.s1 - other.s1,
            s2=np.maximum(self.s2 - other.s2, 0.0),
            entropy_k=self.entropy_k - other.entropy_k,
            merge_entropy=self.merge_entropy - other.merge_entropy,
            count=max(self.count - other.count, 0),
        )

    def pad(self, extra: int) -> "SufficientStats":
        """Append `extra` empty clusters."""
        K, D = self.K, self.D
        merge = np.zeros((K + extra, K + extra))
        merge[:K, :K] = self.merge_entropy
        return SufficientStats(
            n_hat=np.concatenate([self.n_hat, np.zeros(extra)]),
            s1=np.vstack([self.s1, np.zeros((extra, D))]),
            s2=np.vstack([self.s2, np.zeros((extra, D))]),
            entropy_k=np.concatenate([self.entropy_k, np.zeros(extra)]),
            merge_entropy=merge,
            count=self.count,
        )

    def select(self, order: Sequence[int]) -> "SufficientStats":
        idx = np.asarray(order, dtype=int)
        # merge_entropy is kept upper-triangular under any reordering
        upper = np.triu(self.merge_entropy, 1)
        pairs = (upper + upper.T)[np.ix_(idx, idx)]
        return SufficientStats(
            n_hat=self.n_hat[idx],
            s1=self.s1[idx],
            s2=self.s2[idx],
            entropy_k=self.entropy_k[idx],
            merge_entropy=np.triu(pairs, 1),
            count=self.count,
        )

    def permute(self, order: Sequence[int]) -> "SufficientStats":
        if sorted(int(i) for i in order) != list(range(self.K)):
            raise ContractError(f"{list(order)} is not a permutation of range({self.K})")
        return self.select(order)

    def merge_pair(self, j: int, k: int) -> "SufficientStats":
        """
        Fold cluster k into cluster j (j < k) and drop k.

        The merged entropy of j becomes exact; pair entropies involving the
        merged cluster are unknown until the data are summarised again and
        are marked NaN.
        """
        if not j < k:
            raise ContractError("merge_pair expects j < k")
        out = self.copy()
        out.n_hat[j] += out.n_hat[k]
        out.s1[j] += out.s1[k]
        out.s2[j] += out.s2[k]
        out.entropy_k[j] = self.merge_entropy[min(j, k), max(j, k)]
        out.merge_entropy[j, :] = np.nan
        out.merge_entropy[:, j] = np.nan
        keep = [i for i in range(self.K) if i != k]
        return out.select(keep)


# -----------------------------
#  Initialisation
# -----------------------------
def init_model(prior: DpmmPrior) -> DpmmModel:
    """Single-cluster model whose posterior equals the prior."""
    return _prior_model(prior, K=1, component_ids=(0,), next_id=1)


def _prior_model(prior, K, component_ids, next_id):
    D = prior.D
    return DpmmModel(
        prior=prior,
        stick=StickPosterior(np.ones(K), np.full(K, prior.alpha)),
        nw=NormalWishartPosterior(
            mu_hat=np.tile(prior.mu0, (K, 1)),
            lambda_hat=np.full(K, prior.lambda_scale),
            a_hat=np.full((K, D), prior.a0),
            b_hat=np.full((K, D), prior.b0),
        ),
        component_ids=tuple(component_ids),
        next_id=next_id,
    )


# -----------------------------
#  Expectations
# -----------------------------
def expected_log_pi(stick: StickPosterior) -> np.ndarray:
    """E_q[log pi_k] for the truncated stick-breaking weights."""
    total = digamma(stick.alpha1 + stick.alpha0)
    e_log_beta = digamma(stick.alpha1) - total
    e_log_rest = digamma(stick.alpha0) - total
    # E[log pi_k] = E[log beta_k] + sum_{j<k} E[log(1 - beta_j)]
    before = np.concatenate([[0.0], np.cumsum(e_log_rest)[:-1]])
    return np.asarray(e_log_beta + before, dtype=float)


def _cluster_terms(model: DpmmModel):
    nw = model.nw
    e_tau = nw.a_hat / nw.b_hat
    e_log_tau = digamma(nw.a_hat) - np.log(nw.b_hat)
    # Part of E[log p(x|theta_k)] that does not depend on x
    const = 0.5 * np.sum(e_log_tau - LOG_2PI - 1.0 / nw.lambda_hat[:, None], axis=1)
    return e_tau, e_log_tau, const


def expected_log_lik(x, model: DpmmModel, k: int) -> float:
    """
    Expected log-likelihood of one point under cluster k.

    Args:
        x (array-like): D-vector.
        model (DpmmModel): current posterior.
        k (int): cluster position, 0 <= k < K.

    Returns:
        float: E_q[log N(x | mu_k, Sigma_k)].
    """
    if not 0 <= k < model.K:
        raise IndexError(f"cluster index {k} out of range for K={model.K}")
    x = np.asarray(x, dtype=float)
    if x.shape != (model.D,):
        raise ShapeError(f"x has shape {x.shape}, expected ({model.D},)")

    nw = model.nw
    a, b, lam, mu = nw.a_hat[k], nw.b_hat[k], nw.lambda_hat[k], nw.mu_hat[k]
    e_log_tau = digamma(a) - np.log(b)
    e_tau = a / b
    return float(0.5 * np.sum(e_log_tau - LOG_2PI - e_tau * (x - mu) ** 2 - 1.0 / lam))


def _check_batch(batch, model):
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 1 and batch.size == 0:
        batch = batch.reshape(0, model.D)
    if batch.ndim != 2 or batch.shape[1] != model.D:
        raise ShapeError(f"batch has shape {batch.shape}, expected (B, {model.D})")
    return batch


def log_weights(batch, model: DpmmModel) -> np.ndarray:
    """Unnormalised log responsibilities E[log pi_k] + E[log p(x_n|theta_k)], B x K."""
    batch = _check_batch(batch, model)
    e_tau, _, const = _cluster_terms(model)
    offset = expected_log_pi(model.stick) + const
    mu = model.nw.mu_hat

    out = np.empty((batch.shape[0], model.K))
    for start in range(0, batch.shape[0], _CHUNK_ROWS):
        rows = batch[start:start + _CHUNK_ROWS]
        diff = rows[:, None, :] - mu[None, :, :]
        quad = np.einsum("bkd,kd->bk", diff * diff, e_tau)
        out[start:start + rows.shape[0]] = offset - 0.5 * quad
    return out


# -----------------------------
#  Local and global steps
# -----------------------------
def local_step(batch, model: DpmmModel) -> Responsibilities:
    """Responsibilities of every row of `batch` under the current posterior."""
    batch = _check_batch(batch, model)
    if batch.shape[0] == 0:
        return Responsibilities(np.zeros((0, model.K)))
    return Responsibilities(normalize_log_weights(log_weights(batch, model)))


def soft_assign(z, model: DpmmModel) -> np.ndarray:
    """Cluster probabilities for a single latent vector."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.D,):
        raise ShapeError(f"z has shape {z.shape}, expected ({model.D},)")
    return local_step(z[None, :], model).r[0]


def predict(data, model: DpmmModel) -> np.ndarray:
    """Component identifier of the most responsible cluster for each row."""
    resp = local_step(data, model).r
    ids = np.asarray(model.component_ids, dtype=int)
    return ids[np.argmax(resp, axis=1)] if resp.shape[0] else np.zeros(0, dtype=int)


def summarize(batch, resp) -> SufficientStats:
    """
    Expected sufficient statistics of a batch.

    Args:
        batch (np.ndarray): B x D data.
        resp (Responsibilities | np.ndarray): B x K responsibilities.

    Returns:
        SufficientStats: mass, first/second moments and assignment entropies.
    """
    r = np.asarray(getattr(resp, "r", resp), dtype=float)
    x = np.asarray(batch, dtype=float)
    if r.ndim != 2:
        raise ShapeError("responsibilities must be a B x K matrix")
    if x.ndim != 2:
        raise ShapeError("batch must be a B x D matrix")
    if x.shape[0] != r.shape[0]:
        raise ShapeError(f"batch has {x.shape[0]} rows but responsibilities have {r.shape[0]}")
    K = r.shape[1]

    stats = SufficientStats(
        n_hat=r.sum(axis=0),
        s1=r.T @ x,
        s2=r.T @ (x * x),
        entropy_k=-np.sum(r * np.log(np.maximum(r, RESP_FLOOR)), axis=0),
        merge_entropy=np.zeros((K, K)),
        count=int(x.shape[0]),
    )
    # Entropy each pair would have if merged, upper triangle only
    for j in range(K - 1):
        joint = r[:, j:j + 1] + r[:, j + 1:]
        stats.merge_entropy[j, j + 1:] = -np.sum(joint * np.log(np.maximum(joint, RESP_FLOOR)), axis=0)
    return stats


def global_step(model: DpmmModel, stats: SufficientStats) -> DpmmModel:
    """Conjugate update of the stick and Normal-Gamma factors from summed statistics."""
    if stats.K != model.K:
        raise ShapeError(f"stats have K={stats.K} but model has K={model.K}")
    prior = model.prior
    N = stats.n_hat

    # Beta(1 + N_k, alpha + sum_{l>k} N_l)
    tail = np.concatenate([np.cumsum(N[::-1])[::-1][1:], [0.0]])
    alpha1 = 1.0 + N
    alpha0 = prior.alpha + tail

    lam = prior.lambda_scale + N
    mu = (prior.lambda_scale * prior.mu0[None, :] + stats.s1) / lam[:, None]
    a = prior.a0 + 0.5 * np.repeat(N[:, None], model.D, axis=1)
    b = prior.b0 + 0.5 * (
        stats.s2
        + prior.lambda_scale * prior.mu0[None, :] ** 2
        - lam[:, None] * mu * mu
    )
    b = np.maximum(b, prior.b0 * 1e-12)

    return DpmmModel(
        prior=prior,
        stick=StickPosterior(alpha1, alpha0),
        nw=NormalWishartPosterior(mu, lam, a, b),
        component_ids=model.component_ids,
        next_id=model.next_id,
    )


# -----------------------------
#  Objective
# -----------------------------
def elbo(model: DpmmModel, stats: SufficientStats) -> float:
    """
    Evidence lower bound evaluated from full-data summaries.

    Sum of the expected data log-likelihood, the expected log stick weights,
    the assignment entropy, minus the KL divergences of every Beta and
    Normal-Gamma factor from its prior.
    """
    if stats.K != model.K:
        raise ShapeError(f"stats have K={stats.K} but model has K={model.K}")
    prior = model.prior
    nw = model.nw
    N = stats.n_hat
    e_tau, e_log_tau, _ = _cluster_terms(model)

    data = 0.5 * np.sum(
        N[:, None] * (e_log_tau - LOG_2PI - 1.0 / nw.lambda_hat[:, None])
        - e_tau * (stats.s2 - 2.0 * nw.mu_hat * stats.s1 + N[:, None] * nw.mu_hat ** 2)
    )
    alloc = float(np.dot(N, expected_log_pi(model.stick))) + stats.entropy

    kl_sticks = np.sum(kl_beta(model.stick.alpha1, model.stick.alpha0, 1.0, prior.alpha))
    lam_ratio = nw.lambda_hat / prior.lambda_scale
    kl_mean = 0.5 * (
        np.log(lam_ratio)[:, None]
        + 1.0 / lam_ratio[:, None]
        - 1.0
        + prior.lambda_scale * e_tau * (nw.mu_hat - prior.mu0[None, :]) ** 2
    )
    kl_prec = kl_gamma(nw.a_hat, nw.b_hat, prior.a0, prior.b0)
    kl_theta = np.sum(kl_mean + kl_prec)

    return float(data + alloc - kl_sticks - kl_theta)


def cluster_moments(model: DpmmModel, k: int):
    """
    Posterior mean and expected variance of cluster k.

    Returns:
        (np.ndarray, np.ndarray): mean mu_hat_k and var_d = b_hat / (a_hat - 1).
    """
    if not 0 <= k < model.K:
        raise IndexError(f"cluster index {k} out of range for K={model.K}")
    a = model.nw.a_hat[k]
    if np.any(a <= 1.0):
        raise DegeneratePosteriorError(
            f"cluster {model.component_ids[k]} has Gamma shape <= 1; expected variance is infinite"
        )
    return model.nw.mu_hat[k].copy(), model.nw.b_hat[k] / (a - 1.0)


def all_cluster_moments(model: DpmmModel):
    """Means and variances of every cluster as K x D arrays."""
    if np.any(model.nw.a_hat <= 1.0):
        bad = int(np.argwhere(np.any(model.nw.a_hat <= 1.0, axis=1))[0, 0])
        cluster_moments(model, bad)
    return model.nw.mu_hat.copy(), model.nw.b_hat / (model.nw.a_hat - 1.0)


# -----------------------------
#  Checkpoints
# -----------------------------
def save_model(model: DpmmModel, path) -> Path:
    """Write the posterior as a self-describing JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model.to_dict(), indent=1), encoding="utf-8")
    logger.info("Saved DPMM checkpoint (K=%d) to %s", model.K, path)
    return path


def load_model(path) -> DpmmModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return DpmmModel.from_dict(doc)


def model_hash(model: DpmmModel) -> str:
    """Stable fingerprint of a model value, used to check that a step left it untouched."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.to_dict(), sort_keys=True).encode("utf-8"))
    return digest.hexdigest()
