"""MLP variational auto-encoder with hand-written backpropagation.

Tensors are named after their role so checkpoints and gradient checks can
address them directly:

    enc.<i>.W / enc.<i>.b        encoder hidden layers
    enc.mu.W / enc.logvar.W      mean and log-variance heads
    dec.<i>.W / dec.<i>.b        decoder hidden layers (hidden_dims reversed)
    dec.out.W / dec.out.b        reconstruction layer

Weights map rows to rows (h @ W + b), so W has shape (fan_in, fan_out).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from diva.config import VaeConfig
from diva.dpmm import DpmmModel, all_cluster_moments, local_step
from diva.errors import ContractError, DomainError, NumericError, ParseError, ShapeError

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


# -----------------------------
#  Parameters
# -----------------------------
@dataclass
class VaeParams:
    """Encoder/decoder tensors plus the Adam moment buffers."""
    config: VaeConfig
    tensors: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, value in self.tensors.items():
            self.adam_m.setdefault(name, np.zeros_like(value))
            self.adam_v.setdefault(name, np.zeros_like(value))

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def input_dim(self) -> int:
        return self.tensors["dec.out.W"].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.tensors["enc.mu.W"].shape[1]

    def copy(self) -> "VaeParams":
        return VaeParams(
            config=self.config,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


def layer_shapes(cfg: VaeConfig) -> List[Tuple[str, Tuple[int, int]]]:
    """Weight names and shapes in checkpoint order."""
    if cfg.input_dim is None:
        raise ContractError("VaeConfig.input_dim must be set before building a network")
    shapes = []
    fan_in = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        shapes.append((f"enc.{i}", (fan_in, width)))
        fan_in = width
    shapes.append(("enc.mu", (fan_in, cfg.latent_dim)))
    shapes.append(("enc.logvar", (fan_in, cfg.latent_dim)))

    fan_in = cfg.latent_dim
    for i, width in enumerate(reversed(cfg.hidden_dims)):
        shapes.append((f"dec.{i}", (fan_in, width)))
        fan_in = width
    shapes.append(("dec.out", (fan_in, cfg.input_dim)))
    return shapes


def init_params(cfg: VaeConfig, rng: np.random.Generator) -> VaeParams:
    """Fan-in scaled normal weights (std sqrt(2 / fan_in)) and zero biases."""
    tensors: Dict[str, np.ndarray] = {}
    for name, (fan_in, fan_out) in layer_shapes(cfg):
        tensors[f"{name}.W"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.b"] = np.zeros(fan_out)
    return VaeParams(config=cfg, tensors=tensors)


def params_hash(params: VaeParams) -> str:
    digest = hashlib.sha256()
    for name, value in params.tensors.items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return digest.hexdigest()


# -----------------------------
#  Activations
# -----------------------------
def _act(a, kind):
    if kind == "relu":
        return np.maximum(a, 0.0)
    return np.where(a > 0, a, LEAKY_SLOPE * a)


def _act_grad(a, kind):
    if kind == "relu":
        return (a > 0).astype(float)
    return np.where(a > 0, 1.0, LEAKY_SLOPE)


def _dense_stack(h, params: VaeParams, prefix: str, n_layers: int):
    cache = []
    kind = params.config.activation
    for i in range(n_layers):
        a = h @ params.tensors[f"{prefix}.{i}.W"] + params.tensors[f"{prefix}.{i}.b"]
        cache.append((h, a))
        h = _act(a, kind)
    return h, cache


def _dense_stack_backward(grad_h, params: VaeParams, prefix: str, cache, grads):
    kind = params.config.activation
    for i in reversed(range(len(cache))):
        h_in, a = cache[i]
        grad_a = grad_h * _act_grad(a, kind)
        grads[f"{prefix}.{i}.W"] = h_in.T @ grad_a
        grads[f"{prefix}.{i}.b"] = grad_a.sum(axis=0)
        grad_h = grad_a @ params.tensors[f"{prefix}.{i}.W"].T
    return grad_h


def _as_batch(x, width, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != width:
        raise ShapeError(f"{what} has shape {x.shape}, expected last dimension {width}")
    return batch, single


# -----------------------------
#  Forward passes
# -----------------------------
def _encode_forward(x, params: VaeParams):
    h, cache = _dense_stack(x, params, "enc", len(params.config.hidden_dims))
    t = params.tensors
    mu = h @ t["enc.mu.W"] + t["enc.mu.b"]
    logvar = h @ t["enc.logvar.W"] + t["enc.logvar.b"]
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("encoder produced non-finite activations")
    return mu, logvar, (h, cache)


def encode(x, params: VaeParams):
    """
    Encoder forward pass.

    Args:
        x (np.ndarray): one input vector or a B x input_dim batch.
        params (VaeParams): network parameters.

    Returns:
        (np.ndarray, np.ndarray): mu and logvar, shaped like the input rows.
    """
    batch, single = _as_batch(x, params.input_dim, "input")
    mu, logvar, _ = _encode_forward(batch, params)
    return (mu[0], logvar[0]) if single else (mu, logvar)


def sample_latent(mu, logvar, noise):
    """Reparameterised draw z = mu + exp(logvar / 2) * noise."""
    mu, logvar, noise = (np.asarray(v, dtype=float) for v in (mu, logvar, noise))
    if not (mu.shape == logvar.shape == noise.shape):
        raise ShapeError(f"mu {mu.shape}, logvar {logvar.shape} and noise {noise.shape} differ")
    return mu + np.exp(0.5 * logvar) * noise


def _decode_forward(z, params: VaeParams):
    g, cache = _dense_stack(z, params, "dec", len(params.config.hidden_dims))
    out = g @ params.tensors["dec.out.W"] + params.tensors["dec.out.b"]
    if params.config.output_activation == "tanh":
        out = np.tanh(out)
    return out, (g, cache)


def decode(z, params: VaeParams) -> np.ndarray:
    """Decoder forward pass; outputs lie in (-1, 1) in tanh mode."""
    batch, single = _as_batch(z, params.latent_dim, "z")
    out, _ = _decode_forward(batch, params)
    return out[0] if single else out


# -----------------------------
#  Losses
# -----------------------------
def recon_loss(x, x_star) -> float:
    """Mean squared error over every element."""
    x = np.asarray(x, dtype=float)
    x_star = np.asarray(x_star, dtype=float)
    if x.shape != x_star.shape:
        raise ShapeError(f"reconstruction shape {x_star.shape} does not match input {x.shape}")
    return float(np.mean((x - x_star) ** 2))


def kl_hard(mu_i, var_i, cluster_mean, cluster_var) -> float:
    """KL(N(mu_i, diag var_i) || N(cluster_mean, diag cluster_var))."""
    mu_i, var_i, cluster_mean, cluster_var = (
        np.asarray(v, dtype=float) for v in (mu_i, var_i, cluster_mean, cluster_var)
    )
    if not (mu_i.shape == var_i.shape == cluster_mean.shape == cluster_var.shape):
        raise ShapeError("kl_hard arguments must share one shape")
    if np.any(var_i <= 0) or np.any(cluster_var <= 0):
        raise DomainError("variances must be strictly positive")
    diff = cluster_mean - mu_i
    return float(0.5 * np.sum(
        np.log(cluster_var) - np.log(var_i) - 1.0 + var_i / cluster_var + diff * diff / cluster_var
    ))


def _check_probs(probs, K):
    probs = np.asarray(probs, dtype=float)
    if probs.shape[-1] != K:
        raise ShapeError(f"probabilities have {probs.shape[-1]} entries but the model has K={K}")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=-1) - 1.0) > 1e-8):
        raise ContractError("cluster probabilities must be non-negative and sum to 1")
    return probs


def kl_soft(mu_i, var_i, model: DpmmModel, probs) -> float:
    """Probability-weighted sum of kl_hard against every cluster of `model`."""
    probs = _check_probs(probs, model.K)
    means, variances = all_cluster_moments(model)
    per_cluster = np.array([kl_hard(mu_i, var_i, means[k], variances[k]) for k in range(model.K)])
    return float(np.dot(probs, per_cluster))


@dataclass
class LossComponents:
    total: float
    recon: float
    kl: float


def compute_loss(params: VaeParams, batch, noise, cluster_means, cluster_vars, probs,
                 kld_weight: Optional[float] = None):
    """
    Loss and gradients for fixed noise and fixed cluster weights.

    total = recon_loss + kld_weight * mean_i sum_k p_ik KL(q_i || cluster_k)

    Cluster moments and probabilities are constants here; the gradient flows
    through z into the decoder and through mu, logvar into the KL term.

    Returns:
        (LossComponents, dict): loss values and one gradient per tensor.
    """
    cfg = params.config
    weight = cfg.kld_weight if kld_weight is None else kld_weight
    x, _ = _as_batch(batch, params.input_dim, "batch")
    B = x.shape[0]
    if B == 0:
        raise ContractError("batch must not be empty")
    noise = np.asarray(noise, dtype=float).reshape(B, params.latent_dim)
    means = np.asarray(cluster_means, dtype=float)
    variances = np.asarray(cluster_vars, dtype=float)
    if np.any(variances <= 0):
        raise DomainError("cluster variances must be strictly positive")
    probs = _check_probs(probs, means.shape[0]).reshape(B, means.shape[0])

    mu, logvar, (h_enc, enc_cache) = _encode_forward(x, params)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise
    x_star, (g_dec, dec_cache) = _decode_forward(z, params)

    recon = float(np.mean((x_star - x) ** 2))

    # B x K x D pairwise terms
    var_i = std * std
    diff = means[None, :, :] - mu[:, None, :]
    pair = 0.5 * np.sum(
        np.log(variances)[None] - logvar[:, None, :] - 1.0
        + var_i[:, None, :] / variances[None] + diff * diff / variances[None],
        axis=2,
    )
    kl = float(np.mean(np.sum(probs * pair, axis=1)))
    total = recon + weight * kl
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss (recon={recon}, kl={kl})")

    grads: Dict[str, np.ndarray] = {}
    t = params.tensors

    # Decoder
    grad_out = 2.0 * (x_star - x) / x.size
    if cfg.output_activation == "tanh":
        grad_out = grad_out * (1.0 - x_star * x_star)
    grads["dec.out.W"] = g_dec.T @ grad_out
    grads["dec.out.b"] = grad_out.sum(axis=0)
    grad_g = grad_out @ t["dec.out.W"].T
    grad_z = _dense_stack_backward(grad_g, params, "dec", dec_cache, grads)

    # Reparameterisation and KL
    inv_var = 1.0 / variances
    p_inv = probs @ inv_var
    scale = weight / B
    grad_mu = grad_z + scale * (mu * p_inv - probs @ (means * inv_var))
    grad_logvar = grad_z * noise * 0.5 * std + scale * 0.5 * (var_i * p_inv - probs.sum(axis=1, keepdims=True))

    # Encoder heads and hidden layers
    grads["enc.mu.W"] = h_enc.T @ grad_mu
    grads["enc.mu.b"] = grad_mu.sum(axis=0)
    grads["enc.logvar.W"] = h_enc.T @ grad_logvar
    grads["enc.logvar.b"] = grad_logvar.sum(axis=0)
    grad_h = grad_mu @ t["enc.mu.W"].T + grad_logvar @ t["enc.logvar.W"].T
    _dense_stack_backward(grad_h, params, "enc", enc_cache, grads)

    return LossComponents(total=total, recon=recon, kl=kl), {name: grads[name] for name in t}


# -----------------------------
#  Optimiser
# -----------------------------
def adam_update(params: VaeParams, grads: Dict[str, np.ndarray], cfg: Optional[VaeConfig] = None) -> VaeParams:
    """
    One Adam step with decoupled weight decay on weight matrices (biases are not decayed).

    Returns a new VaeParams; the input is left untouched.
    """
    cfg = cfg or params.config
    out = params.copy()
    out.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1 ** out.step
    correction2 = 1.0 - b2 ** out.step

    for name, g in grads.items():
        m = b1 * out.adam_m[name] + (1.0 - b1) * g
        v = b2 * out.adam_v[name] + (1.0 - b2) * g * g
        out.adam_m[name], out.adam_v[name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
        if name.endswith(".W"):
            update = update + cfg.weight_decay * out.tensors[name]
        out.tensors[name] = out.tensors[name] - cfg.learning_rate * update
        if not np.all(np.isfinite(out.tensors[name])):
            raise NumericError(f"tensor {name} became non-finite after step {out.step}")
    return out


@dataclass
class StepResult:
    params: VaeParams
    loss: LossComponents
    z: np.ndarray
    probs: np.ndarray


def train_step(batch, model: DpmmModel, params: VaeParams, cfg: VaeConfig, rng: np.random.Generator) -> StepResult:
    """
    Encode, sample, weight by the DPMM and take one optimiser step.

    The latent draw z (taken before the update) is returned so the caller can
    buffer it for the next DPMM update.
    """
    x, _ = _as_batch(batch, params.input_dim, "batch")
    if x.shape[0] == 0:
        raise ContractError("train_step needs a non-empty batch")
    mu, logvar = encode(x, params)
    noise = rng.standard_normal(mu.shape)
    z = sample_latent(mu, logvar, noise)
    probs = local_step(z, model).r
    means, variances = all_cluster_moments(model)

    loss, grads = compute_loss(params, x, noise, means, variances, probs, kld_weight=cfg.kld_weight)
    return StepResult(params=adam_update(params, grads, cfg), loss=loss, z=z, probs=probs)


# -----------------------------
#  Checkpoints
# -----------------------------
def save_params(params: VaeParams, path) -> Path:
    """
    Write a JSON manifest plus a little-endian float64 blob next to it.

    The blob holds every tensor, then the Adam first and second moments,
    concatenated in manifest order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_suffix(".bin")

    entries = []
    chunks = []
    for group, source in (("param", params.tensors), ("adam_m", params.adam_m), ("adam_v", params.adam_v)):
        for name in params.tensors:
            value = np.ascontiguousarray(source[name], dtype="<f8")
            entries.append({"group": group, "name": name, "shape": list(value.shape)})
            chunks.append(value.tobytes())

    manifest = {
        "format": "diva-vae",
        "version": 1,
        "config": params.config.model_dump(),
        "step": params.step,
        "blob": blob_path.name,
        "tensors": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    logger.info("Saved VAE checkpoint (step %d) to %s", params.step, path)
    return path


def load_params(path) -> VaeParams:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != "diva-vae":
        raise ParseError(f"{path}: not a VAE checkpoint manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()

    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    offset = 0
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ParseError(f"{path}: blob truncated at tensor {entry['name']}")
        groups[entry["group"]][entry["name"]] = (
            np.frombuffer(blob[offset:end], dtype="<f8").reshape(entry["shape"]).astype(float)
        )
        offset = end
    if offset != len(blob):
        raise ParseError(f"{path}: {len(blob) - offset} trailing bytes in blob")

    return VaeParams(
        config=VaeConfig.model_validate(manifest["config"]),
        tensors=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=int(manifest["step"]),
    )
