"""Feature-alignment losses and the domain-shift statistic.

* Gromov-Wasserstein style graph alignment with the coupling fixed to the
  identity: patch features -> cosine-similarity graph -> edgewise KL.
* Domain-adversarial alignment: a small discriminator on pooled features,
  trained with BCE, whose input gradient reaches the detector reversed.
* Biased RBF-kernel MMD with the median-distance bandwidth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from sfdet import nn
from sfdet.params import ParamSet

KL_EPS = 1e-6
LOG_EPS = 1e-7
NORM_EPS = 1e-12


@dataclass
class FeatureGraph:
    nodes: np.ndarray  # (P, C) patch features
    edges: np.ndarray  # (P, P) cosine similarities
    unit: np.ndarray   # (P, C) row-normalised nodes (zero rows stay zero)
    norms: np.ndarray  # (P,)


def build_feature_graph(f: np.ndarray) -> FeatureGraph:
    """Graph over the H*W patches of an (H, W, C) map (or a (P, C) node array)."""
    f = np.asarray(f, dtype=np.float64)
    nodes = f.reshape(-1, f.shape[-1])
    if len(nodes) < 2:
        raise ValueError("a feature graph needs at least two patches")
    norms = np.linalg.norm(nodes, axis=1)
    safe = norms > NORM_EPS
    unit = np.zeros_like(nodes)
    unit[safe] = nodes[safe] / norms[safe, None]
    edges = np.clip(unit @ unit.T, -1.0, 1.0)
    return FeatureGraph(nodes, edges, unit, norms)


def _to_prob(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = (e + 1.0) / 2.0
    inside = (p > KL_EPS) & (p < 1 - KL_EPS)
    return np.clip(p, KL_EPS, 1 - KL_EPS), inside


def gw_loss(gt: FeatureGraph, ga: FeatureGraph) -> tuple[float, np.ndarray, np.ndarray]:
    """Sum over matched edges of the Bernoulli KL between mapped similarities.

    Similarities s become probabilities (s + 1) / 2, clamped to
    [1e-6, 1 - 1e-6].  Returns ``(loss, d/d nodes_t, d/d nodes_aug)``.
    """
    if gt.edges.shape != ga.edges.shape:
        raise ValueError(f"graphs have different node counts: {len(gt.nodes)} vs {len(ga.nodes)}")
    p, p_in = _to_prob(gt.edges)
    q, q_in = _to_prob(ga.edges)
    kl = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    loss = float(kl.sum())
    # d/dp and d/dq, halved for the (s + 1) / 2 mapping, zero where clamped
    g_p = 0.5 * (np.log(p / q) - np.log((1 - p) / (1 - q))) * p_in
    g_q = 0.5 * (-p / q + (1 - p) / (1 - q)) * q_in
    return loss, _edge_grad_to_nodes(gt, g_p), _edge_grad_to_nodes(ga, g_q)


def _edge_grad_to_nodes(g: FeatureGraph, d_edges: np.ndarray) -> np.ndarray:
    d_unit = (d_edges + d_edges.T) @ g.unit
    radial = np.sum(d_unit * g.unit, axis=1, keepdims=True)
    out = np.zeros_like(g.nodes)
    safe = g.norms > NORM_EPS
    out[safe] = (d_unit[safe] - g.unit[safe] * radial[safe]) / g.norms[safe, None]
    return out


def gw_batch(feats_t: np.ndarray, feats_a: np.ndarray, reduction: str = "sum") -> tuple[float, np.ndarray, np.ndarray]:
    """Mean per-image GW loss over (N, H, W, C) maps, with gradients.

    ``reduction="sum"`` keeps the per-image edge sum; ``"mean"`` divides it
    by the number of edges so the scale does not grow with resolution.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    n = len(feats_t)
    patches = feats_t.shape[1] * feats_t.shape[2]
    scale = n * (patches * patches if reduction == "mean" else 1)
    total = 0.0
    dt = np.zeros(feats_t.shape)
    da = np.zeros(feats_a.shape)
    for i in range(n):
        loss, gt, ga = gw_loss(build_feature_graph(feats_t[i]), build_feature_graph(feats_a[i]))
        total += loss / scale
        dt[i] = gt.reshape(feats_t[i].shape) / scale
        da[i] = ga.reshape(feats_a[i].shape) / scale
    return total, dt, da


# ---------------------------------------------------------------- adversarial

def init_discriminator(channels: int, hidden: int = 16, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    return {
        "d.w1": rng.normal(0.0, np.sqrt(2.0 / channels), size=(channels, hidden)),
        "d.b1": np.zeros(hidden),
        "d.w2": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1)),
        "d.b2": np.zeros(1),
    }


def discriminate(disc: ParamSet, feats: np.ndarray) -> np.ndarray:
    """Probability that each (H, W, C) feature map comes from the augmented domain."""
    return _disc_forward(disc, feats)[0]


def _disc_forward(disc: ParamSet, feats: np.ndarray):
    feats = np.asarray(feats, dtype=np.float64)
    pooled = feats.mean(axis=(1, 2))
    hpre = pooled @ disc["d.w1"] + disc["d.b1"]
    h = np.maximum(hpre, 0.0)
    logit = (h @ disc["d.w2"] + disc["d.b2"])[:, 0]
    return nn.sigmoid(logit), (feats.shape, pooled, hpre, h)


def adversarial_loss(disc: ParamSet, feats: np.ndarray, labels, grl_scale: float = 1.0):
    """Domain BCE summed over the batch.

    Returns ``(loss, discriminator grads, detector-side feature grads)``; the
    feature gradient has passed through gradient reversal, i.e. it is
    ``-grl_scale * d loss / d feats``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    d = np.asarray(labels, dtype=np.float64)
    if len(feats) != len(d) or len(d) == 0:
        raise ValueError("need one domain label per feature map (at least one)")
    prob, (shape, pooled, hpre, h) = _disc_forward(disc, feats)
    pc = np.clip(prob, LOG_EPS, 1 - LOG_EPS)
    loss = float(-np.sum(d * np.log(pc) + (1 - d) * np.log(1 - pc)))
    # d loss / d logit; zero where the log clamp is active
    active = (prob > LOG_EPS) & (prob < 1 - LOG_EPS)
    dlogit = np.where(active, prob - d, 0.0)
    grads = {
        "d.w2": h.T @ dlogit[:, None],
        "d.b2": np.array([dlogit.sum()]),
    }
    dh = dlogit[:, None] @ disc["d.w2"].T * (hpre > 0)
    grads["d.w1"] = pooled.T @ dh
    grads["d.b1"] = dh.sum(axis=0)
    dpooled = dh @ disc["d.w1"].T
    n, hh, ww, c = shape
    dfeat = np.broadcast_to(dpooled[:, None, None, :] / (hh * ww), shape)
    return loss, {k: grads[k] for k in disc}, grad_reverse(dfeat, grl_scale)


def grad_reverse(grad: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Backward pass of a gradient reversal layer (forward is the identity)."""
    return -scale * np.asarray(grad)


# ---------------------------------------------------------------- MMD

def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    z = np.concatenate([a, b])
    d = pdist(z)
    med = float(np.median(d)) if len(d) else 0.0
    return med if med > 0 else 1.0


def mmd(a, b, bandwidth: float | None = None) -> float:
    """Biased squared MMD with an RBF kernel ``exp(-|x - y|^2 / (2 bw^2))``.

    The bandwidth defaults to the median pairwise distance of the pooled
    sample, so the statistic is symmetric in its arguments.
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmd needs two non-empty samples")
    bw = bandwidth if bandwidth is not None else median_bandwidth(a, b)

    def k(x, y):
        return np.exp(-cdist(x, y, "sqeuclidean") / (2.0 * bw * bw))

    value = k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean()
    return float(max(value, 0.0))
