"""Latent-space information geometry for the negative-binomial decoder.

The decoder maps a latent point to per-gene NB means mu = l * softmax(o(z)).
Each gene contributes theta / (mu (mu + theta)) — the Fisher information of
NB(mu, theta) with respect to its mean — so the latent metric is

    M(z) = sum_g w_g(mu_g) grad h_g(z) (x) grad h_g(z),

a d x d symmetric PSD tensor. This module computes M(z) in batches, provides
the reverse-mode rules needed to train losses that depend on M (flattening
penalty, curve energies), and implements the flatness diagnostics (variance
of the Riemannian metric, magnification factor) plus a discrete geodesic
solver used to validate that straight lines become geodesics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from . import nn


def nb_fim_weights(mu, theta):
    """Fisher information of NB(mu, theta) w.r.t. mu: theta / (mu (mu + theta)).

    Broadcasts; mu and theta must be strictly positive.
    """
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(mu <= 0) or np.any(theta <= 0):
        raise ValueError("mu and theta must be positive")
    return theta / (mu * (mu + theta))


def fim_pullback(mu, jac, theta):
    """Pull the NB Fisher metric back through a mean map with Jacobian `jac`.

    jac has shape (..., G, d); returns (..., d, d). This is the weighted sum
    of outer products of the per-gene mean gradients.
    """
    w = nb_fim_weights(mu, theta)
    return np.einsum("...g,...gi,...gj->...ij", w, jac, jac)


def fim_mc_oracle(mu, theta, n_samples, seed):
    """Monte-Carlo estimate of E[(d/dmu log NB(x | mu, theta))^2] per gene.

    Samples x ~ NB(mu, theta) through the Gamma-Poisson mixture and averages
    the squared score x/mu - (theta + x)/(theta + mu). Independent of the
    closed form in nb_fim_weights; used to validate it.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    if n_samples < 10**4:
        raise ValueError("need at least 1e4 samples for a stable estimate")
    rng = np.random.default_rng(seed)
    out = np.zeros(mu.shape)
    chunk = 200_000
    for g in range(mu.size):
        total = 0.0
        done = 0
        while done < n_samples:
            n = min(chunk, n_samples - done)
            rate = rng.gamma(shape=theta[g], scale=mu[g] / theta[g], size=n)
            x = rng.poisson(rate).astype(np.float64)
            score = x / mu[g] - (theta[g] + x) / (theta[g] + mu[g])
            total += np.sum(score * score)
            done += n
        out[g] = total / n_samples
    return out


@dataclass
class MetricCache:
    """Intermediates of a batched metric evaluation, kept for the VJP."""

    trunk_view: nn.MLP
    nn_cache: tuple
    l: np.ndarray  # (B,)
    theta: np.ndarray  # (G,)
    q: np.ndarray  # (B, G) softmax proportions
    jac_logits: np.ndarray  # (B, G, d)
    s: np.ndarray  # (B, d) q^T J
    mu: np.ndarray  # (B, G)
    w: np.ndarray  # (B, G)
    A: np.ndarray  # (B, G, d) decoder-mean Jacobians
    M: np.ndarray  # (B, d, d)


def metric_tangent(trunk: nn.MLP, log_theta, Z, ls) -> tuple[np.ndarray, MetricCache]:
    """Batched pullback metric M(z) for a softmax-final decoder trunk.

    Z: (B, d) latent points, ls: (B,) size factors. Returns (M, cache) where
    M is (B, d, d) and cache supports metric_vjp.
    """
    Z = np.asarray(Z, dtype=np.float64)
    ls = np.asarray(ls, dtype=np.float64)
    if Z.ndim != 2 or ls.shape != (Z.shape[0],):
        raise ValueError("Z must be (B, d) and ls (B,)")
    if np.any(ls <= 0):
        raise ValueError("size factors must be positive")
    view = nn.strip_final_softmax(trunk)
    logits, jac, cache = nn.tangent_forward(view, Z)
    if not np.all(np.isfinite(jac)):
        raise FloatingPointError("non-finite decoder Jacobian")
    theta = np.exp(np.asarray(log_theta, dtype=np.float64))
    q = nn.softmax(logits)
    s = np.einsum("bg,bgd->bd", q, jac)
    A = ls[:, None, None] * q[:, :, None] * (jac - s[:, None, :])
    mu = ls[:, None] * q
    w = theta / (mu * (mu + theta))
    M = np.einsum("bg,bgi,bgj->bij", w, A, A)
    return M, MetricCache(view, cache, ls, theta, q, jac, s, mu, w, A, M)


def metric_vjp(cache: MetricCache, m_bar, mu_bar_extra=None, with_params=True):
    """Reverse-mode step through metric_tangent.

    m_bar: (B, d, d) gradient of a scalar loss w.r.t. M. mu_bar_extra lets the
    caller fold in a gradient that reaches the decoder mean outside the metric
    (e.g. the likelihood term), so the trunk is traversed once. Returns
    (z_bar, trunk_grads, log_theta_grad); the last two are None when
    with_params is False.
    """
    q, jac, A, w, mu = cache.q, cache.jac_logits, cache.A, cache.w, cache.mu
    ls, theta = cache.l, cache.theta
    m_sym = m_bar + np.transpose(m_bar, (0, 2, 1))
    a_bar = w[:, :, None] * np.einsum("bgi,bij->bgj", A, m_sym)
    w_bar = np.einsum("bgi,bji,bgj->bg", A, m_bar, A)
    dw_dmu = -theta * (2.0 * mu + theta) / (mu * (mu + theta)) ** 2
    mu_bar = w_bar * dw_dmu
    if mu_bar_extra is not None:
        mu_bar = mu_bar + mu_bar_extra
    r = np.einsum("bg,bgd->bd", q, a_bar)
    q_bar = ls[:, None] * mu_bar + ls[:, None] * (
        np.einsum("bgd,bgd->bg", a_bar, jac - cache.s[:, None, :])
        - np.einsum("bgd,bd->bg", jac, r)
    )
    jac_bar = ls[:, None, None] * q[:, :, None] * (a_bar - r[:, None, :])
    o_bar = q * (q_bar - (q * q_bar).sum(axis=1, keepdims=True))
    z_bar, grads = nn.tangent_backward(cache.trunk_view, cache.nn_cache, o_bar, jac_bar)
    if not with_params:
        return z_bar, None, None
    log_theta_grad = theta * (w_bar / (mu + theta) ** 2).sum(axis=0)
    return z_bar, grads, log_theta_grad


def pullback_metric(model, z, l) -> np.ndarray:
    """Pullback metric of the decoder at a single latent point (d x d)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent point must be finite")
    M, _ = metric_tangent(model.trunk, model.log_theta, z[None, :], np.array([float(l)]))
    return M[0]


def pullback_metric_batch(model, Z, ls) -> np.ndarray:
    """Pullback metrics for a batch of latent points ((B, d, d))."""
    M, _ = metric_tangent(model.trunk, model.log_theta, Z, ls)
    return M


def flattening_loss(metrics, alpha) -> float:
    """Mean squared Frobenius distance of the metric batch to alpha * I."""
    M = np.asarray(metrics, dtype=np.float64)
    if M.ndim == 2:
        M = M[None]
    if M.ndim != 3 or M.shape[1] != M.shape[2]:
        raise ValueError("metrics must be (B, d, d)")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    diff = M - alpha * np.eye(M.shape[1])
    return float(np.mean((diff * diff).sum(axis=(1, 2))))


def magnification_factor(M) -> float:
    """Local volume distortion sqrt(det M) of a PSD metric tensor."""
    M = np.asarray(M, dtype=np.float64)
    det = float(np.linalg.det(M))
    hadamard = float(np.prod(np.linalg.norm(M, axis=1)))
    tol = 1e-8 * max(1.0, hadamard)
    if det < -tol:
        raise ValueError(f"metric determinant is negative ({det:g})")
    return float(np.sqrt(max(det, 0.0)))


def affine_invariant_distance_sq(a, b) -> float:
    """Squared affine-invariant distance sum_k log^2 lambda_k(B^-1 A).

    Both arguments must be symmetric positive definite. Eigenvalues are
    computed by Cholesky whitening of b for stability.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    try:
        L = cholesky(b, lower=True)
    except LinAlgError as exc:
        raise ValueError("second metric is singular") from exc
    x = solve_triangular(L, a, lower=True)
    c = solve_triangular(L, x.T, lower=True).T
    c = 0.5 * (c + c.T)
    eigs = np.linalg.eigvalsh(c)
    if np.any(eigs <= 0):
        raise ValueError("first metric is singular")
    logs = np.log(eigs)
    return float(np.dot(logs, logs))


def vor(metrics, reg_eps=1e-8) -> float:
    """Variance of the Riemannian metric over a batch of metric tensors.

    Mean squared affine-invariant distance between each regularized metric
    and the regularized batch mean. Zero iff the metric is constant over the
    batch.
    """
    M = np.asarray(metrics, dtype=np.float64)
    if M.ndim != 3 or M.shape[0] < 2:
        raise ValueError("need at least two metrics")
    eye = reg_eps * np.eye(M.shape[1])
    mean = M.mean(axis=0) + eye
    return float(np.mean([affine_invariant_distance_sq(m + eye, mean) for m in M]))


def curve_length(points, metric_batch_fn) -> float:
    """Length of a piecewise-linear curve with midpoint metric evaluation."""
    points = np.asarray(points, dtype=np.float64)
    deltas = np.diff(points, axis=0)
    mids = 0.5 * (points[:-1] + points[1:])
    Ms = metric_batch_fn(mids)
    quad = np.einsum("ki,kij,kj->k", deltas, Ms, deltas)
    return float(np.sum(np.sqrt(np.clip(quad, 0.0, None))))


def minimize_curve_energy(
    metric_batch_fn,
    quad_grad_fn,
    z1,
    z2,
    segments=16,
    iters=200,
    lr=0.05,
):
    """Gradient descent on the discretized curve energy between two endpoints.

    The curve starts as the straight line; interior points are optimized with
    Adam on E = K * sum_k d_k^T M(mid_k) d_k. quad_grad_fn(mids, deltas) must
    return the gradient of d^T M(z) d with respect to z at each midpoint.
    Returns (best_length, best_path); the best length never exceeds the
    straight-line length of the same discretization.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    K = int(segments)
    if K < 2:
        raise ValueError("need at least two segments")
    ts = np.linspace(0.0, 1.0, K + 1)[:, None]
    path = (1.0 - ts) * z1[None, :] + ts * z2[None, :]
    best_path = path.copy()
    best_length = curve_length(path, metric_batch_fn)
    if np.allclose(z1, z2):
        return best_length, best_path
    interior = path[1:-1]
    state = nn.AdamState([interior], lr=lr)
    for _ in range(int(iters)):
        deltas = np.diff(path, axis=0)
        mids = 0.5 * (path[:-1] + path[1:])
        Ms = metric_batch_fn(mids)
        quad = np.einsum("ki,kij,kj->k", deltas, Ms, deltas)
        length = float(np.sum(np.sqrt(np.clip(quad, 0.0, None))))
        if length < best_length:
            best_length = length
            best_path = path.copy()
        g_quad = quad_grad_fn(mids, deltas)
        md = np.einsum("kij,kj->ki", Ms, deltas)
        grad = K * (2.0 * (md[:-1] - md[1:]) + 0.5 * (g_quad[:-1] + g_quad[1:]))
        nn.adam_step([interior], [grad], state)
    final_length = curve_length(path, metric_batch_fn)
    if final_length < best_length:
        best_length = final_length
        best_path = path.copy()
    return best_length, best_path


def geodesic_distance(model, z1, z2, l, segments=16, iters=200, lr=0.05):
    """Approximate geodesic length between two latent points under the model.

    The metric needs a size factor; `l` fixes it along the whole curve
    (typically a dataset median). Returns (length, path array (K+1, d)).
    """

    def metric_fn(Z):
        return pullback_metric_batch(model, Z, np.full(Z.shape[0], float(l)))

    def quad_grad(Z, V):
        _, cache = metric_tangent(
            model.trunk, model.log_theta, Z, np.full(Z.shape[0], float(l))
        )
        m_bar = np.einsum("ki,kj->kij", V, V)
        z_bar, _, _ = metric_vjp(cache, m_bar, with_params=False)
        return z_bar

    return minimize_curve_energy(
        metric_fn, quad_grad, z1, z2, segments=segments, iters=iters, lr=lr
    )
