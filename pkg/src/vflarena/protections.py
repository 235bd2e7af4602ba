"""The eight evaluated protection mechanisms, as pure transforms bound to the
training hook points: cut-layer gradient perturbation/pruning (DP-L, ISO, MN,
Marvell, GC, D-SGD), input encoding (MixUp), and the variational bottleneck
module (PRECODE).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, ShapeError
from .numerics import RngStream, Tape, Node, as_tensor2, he_uniform

PROTECTION_KINDS = ("none", "dp_laplace", "iso", "max_norm", "marvell",
                    "gc", "dsgd", "mixup", "precode")

# Strength grids accepted from config; MN and PRECODE are parameter-free.
STRENGTH_GRIDS: dict[str, tuple] = {
    "none": (),
    "dp_laplace": (1e-4, 1e-3, 1e-2, 1e-1),
    "iso": (25.0, 10.0, 5.0, 2.75),
    "max_norm": (),
    "marvell": (12.0, 8.0, 4.0, 2.0),
    "gc": (0.1, 0.25, 0.5, 0.75),
    "dsgd": (18, 12, 6, 4),
    "mixup": (2, 3, 4),
    "precode": (),
}


def stronger_first_key(kind: str, strength) -> float:
    """Sort key so that more protective strengths order first (tie-breaking)."""
    if strength is None:
        return 0.0
    v = float(strength)
    # larger is stronger for noise budgets and mix counts; smaller is stronger
    # for retain ratio (gc) and bin count (dsgd)
    return v if kind in ("gc", "dsgd") else -v


@dataclass(frozen=True)
class ProtectionBinding:
    """One protection with its strength; at most one is active per run."""

    kind: str = "none"
    strength: float | int | None = None

    def __post_init__(self):
        if self.kind not in PROTECTION_KINDS:
            raise ConfigError(f"unknown protection {self.kind!r}")
        s = self.strength
        if self.kind in ("none", "max_norm", "precode"):
            if s is not None:
                raise ConfigError(f"{self.kind} is parameter-free")
            return
        if s is None:
            raise ConfigError(f"{self.kind} requires a strength value")
        if self.kind in ("dp_laplace", "iso") and not s > 0:
            raise ConfigError(f"{self.kind} strength must be > 0")
        if self.kind == "marvell" and s < 0:
            raise ConfigError("marvell budget must be >= 0")
        if self.kind == "gc" and not 0.0 < s <= 1.0:
            raise ConfigError("gc retain ratio must lie in (0, 1]")
        if self.kind == "dsgd" and (int(s) != s or s < 2):
            raise ConfigError("dsgd bin count must be an integer >= 2")
        if self.kind == "mixup" and (int(s) != s or s < 2):
            raise ConfigError("mixup sample count must be an integer >= 2")


NO_PROTECTION = ProtectionBinding("none")


# ---------------------------------------------------------------------------
# Cut-layer gradient perturbations


def dp_laplace(d: np.ndarray, lam: float, rng: RngStream) -> np.ndarray:
    """Elementwise zero-mean Laplace noise with scale lam."""
    d = as_tensor2(d, "d")
    if not lam > 0:
        raise ConfigError("dp_laplace: lambda must be > 0")
    return d + rng.gen.laplace(0.0, lam, size=d.shape)


def iso(d: np.ndarray, alpha: float, rng: RngStream) -> np.ndarray:
    """Isotropic Gaussian noise, sigma = alpha * ||d_max||_2 / sqrt(m)."""
    d = as_tensor2(d, "d")
    if not alpha > 0:
        raise ConfigError("iso: alpha must be > 0")
    d_max = float(np.max(np.linalg.norm(d, axis=1))) if d.size else 0.0
    if d_max == 0.0:
        return d.copy()  # degenerate all-zero batch: sigma is 0
    sigma = alpha * d_max / np.sqrt(d.shape[1])
    return d + rng.gen.normal(0.0, sigma, size=d.shape)


def max_norm(d: np.ndarray, rng: RngStream) -> np.ndarray:
    """Row-dependent multiplicative Gaussian noise that levels expected row
    norms at the batch maximum; zero-norm rows pass through unchanged."""
    d = as_tensor2(d, "d")
    norms = np.linalg.norm(d, axis=1)
    d_max = float(norms.max()) if norms.size else 0.0
    if d_max == 0.0:
        return d.copy()
    out = d.copy()
    nz = norms > 0
    ratio = d_max / norms[nz]
    sigma = np.sqrt(np.maximum(ratio * ratio - 1.0, 0.0))
    eps = rng.gen.standard_normal(int(nz.sum())) * sigma
    out[nz] = d[nz] * (1.0 + eps[:, None])
    return out


def gradient_compress(d: np.ndarray, pi: float) -> np.ndarray:
    """Keep the top ceil(pi * K) elements by magnitude, zero the rest."""
    d = as_tensor2(d, "d")
    if not 0.0 < pi <= 1.0:
        raise ConfigError("gc: retain ratio must lie in (0, 1]")
    if pi == 1.0:
        return d.copy()
    k = d.size
    keep = int(np.ceil(pi * k))
    mags = np.abs(d).ravel()
    threshold = np.partition(mags, k - keep)[k - keep]
    return np.where(np.abs(d) >= threshold, d, 0.0)


def discrete_sgd(d: np.ndarray, n_bins: int) -> np.ndarray:
    """Snap entries within mean +/- 2 std to the nearest of N+1 equal-interval
    endpoints (ties to the lower endpoint); entries outside map to 0."""
    d = as_tensor2(d, "d")
    if n_bins < 2:
        raise ConfigError("dsgd: bin count must be >= 2")
    mu = float(d.mean())
    sd = float(d.std())
    if sd == 0.0:
        return np.full_like(d, mu)  # single-point bin
    lb, ub = mu - 2.0 * sd, mu + 2.0 * sd
    width = (ub - lb) / n_bins
    idx = (d - lb) / width
    w = np.ceil(idx - 0.5)  # nearest endpoint, half-way ties going lower
    snapped = lb + w * width
    inside = (d >= lb) & (d <= ub)
    return np.where(inside, snapped, 0.0)


# ---------------------------------------------------------------------------
# Marvell: label-aware optimized Gaussian noise pair


@dataclass
class MarvellSolution:
    """Noise pair in the rank-1-aligned family.

    Covariances are sigma_par^2 * u u^T + sigma_perp^2 * (I - u u^T)/(m-1),
    so trace(Cov) = sigma_par^2 + sigma_perp^2 per class.  The budget is the
    requested multiplier tau scaled by the squared class-mean gradient
    difference (the signal the noise has to drown).
    """

    direction: np.ndarray
    sigma1_par2: float
    sigma1_perp2: float
    sigma0_par2: float
    sigma0_perp2: float
    rho: float
    tau: float
    budget: float
    dim: int
    # class-conditional Gaussian fit, projected onto the same family
    mean_gap_sq: float = 0.0
    var1_par: float = 0.0
    var1_perp: float = 0.0
    var0_par: float = 0.0
    var0_perp: float = 0.0

    def noise_trace(self) -> float:
        return (self.rho * (self.sigma1_par2 + self.sigma1_perp2)
                + (1.0 - self.rho) * (self.sigma0_par2 + self.sigma0_perp2))

    def objective(self, s1p: float | None = None, s1o: float | None = None,
                  s0p: float | None = None, s0o: float | None = None) -> float:
        """Symmetrized KL between the perturbed class-conditional Gaussians."""
        s1p = self.sigma1_par2 if s1p is None else s1p
        s1o = self.sigma1_perp2 if s1o is None else s1o
        s0p = self.sigma0_par2 if s0p is None else s0p
        s0o = self.sigma0_perp2 if s0o is None else s0o
        tiny = 1e-12 * max(self.mean_gap_sq, self.var1_par, self.var0_par, 1e-30)
        k = self.dim - 1
        lam1 = max(self.var1_par + s1p, tiny)
        lam0 = max(self.var0_par + s0p, tiny)
        nu1 = max(self.var1_perp + s1o / k, tiny)
        nu0 = max(self.var0_perp + s0o / k, tiny)
        parallel = 0.5 * (lam0 / lam1 + lam1 / lam0 - 2.0) \
            + 0.5 * self.mean_gap_sq * (1.0 / lam1 + 1.0 / lam0)
        perp = k * 0.5 * (nu0 / nu1 + nu1 / nu0 - 2.0)
        return parallel + perp


def _family_fit(grads: np.ndarray, u: np.ndarray) -> tuple[float, float]:
    """Project a class's empirical covariance onto the aligned family:
    variance along u and the average perpendicular per-dim variance."""
    centered = grads - grads.mean(axis=0, keepdims=True)
    proj = centered @ u
    var_par = float(np.mean(proj ** 2))
    total = float(np.mean(np.sum(centered ** 2, axis=1)))
    var_perp = max(total - var_par, 0.0) / (grads.shape[1] - 1)
    return var_par, var_perp


def marvell_solve(positive_grads: np.ndarray, negative_grads: np.ndarray,
                  tau: float, sweeps: int = 6) -> MarvellSolution:
    """Minimize the symmetrized KL between perturbed class-conditional gradient
    distributions under the trace budget, by projected coordinate descent over
    the four variances, starting from the budget-matched isotropic split."""
    pos = as_tensor2(positive_grads, "positive_grads")
    neg = as_tensor2(negative_grads, "negative_grads")
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ConfigError("marvell_solve: both classes must be present")
    if pos.shape[1] != neg.shape[1]:
        raise ShapeError("marvell_solve: gradient widths differ")
    m = pos.shape[1]
    if m < 2:
        raise ConfigError("marvell_solve: gradient dimension must be >= 2")
    if tau < 0:
        raise ConfigError("marvell_solve: budget must be >= 0")

    gap = pos.mean(axis=0) - neg.mean(axis=0)
    gap_norm = float(np.linalg.norm(gap))
    u = gap / gap_norm if gap_norm > 0 else np.eye(m)[0]
    rho = pos.shape[0] / (pos.shape[0] + neg.shape[0])
    budget = tau * gap_norm ** 2

    v1p, v1o = _family_fit(pos, u)
    v0p, v0o = _family_fit(neg, u)
    sol = MarvellSolution(direction=u, sigma1_par2=0.0, sigma1_perp2=0.0,
                          sigma0_par2=0.0, sigma0_perp2=0.0, rho=rho, tau=tau,
                          budget=budget, dim=m, mean_gap_sq=gap_norm ** 2,
                          var1_par=v1p, var1_perp=v1o, var0_par=v0p, var0_perp=v0o)
    if budget == 0.0:
        return sol

    # start at the budget-matched isotropic split (same noise for both
    # classes, equal per-dim variance); descent can only improve on it
    values = [budget / m, budget * (m - 1) / m, budget / m, budget * (m - 1) / m]
    weights = [rho, rho, 1.0 - rho, 1.0 - rho]

    def with_coord(i: int, v: float) -> float:
        trial = list(values)
        trial[i] = v
        return sol.objective(*trial)

    for _ in range(sweeps):
        before = sol.objective(*values)
        for i in range(4):
            spent = sum(w * v for j, (w, v) in enumerate(zip(weights, values)) if j != i)
            cap = max((budget - spent) / weights[i], 0.0)
            if cap <= 0.0:
                values[i] = 0.0
                continue
            res = minimize_scalar(lambda v: with_coord(i, v), bounds=(0.0, cap),
                                  method="bounded", options={"xatol": 1e-10 * max(cap, 1.0)})
            if res.fun <= with_coord(i, values[i]):
                values[i] = float(res.x)
        if before - sol.objective(*values) < 1e-12 * max(before, 1.0):
            break

    sol.sigma1_par2, sol.sigma1_perp2, sol.sigma0_par2, sol.sigma0_perp2 = values
    return sol


def marvell_apply(d: np.ndarray, labels: np.ndarray, sol: MarvellSolution,
                  rng: RngStream) -> np.ndarray:
    """Perturb each row with the noise of its class's optimized distribution."""
    d = as_tensor2(d, "d")
    labels = np.asarray(labels)
    if labels.shape[0] != d.shape[0]:
        raise ShapeError("marvell_apply: label/row count mismatch")
    if labels.size and not np.all(np.isin(labels, (0, 1))):
        raise ConfigError("marvell_apply: binary labels only")
    if d.shape[1] != sol.dim:
        raise ShapeError("marvell_apply: gradient width differs from solution")

    u = sol.direction
    out = d.copy()
    gen = rng.gen
    for cls, s_par2, s_perp2 in ((1, sol.sigma1_par2, sol.sigma1_perp2),
                                 (0, sol.sigma0_par2, sol.sigma0_perp2)):
        rows = np.flatnonzero(labels == cls)
        if rows.size == 0:
            continue
        if s_par2 == 0.0 and s_perp2 == 0.0:
            continue
        zeta = gen.standard_normal(rows.size)
        w = gen.standard_normal((rows.size, sol.dim))
        w_perp = w - np.outer(w @ u, u)
        noise = np.sqrt(s_par2) * np.outer(zeta, u) \
            + np.sqrt(s_perp2 / (sol.dim - 1)) * w_perp
        out[rows] += noise
    return out


def marvell_fallback_iso(d: np.ndarray, tau: float, rng: RngStream) -> np.ndarray:
    """Single-class batch fallback: isotropic noise with the trace budget
    matched to tau times the mean squared row norm (the only signal scale
    available without a class-mean gap)."""
    d = as_tensor2(d, "d")
    scale = float(np.mean(np.sum(d * d, axis=1))) if d.size else 0.0
    budget = tau * scale
    if budget <= 0.0:
        return d.copy()
    sigma = np.sqrt(budget / d.shape[1])
    return d + rng.gen.normal(0.0, sigma, size=d.shape)


# ---------------------------------------------------------------------------
# MixUp


def mixup_batch(features_a: np.ndarray, features_b: np.ndarray,
                onehot_labels: np.ndarray, k: int, rng: RngStream,
                indices: np.ndarray | None = None,
                weights: np.ndarray | None = None):
    """Convex combinations of k distinct batch rows with flat-Dirichlet weights.

    The same index set and weights apply to both party shards and to the
    labels (shared-permutation contract).  `indices`/`weights` can be passed
    explicitly, for deterministic blends.
    """
    fa = np.ascontiguousarray(features_a, dtype=np.float64)
    fb = as_tensor2(features_b, "features_b")
    y = as_tensor2(onehot_labels, "onehot_labels")
    b = fb.shape[0]
    if fa.shape[0] != b or y.shape[0] != b:
        raise ShapeError("mixup_batch: row counts differ across inputs")
    if k < 2:
        raise ConfigError("mixup: k must be >= 2")
    if k > b:
        raise ConfigError(f"mixup: k={k} exceeds batch size {b}")

    if indices is None:
        gen = rng.gen
        indices = np.stack([gen.choice(b, size=k, replace=False) for _ in range(b)])
    else:
        indices = np.asarray(indices, dtype=np.int64)
    if weights is None:
        weights = rng.gen.dirichlet(np.ones(k), size=indices.shape[0])
    else:
        weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != indices.shape:
        raise ShapeError("mixup_batch: weights/indices shapes differ")

    mixed_a = np.einsum("vk,vkf->vf", weights, fa[indices]) if fa.shape[1] else fa[:indices.shape[0]]
    mixed_b = np.einsum("vk,vkf->vf", weights, fb[indices])
    mixed_y = np.einsum("vk,vkc->vc", weights, y[indices])
    return mixed_a, mixed_b, mixed_y


# ---------------------------------------------------------------------------
# PRECODE: variational bottleneck between party B's bottom output and the cut layer


class PrecodeBottleneck:
    """Encoder to (mu, log sigma), reparameterized sample, decoder back to the
    cut-layer width; KL(N(mu, sigma) || N(0, 1)) joins the loss with weight beta."""

    def __init__(self, width: int, rng: RngStream, latent: int | None = None,
                 log_sigma_init: float = -2.0):
        latent = width if latent is None else latent
        self.width = width
        self.latent = latent
        # near-identity start: the mean head passes q through, the spread head
        # emits a small constant, the decoder inverts the mean head; training
        # then trades reconstruction against the KL pull without blowing up
        if latent == width:
            mu_head = np.eye(width)
            dec = np.eye(width)
        else:
            mu_head = he_uniform(rng.child("enc_w"), width, (width, latent)) * 0.3
            dec = he_uniform(rng.child("dec_w"), latent, (latent, width)) * 0.3
        self.enc_w = np.concatenate([mu_head, np.zeros((width, latent))], axis=1)
        self.enc_b = np.zeros((1, 2 * latent))
        self.enc_b[:, latent:] = log_sigma_init
        self.dec_w = dec
        self.dec_b = np.zeros((1, width))

    def parameters(self) -> list[np.ndarray]:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def apply(self, tape: Tape, q: Node, zeta: np.ndarray | None,
              params: list[Node]) -> tuple[Node, Node]:
        """Build the bottleneck on a tape; zeta=None uses the mean path."""
        enc_w, enc_b, dec_w, dec_b = params
        h = tape.add_bias(tape.matmul(q, enc_w), enc_b)
        mu = tape.slice_cols(h, 0, self.latent)
        log_sigma = tape.slice_cols(h, self.latent, 2 * self.latent)
        if zeta is None:
            o = mu
        else:
            o = tape.gauss_reparam(mu, log_sigma, zeta)
        q_hat = tape.add_bias(tape.matmul(o, dec_w), dec_b)
        kl = tape.gaussian_kl(mu, log_sigma)
        return q_hat, kl

    def forward(self, q: np.ndarray, zeta: np.ndarray | None = None):
        """Plain-array forward pass; returns (q_hat, kl_term)."""
        tape = Tape()
        q_node = tape.leaf(as_tensor2(q, "q"))
        params = [tape.leaf(p) for p in self.parameters()]
        q_hat, kl = self.apply(tape, q_node, zeta, params)
        return q_hat.value, float(kl.value)


def precode_bottleneck(q: np.ndarray, module: PrecodeBottleneck,
                       rng: RngStream) -> tuple[np.ndarray, float]:
    """Sampled bottleneck pass with a fresh standard-normal draw."""
    q = as_tensor2(q, "q")
    zeta = rng.gen.standard_normal((q.shape[0], module.latent))
    return module.forward(q, zeta)


# ---------------------------------------------------------------------------
# Hook: one entry point the engine calls on every outgoing d^B


def protect_cut_gradient(d: np.ndarray, binding: ProtectionBinding,
                         batch_labels: np.ndarray | None,
                         rng: RngStream) -> np.ndarray:
    """Apply a d^B-perturbing protection; input is never mutated.

    MixUp and PRECODE act upstream of the cut layer and leave d^B alone;
    Marvell on a single-class batch falls back to budget-matched isotropic
    noise (no class gap to align with).
    """
    kind = binding.kind
    if kind in ("none", "mixup", "precode"):
        return d
    if kind == "dp_laplace":
        return dp_laplace(d, float(binding.strength), rng)
    if kind == "iso":
        return iso(d, float(binding.strength), rng)
    if kind == "max_norm":
        return max_norm(d, rng)
    if kind == "gc":
        return gradient_compress(d, float(binding.strength))
    if kind == "dsgd":
        return discrete_sgd(d, int(binding.strength))
    if kind == "marvell":
        tau = float(binding.strength)
        if tau == 0.0:
            return d.copy()
        if batch_labels is None:
            raise ConfigError("marvell needs batch labels at the hook point")
        labels = np.asarray(batch_labels)
        pos, neg = d[labels == 1], d[labels == 0]
        if pos.shape[0] == 0 or neg.shape[0] == 0:
            return marvell_fallback_iso(d, tau, rng)
        sol = marvell_solve(pos, neg, tau)
        return marvell_apply(d, labels, sol, rng)
    raise ConfigError(f"unknown protection {kind!r}")
