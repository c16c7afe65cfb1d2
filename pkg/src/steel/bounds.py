"""Risk certificates and the bounded losses they are stated for.

Three families:

* ``finite-hypothesis``: ``r + C sqrt(ln(M/eps) / 2n)`` for a hypothesis set
  of size ``M`` fixed before seeing the data.
* ``quantization``: ``r + C sqrt((K + 2 ln K + ln(1/eps)) / 2n)`` where ``K``
  is the coded bit length of the parameters.
* ``vanilla-pb``: ``E_Q r + sqrt((KL(Q||P) + ln(1/eps)) / 2n)`` for a
  diagonal Gaussian posterior and isotropic Gaussian prior.

All logarithms are natural except the base-2 code lengths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument
from .numerics import OptimizerState, kmeans_cluster, optimizer_step
from .zoo import head_logits, softmax


@dataclass
class RiskCertificate:
    family: str
    r: float
    complexity: float
    n: int
    epsilon: float
    C: float
    M: int | None = None
    K: float | None = None
    KL: float | None = None
    loss_name: str = "zero_one"
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def bound(self) -> float:
        return self.r + self.complexity

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound"] = self.bound
        if not d["extra"]:
            del d["extra"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RiskCertificate":
        d = {k: v for k, v in d.items() if k != "bound"}
        return cls(**d)


def _check_common(r, n, eps, C):
    if not 0.0 < eps < 1.0:
        raise InvalidArgument(f"epsilon must lie in (0, 1), got {eps}")
    if n < 1:
        raise InvalidArgument("sample size n must be at least 1")
    if C <= 0:
        raise InvalidArgument("loss bound C must be positive")
    if not -1e-12 <= r <= C + 1e-12:
        raise InvalidArgument(f"empirical risk {r} outside [0, {C}]")


def finite_hypothesis_complexity(M: int, n: int, eps: float, C: float = 1.0) -> float:
    return C * math.sqrt(math.log(M / eps) / (2 * n))


def finite_hypothesis_certificate(r: float, M: int, n: int, eps: float = 0.05,
                                  C: float = 1.0, loss_name: str = "zero_one") -> RiskCertificate:
    _check_common(r, n, eps, C)
    if M < 1:
        raise InvalidArgument("hypothesis set size must be at least 1")
    return RiskCertificate("finite-hypothesis", float(r),
                           finite_hypothesis_complexity(M, n, eps, C),
                           int(n), eps, C, M=int(M), loss_name=loss_name)


@dataclass
class QuantizationCodec:
    centers: np.ndarray
    counts: np.ndarray
    codebook_bits: int = 32

    @property
    def levels(self) -> int:
        return len(self.centers)

    def code_length(self) -> float:
        """Ideal entropy-coded payload in bits, ``sum_i -log2 p(c_i)``."""
        total = self.counts.sum()
        p = self.counts[self.counts > 0] / total
        return float(-(self.counts[self.counts > 0] * np.log2(p)).sum())


def fit_codec(theta, levels: int = 16, seed: int = 0, codebook_bits: int = 32) -> QuantizationCodec:
    """1-D k-means codebook over the entries of ``theta``.

    Entries are clustered in sorted order so the codebook ignores their layout.
    """
    v = np.asarray(theta, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise InvalidArgument("cannot quantize an empty parameter vector")
    if levels < 1:
        raise InvalidArgument("need at least one quantization level")
    distinct = np.unique(v)
    if len(distinct) <= levels:
        centers = distinct
    else:
        centers = np.sort(kmeans_cluster(np.sort(v)[:, None], levels, seed=seed).centroids[:, 0])
    assign = np.abs(v[:, None] - centers[None, :]).argmin(1)
    counts = np.bincount(assign, minlength=len(centers))
    keep = counts > 0
    return QuantizationCodec(centers[keep], counts[keep], codebook_bits)


def quantization_complexity(theta, levels: int = 16, include_codebook: bool = True,
                            margin_bits: int = 2, seed: int = 0) -> int:
    """Bit count ``K`` of the quantized parameters.

    ``ceil(code length) + 32 * levels_used`` plus ``margin_bits`` to cover a
    real arithmetic coder's overhead over the ideal length. Never below 1.
    """
    codec = fit_codec(theta, levels, seed)
    k = math.ceil(codec.code_length() - 1e-9) + margin_bits
    if include_codebook:
        k += codec.codebook_bits * codec.levels
    return max(int(k), 1)


def quantization_certificate(r: float, K: float, n: int, eps: float = 0.05,
                             C: float = 1.0, loss_name: str = "zero_one") -> RiskCertificate:
    _check_common(r, n, eps, C)
    if K < 1:
        raise InvalidArgument("bit count K must be at least 1")
    comp = C * math.sqrt((K + 2 * math.log(K) + math.log(1 / eps)) / (2 * n))
    return RiskCertificate("quantization", float(r), comp, int(n), eps, C, K=float(K),
                           loss_name=loss_name)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    sigma: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise InvalidArgument("mu and sigma must have the same shape")


def gaussian_kl(post: GaussianPosterior) -> float:
    """``KL(N(mu, diag sigma^2) || N(0, kappa^2 I))``."""
    if post.kappa <= 0 or np.any(post.sigma <= 0):
        raise InvalidArgument("sigma and kappa must be positive")
    s2, k2 = post.sigma**2, post.kappa**2
    kl = np.log(post.kappa / post.sigma) + (s2 + post.mu**2) / (2 * k2) - 0.5
    return max(float(kl.sum()), 0.0)


# -- bounded losses ---------------------------------------------------------

def zero_one_loss(prediction, label):
    return (np.asarray(prediction) != np.asarray(label)).astype(np.float64)


def bounded_ordinal_loss(label_onehot, probs):
    """Total-variation distance ``sum |y - p| / 2`` between a one-hot label and ``probs``."""
    y = np.asarray(label_onehot, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < -1e-12) or not np.allclose(p.sum(-1), 1.0, atol=1e-9):
        raise InvalidArgument("probs must be a probability distribution")
    return np.abs(y - p).sum(-1) / 2


LOSS_BOUNDS = {"zero_one": 1.0, "ordinal": 1.0}


def per_example_losses(theta, x, y, k: int, loss: str = "zero_one"):
    """Losses of one adapter ``(d,)`` or a stack ``(M, d)`` on ``(x, y)``."""
    z = head_logits(theta, x, k)
    y = np.asarray(y, dtype=np.int64)
    if loss == "zero_one":
        return zero_one_loss(z.argmax(-1), y)
    if loss == "ordinal":
        return bounded_ordinal_loss(np.eye(k)[y], softmax(z))
    raise InvalidArgument(f"unknown loss {loss!r}")


# -- vanilla PAC-Bayes ------------------------------------------------------

@dataclass(frozen=True)
class PacBayesOptConfig:
    steps: int = 500
    lr: float = 1e-2
    mc_samples: int = 16
    eval_mc_samples: int = 256
    sigma_init: float = 1e-2
    kappa: float = 1.0
    seed: int = 0


def _mc_risk(post, x, y, k, loss, n_samples, rng):
    z = rng.standard_normal((n_samples,) + post.mu.shape)
    thetas = post.mu + post.sigma * z
    return float(per_example_losses(thetas, x, y, k, loss).mean())


def _surrogate_and_grad(mu, log_sigma, x, y, k, z):
    """Mean over samples of ``1 - p_y`` (a smooth bounded 0/1 surrogate)
    and its reparameterized gradients."""
    sigma = np.exp(log_sigma)
    thetas = mu + sigma * z
    logits = head_logits(thetas, x, k)
    p = softmax(logits)
    s, n = z.shape[0], len(y)
    py = p[:, np.arange(n), y]
    val = float((1.0 - py).mean())
    # d(-p_y)/dlogits = -p_y (onehot - p)
    onehot = np.zeros_like(p)
    onehot[:, np.arange(n), y] = 1.0
    dlogit = -py[..., None] * (onehot - p) / (s * n)
    gw = np.einsum("mnk,nf->mkf", dlogit, x).reshape(s, -1)
    gb = dlogit.sum(1)
    gtheta = np.concatenate([gw, gb], axis=1)
    return val, gtheta.sum(0), (gtheta * z).sum(0) * sigma


def vanilla_complexity(KL: float, n: int, eps: float = 0.05, C: float = 1.0) -> float:
    """``C sqrt((KL + ln(1/eps)) / (2n))``."""
    _check_common(0.0, n, eps, C)
    if KL < 0:
        raise InvalidArgument("KL must be non-negative")
    return C * math.sqrt((KL + math.log(1 / eps)) / (2 * n))


def vanilla_certificate(r: float, KL: float, n: int, eps: float = 0.05, C: float = 1.0,
                        loss_name: str = "zero_one") -> RiskCertificate:
    _check_common(r, n, eps, C)
    return RiskCertificate("vanilla-pb", float(r), vanilla_complexity(KL, n, eps, C), int(n), eps, C,
                           KL=float(KL), loss_name=loss_name)


def vanilla_pacbayes_certificate(post: GaussianPosterior, x, y, k: int, eps: float = 0.05,
                                 config: PacBayesOptConfig = PacBayesOptConfig(),
                                 optimize: bool = True, loss: str = "zero_one") -> tuple:
    """Optionally minimize the bound over ``(mu, log sigma)``, then certify.

    Returns ``(certificate, posterior)``. The empirical term is a Monte-Carlo
    estimate of ``E_Q r`` with ``config.eval_mc_samples`` draws.
    """
    n = len(y)
    if n < 1:
        raise InvalidArgument("empty support set")
    rng = np.random.default_rng(config.seed)
    kappa = post.kappa
    log_eps = math.log(1 / eps)
    if optimize and config.steps > 0:
        params = {"mu": post.mu.copy(), "log_sigma": np.log(post.sigma)}
        state = OptimizerState("adam", lr=config.lr)
        for _ in range(config.steps):
            mu, ls = params["mu"], params["log_sigma"]
            sigma = np.exp(ls)
            z = rng.standard_normal((config.mc_samples,) + mu.shape)
            emp, g_mu, g_ls = _surrogate_and_grad(mu, ls, x, y, k, z)
            kl = max(float((np.log(kappa / sigma) + (sigma**2 + mu**2) / (2 * kappa**2) - 0.5).sum()), 0.0)
            root = math.sqrt((kl + log_eps) / (2 * n))
            dcomp_dkl = 1.0 / (4 * n * root)
            g_mu = g_mu + dcomp_dkl * mu / kappa**2
            g_ls = g_ls + dcomp_dkl * (-1.0 + sigma**2 / kappa**2)
            params, state = optimizer_step(state, params, {"mu": g_mu, "log_sigma": g_ls})
        post = GaussianPosterior(params["mu"], np.exp(params["log_sigma"]), kappa)
    kl = gaussian_kl(post)
    r = _mc_risk(post, x, y, k, loss, config.eval_mc_samples, rng)
    comp = vanilla_complexity(kl, n, eps, LOSS_BOUNDS[loss])
    cert = RiskCertificate("vanilla-pb", r, comp, n, eps, LOSS_BOUNDS[loss], KL=kl,
                           loss_name=loss, seed=config.seed,
                           extra={"steps": config.steps if optimize else 0, "lr": config.lr,
                                  "sigma_param": "log", "mc_samples": config.eval_mc_samples})
    return cert, post
