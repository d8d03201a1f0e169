"""Zero-mean evidential uncertainty head for retrieved temperature profiles.

A small dense network maps profile features (temperature, bootstrap spread,
lapse-rate spread) to the parameters (alpha, beta) of an Inverse-Gamma prior
on the error variance. Minimizing the marginal negative log-likelihood of the
zero-mean error under that prior yields a calibrated per-profile (or
per-range) predictive sigma without a separate mean head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

EPS_BETA = 1e-6


@dataclass
class EvidentialParams:
    """Inverse-Gamma variance prior parameters; alpha > 1, beta > 0 (K^2)."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if np.any(self.alpha <= 1.0):
            raise ValueError("alpha must exceed 1")
        if np.any(self.beta <= 0.0):
            raise ValueError("beta must be positive")


def marginal_nll(delta, alpha, beta):
    """Per-element NLL of the zero-mean Normal/Inverse-Gamma marginal.

    0.5 ln 2pi - alpha ln beta + (alpha + 0.5) ln((delta^2 + 2 beta)/2)
    + ln Gamma(alpha) - ln Gamma(alpha + 0.5)
    """
    delta = np.asarray(delta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    s = (delta * delta + 2.0 * beta) / 2.0
    return (0.5 * np.log(2.0 * np.pi) - alpha * np.log(beta)
            + (alpha + 0.5) * np.log(s) + gammaln(alpha)
            - gammaln(alpha + 0.5))


def marginal_nll_grads(delta, alpha, beta):
    """Analytic partials of marginal_nll w.r.t. (delta, alpha, beta)."""
    delta = np.asarray(delta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    q = delta * delta + 2.0 * beta
    d_delta = (alpha + 0.5) * 2.0 * delta / q
    d_alpha = -np.log(beta) + np.log(q / 2.0) + digamma(alpha) \
        - digamma(alpha + 0.5)
    d_beta = -alpha / beta + (alpha + 0.5) * 2.0 / q
    return d_delta, d_alpha, d_beta


def regularizer(delta, alpha):
    """Evidence penalty |delta| (2 + alpha): large errors demand low evidence."""
    return np.abs(delta) * (2.0 + np.asarray(alpha, dtype=float))


def variance(params: EvidentialParams) -> np.ndarray:
    """Predicted error variance beta/(alpha - 1) in K^2."""
    if np.any(params.alpha <= 1.0):
        raise ValueError("variance undefined for alpha <= 1")
    return params.beta / (params.alpha - 1.0)


def variance_gamma_form(params: EvidentialParams) -> np.ndarray:
    # same quantity through the Gamma-function recurrence; kept as an
    # independent code path for the equality check
    if np.any(params.alpha <= 1.0):
        raise ValueError("variance undefined for alpha <= 1")
    return params.beta * np.exp(gammaln(params.alpha - 1.0)
                                - gammaln(params.alpha))


@dataclass
class ProfileFeatures:
    """Per-range features: T (K), bootstrap T std (K), lapse std (K/m).

    Ranges without valid products carry valid=False; their feature entries
    are zeroed and the validity flag itself is appended as a fourth channel.
    """

    T: np.ndarray
    T_std: np.ndarray
    lapse_std: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=float)
        self.T_std = np.asarray(self.T_std, dtype=float)
        self.lapse_std = np.asarray(self.lapse_std, dtype=float)
        n = self.T.size
        if self.T_std.size != n or self.lapse_std.size != n:
            raise ValueError("feature channels must share one length")
        if self.valid is None:
            self.valid = np.isfinite(self.T) & np.isfinite(self.T_std) \
                & np.isfinite(self.lapse_std)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def n_range(self) -> int:
        return self.T.size

    def vector(self) -> np.ndarray:
        v = self.valid.astype(float)
        chans = [np.where(self.valid, np.nan_to_num(c), 0.0)
                 for c in (self.T, self.T_std, self.lapse_std)]
        return np.concatenate(chans + [v])


@dataclass
class ProfileSample:
    features: ProfileFeatures
    delta: np.ndarray          # T - reference, K, per range
    day: int

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        if self.delta.size != self.features.n_range:
            raise ValueError("delta length must match the feature profile")


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class DenseNet:
    """Two-hidden-layer dense net, 512 units each, rectified linear.

    Output o is mapped to alpha = 1 + softplus(o1), beta = softplus(o2) +
    EPS_BETA so the Inverse-Gamma parameters are valid by construction.
    per_range=False emits one (alpha, beta) for the whole profile.
    """

    n_range: int
    per_range: bool = False
    hidden: int = 512
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    @property
    def n_in(self) -> int:
        return 4 * self.n_range

    @property
    def n_out(self) -> int:
        return 2 * self.n_range if self.per_range else 2

    def init(self, seed=0) -> "DenseNet":
        rng = np.random.default_rng(seed)
        sizes = [self.n_in, self.hidden, self.hidden, self.n_out]
        self.weights = []
        self.biases = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            # He scaling for the rectified hidden units
            self.weights.append(rng.standard_normal((a, b)) * np.sqrt(2.0 / a))
            self.biases.append(np.zeros(b))
        if self.feat_mean is None:
            self.feat_mean = np.zeros(self.n_in)
            self.feat_std = np.ones(self.n_in)
        return self

    def copy(self) -> "DenseNet":
        out = DenseNet(n_range=self.n_range, per_range=self.per_range,
                       hidden=self.hidden,
                       weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases],
                       feat_mean=None if self.feat_mean is None
                       else self.feat_mean.copy(),
                       feat_std=None if self.feat_std is None
                       else self.feat_std.copy())
        return out

    def _forward(self, X):
        z = (X - self.feat_mean) / self.feat_std
        h1 = np.maximum(z @ self.weights[0] + self.biases[0], 0.0)
        h2 = np.maximum(h1 @ self.weights[1] + self.biases[1], 0.0)
        o = h2 @ self.weights[2] + self.biases[2]
        return z, h1, h2, o

    def raw_outputs(self, X) -> np.ndarray:
        return self._forward(np.atleast_2d(np.asarray(X, dtype=float)))[-1]


def _map_outputs(o, per_range):
    # o: (batch, n_out) raw; returns alpha, beta shaped (batch, n_pairs)
    a_raw = o[:, 0::2] if per_range else o[:, :1]
    b_raw = o[:, 1::2] if per_range else o[:, 1:2]
    alpha = 1.0 + _softplus(a_raw)
    beta = _softplus(b_raw) + EPS_BETA
    return alpha, beta, a_raw, b_raw


def predict(net: DenseNet, features: ProfileFeatures
            ) -> tuple[EvidentialParams, np.ndarray]:
    """Forward pass: per-range (alpha, beta) and predicted sigma_e (K)."""
    if features.n_range != net.n_range:
        raise ValueError("feature length does not match the network input")
    o = net.raw_outputs(features.vector()[None, :])
    alpha, beta, _, _ = _map_outputs(o, net.per_range)
    if not net.per_range:
        alpha = np.repeat(alpha, net.n_range, axis=1)
        beta = np.repeat(beta, net.n_range, axis=1)
    params = EvidentialParams(alpha=alpha[0], beta=beta[0])
    return params, np.sqrt(variance(params))


def qc_mask(sigma_e, threshold: float) -> np.ndarray:
    """True where the predicted uncertainty passes the QC threshold."""
    return np.asarray(sigma_e) <= threshold


def availability_curve(sigma_e, thresholds) -> np.ndarray:
    """Fraction of cells passing QC at each threshold (nondecreasing)."""
    s = np.asarray(sigma_e, dtype=float).ravel()
    return np.array([np.mean(s <= t) for t in np.asarray(thresholds)])


def split_days(days, seed=0, fractions=(0.7, 0.15, 0.15)) -> tuple:
    """Disjoint day-wise train/validation/test split of sample indices."""
    days = np.asarray(days)
    uniq = np.unique(days)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(uniq)
    n = uniq.size
    n_tr = max(1, int(round(fractions[0] * n)))
    n_va = max(1, int(round(fractions[1] * n)))
    if n_tr + n_va >= n:
        n_tr = max(1, n - 2)
        n_va = 1
    tr_days, va_days = set(perm[:n_tr]), set(perm[n_tr:n_tr + n_va])
    te_days = set(perm[n_tr + n_va:])
    idx = np.arange(days.size)
    pick = lambda ds: idx[np.isin(days, sorted(ds))]
    return pick(tr_days), pick(va_days), pick(te_days)


def _batch_loss_and_grad(net, X, D, Vmask, lam):
    """Mean total loss over a batch and its weight gradients.

    X: (batch, n_in) raw features; D: (batch, n_range) errors; Vmask masks
    invalid ranges out of the loss. Scalar mode ties one (alpha, beta) to
    every valid range of the profile.
    """
    z, h1, h2, o = net._forward(X)
    alpha, beta, _, _ = _map_outputs(o, net.per_range)
    d2 = D
    m = Vmask.astype(float)
    # broadcast scalar-mode parameters across the profile
    A = alpha if net.per_range else np.broadcast_to(alpha, D.shape)
    Bb = beta if net.per_range else np.broadcast_to(beta, D.shape)
    nll = marginal_nll(d2, A, Bb)
    reg = regularizer(d2, A)
    denom = max(float(m.sum()), 1.0)
    loss = float(np.sum((nll + lam * reg) * m) / denom)

    _, dA, dB = marginal_nll_grads(d2, A, Bb)
    dA = (dA + lam * np.abs(d2)) * m / denom
    dB = dB * m / denom
    if not net.per_range:
        dA = dA.sum(axis=1, keepdims=True)
        dB = dB.sum(axis=1, keepdims=True)
    # chain through the softplus output maps
    a_raw = o[:, 0::2] if net.per_range else o[:, :1]
    b_raw = o[:, 1::2] if net.per_range else o[:, 1:2]
    do = np.zeros_like(o)
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    if net.per_range:
        do[:, 0::2] = dA * sig(a_raw)
        do[:, 1::2] = dB * sig(b_raw)
    else:
        do[:, :1] = dA * sig(a_raw)
        do[:, 1:2] = dB * sig(b_raw)

    gW = [None, None, None]
    gb = [None, None, None]
    gW[2] = h2.T @ do
    gb[2] = do.sum(axis=0)
    dh2 = (do @ net.weights[2].T) * (h2 > 0)
    gW[1] = h1.T @ dh2
    gb[1] = dh2.sum(axis=0)
    dh1 = (dh2 @ net.weights[1].T) * (h1 > 0)
    gW[0] = z.T @ dh1
    gb[0] = dh1.sum(axis=0)
    return loss, gW, gb


def _dataset_arrays(samples):
    X = np.stack([s.features.vector() for s in samples])
    D = np.stack([s.delta for s in samples])
    V = np.stack([s.features.valid for s in samples])
    D = np.where(V, np.nan_to_num(D), 0.0)
    return X, D, V


def _eval_loss(net, X, D, V, lam):
    loss, _, _ = _batch_loss_and_grad(net, X, D, V, lam)
    return loss


def train(samples, lam: float = 0.1, epochs: int = 200, seed=0, *,
          per_range: bool = False, lr: float = 1e-3, batch: int = 64,
          hidden: int = 512) -> DenseNet:
    """Train the evidential head; returns the best-validation checkpoint.

    Samples are grouped by day before splitting so correlated profiles from
    one day never straddle train/validation/test. Adaptive moment updates,
    step 1e-3, minibatch 64. epochs=0 returns the initialized net unchanged.
    If the loss turns non-finite, training aborts at the last finite
    checkpoint.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    n_range = samples[0].features.n_range
    net = DenseNet(n_range=n_range, per_range=per_range, hidden=hidden)
    rng = np.random.default_rng(seed)
    net.init(rng.integers(2**32))
    X, D, V = _dataset_arrays(samples)
    days = np.array([s.day for s in samples])
    i_tr, i_va, i_te = split_days(days, seed=rng.integers(2**32))
    if epochs <= 0:
        return net
    mu = X[i_tr].mean(axis=0)
    sd = X[i_tr].std(axis=0)
    net.feat_mean = mu
    net.feat_std = np.where(sd > 0, sd, 1.0)

    mW = [np.zeros_like(w) for w in net.weights]
    vW = [np.zeros_like(w) for w in net.weights]
    mb = [np.zeros_like(b) for b in net.biases]
    vb = [np.zeros_like(b) for b in net.biases]
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    t = 0
    best = net.copy()
    best_val = _eval_loss(net, X[i_va], D[i_va], V[i_va], lam)
    for _ in range(epochs):
        order = rng.permutation(i_tr)
        diverged = False
        for lo in range(0, order.size, batch):
            sel = order[lo:lo + batch]
            loss, gW, gb = _batch_loss_and_grad(net, X[sel], D[sel], V[sel],
                                                lam)
            if not np.isfinite(loss):
                diverged = True
                break
            t += 1
            for i in range(3):
                mW[i] = b1 * mW[i] + (1 - b1) * gW[i]
                vW[i] = b2 * vW[i] + (1 - b2) * gW[i]**2
                mb[i] = b1 * mb[i] + (1 - b1) * gb[i]
                vb[i] = b2 * vb[i] + (1 - b2) * gb[i]**2
                c1 = 1 - b1**t
                c2 = 1 - b2**t
                net.weights[i] -= lr * (mW[i] / c1) / (np.sqrt(vW[i] / c2)
                                                       + adam_eps)
                net.biases[i] -= lr * (mb[i] / c1) / (np.sqrt(vb[i] / c2)
                                                      + adam_eps)
        if diverged:
            break
        val = _eval_loss(net, X[i_va], D[i_va], V[i_va], lam)
        if np.isfinite(val) and val < best_val:
            best_val = val
            best = net.copy()
    return best


def save_net(net: DenseNet, path: str) -> None:
    """Serialize the network with shapes and feature statistics."""
    arrays = {"format_version": np.array([1]),
              "n_range": np.array([net.n_range]),
              "per_range": np.array([int(net.per_range)]),
              "hidden": np.array([net.hidden]),
              "layer_sizes": np.array([w.shape for w in net.weights]),
              "feat_mean": net.feat_mean, "feat_std": net.feat_std}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_net(path: str) -> DenseNet:
    with np.load(path) as z:
        ver = int(z["format_version"][0])
        if ver != 1:
            raise ValueError(f"unsupported network file version {ver}")
        net = DenseNet(n_range=int(z["n_range"][0]),
                       per_range=bool(z["per_range"][0]),
                       hidden=int(z["hidden"][0]))
        net.weights = [z[f"W{i}"] for i in range(3)]
        net.biases = [z[f"b{i}"] for i in range(3)]
        net.feat_mean = z["feat_mean"]
        net.feat_std = z["feat_std"]
        expect = z["layer_sizes"]
        for w, s in zip(net.weights, expect):
            if tuple(w.shape) != tuple(s):
                raise ValueError("layer shape header mismatch")
    return net
