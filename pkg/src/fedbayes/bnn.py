"""Mean-field Gaussian Bayesian MLP trained by minimising the negative ELBO.

Every weight has a variational mean ``mu`` and an unconstrained ``rho`` with
``sigma = softplus(rho)``. A forward pass draws ``w = mu + sigma * eps`` and
keeps ``eps`` so the backward pass can form pathwise gradients. The same
class in ``deterministic`` mode ignores ``rho`` entirely and is the plain
FedAvg network.

Parameters live in two flat float64 vectors (all means, all rhos) laid out
layer by layer, weight matrix (row-major) then bias. Per-layer tensors are
views into them.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .numkernel import (
    DimensionError,
    RngStream,
    softmax,
    softmax_xent_batch,
    softplus,
    softplus_deriv,
    softplus_inv,
)

BAYESIAN = "bayesian"
DETERMINISTIC = "deterministic"
MODES = (BAYESIAN, DETERMINISTIC)

TAGS = ("muW", "rhoW", "mub", "rhob")


class ContractError(RuntimeError):
    """Operation called on a net in a mode where it is undefined."""


class FormatError(ValueError):
    """Malformed serialized net."""


@dataclass
class VariationalLayer:
    mu_W: np.ndarray
    rho_W: np.ndarray
    mu_b: np.ndarray
    rho_b: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mu_W.shape

    def tensors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.mu_W, self.rho_W, self.mu_b, self.rho_b

    def tensor(self, tag: str) -> np.ndarray:
        return self.tensors()[TAGS.index(tag)]


def _offsets(sizes: list[int]) -> list[tuple[int, int, int]]:
    """(start, end_of_W, end_of_b) of every layer inside the flat vectors."""
    out, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w_end = pos + fan_in * fan_out
        out.append((pos, w_end, w_end + fan_out))
        pos = w_end + fan_out
    return out


def _views(vec: np.ndarray, sizes: list[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(vec[a:b].reshape(fo, fi), vec[b:c])
            for (a, b, c), fi, fo in zip(_offsets(sizes), sizes[:-1], sizes[1:])]


class VariationalNet:
    """MLP with ReLU hidden layers and identity output; every weight is ``N(mu, softplus(rho)^2)``."""

    def __init__(self, layers: list[VariationalLayer] | None = None, mode: str = BAYESIAN, *,
                 sizes: list[int] | None = None, mu: np.ndarray | None = None, rho: np.ndarray | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        if layers is not None:
            if not layers:
                raise DimensionError("a net needs at least one layer")
            sizes = [np.shape(layers[0].mu_W)[1]] + [np.shape(l.mu_W)[0] for l in layers]
            mus, rhos = [], []
            for i, layer in enumerate(layers):
                mW, rW, mb, rb = (np.asarray(t, dtype=np.float64) for t in layer.tensors())
                fo, fi = sizes[i + 1], sizes[i]
                if mW.shape != (fo, fi):
                    raise DimensionError(
                        f"layer {i} weight shape {mW.shape} does not compose with {fi} inputs")
                if rW.shape != mW.shape or mb.shape != (fo,) or rb.shape != (fo,):
                    raise DimensionError(f"layer {i}: mu/rho/bias shapes do not match")
                mus += [mW.ravel(), mb]
                rhos += [rW.ravel(), rb]
            mu, rho = np.concatenate(mus), np.concatenate(rhos)
        if sizes is None or mu is None or rho is None:
            raise ValueError("give either layers or sizes+mu+rho")
        self.sizes = [int(s) for s in sizes]
        n = _offsets(self.sizes)[-1][2]
        self.mu = np.array(mu, dtype=np.float64)
        self.rho = np.array(rho, dtype=np.float64)
        if self.mu.shape != (n,) or self.rho.shape != (n,):
            raise DimensionError(f"sizes {self.sizes} need {n} parameters, got {self.mu.shape}/{self.rho.shape}")

    def __repr__(self):
        return f"VariationalNet(sizes={self.sizes}, mode={self.mode!r})"

    @property
    def layers(self) -> list[VariationalLayer]:
        return [VariationalLayer(mW, rW, mb, rb)
                for (mW, mb), (rW, rb) in zip(_views(self.mu, self.sizes), _views(self.rho, self.sizes))]

    @property
    def n_params(self) -> int:
        """Number of weights (each carrying a mean and a rho)."""
        return self.mu.size

    def copy(self) -> "VariationalNet":
        return VariationalNet(mode=self.mode, sizes=self.sizes, mu=self.mu, rho=self.rho)

    def as_mode(self, mode: str) -> "VariationalNet":
        return VariationalNet(mode=mode, sizes=self.sizes, mu=self.mu, rho=self.rho)

    def tensors(self) -> Iterator[np.ndarray]:
        for layer in self.layers:
            yield from layer.tensors()

    def flat(self) -> np.ndarray:
        """All means followed by all rhos."""
        return np.concatenate([self.mu, self.rho])

    def with_flat(self, vec: np.ndarray) -> "VariationalNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * self.mu.size,):
            raise DimensionError(f"flat vector has {vec.size} values, net needs {2 * self.mu.size}")
        return VariationalNet(mode=self.mode, sizes=self.sizes, mu=vec[:self.mu.size], rho=vec[self.mu.size:])

    def sigma(self) -> np.ndarray:
        return softplus(self.rho)


@dataclass
class Gradients:
    """d loss / d mu and d loss / d rho in the net's flat layout."""

    sizes: list[int]
    mu: np.ndarray
    rho: np.ndarray

    @property
    def layers(self) -> list[VariationalLayer]:
        return [VariationalLayer(mW, rW, mb, rb)
                for (mW, mb), (rW, rb) in zip(_views(self.mu, self.sizes), _views(self.rho, self.sizes))]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.rho])


@dataclass(frozen=True)
class Prior:
    mu0: float = 0.0
    sigma0: float = 1.0

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("prior sigma0 must be positive")


@dataclass
class ElboBreakdown:
    nll: float
    kl: float
    kl_scale: float
    loss: float


@dataclass
class RealizedWeights:
    """Concrete weights of one posterior draw plus the noise that produced them."""

    sizes: list[int]
    w: np.ndarray
    eps: np.ndarray | None = None

    @property
    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _views(self.w, self.sizes)


def init_net(sizes: list[int], rng: RngStream, init_sigma: float = 0.05, mode: str = BAYESIAN) -> VariationalNet:
    """Means uniform in +-1/sqrt(fan_in); every sigma equal to ``init_sigma``."""
    if len(sizes) < 2:
        raise DimensionError("sizes needs an input and an output width")
    parts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(fan_out * fan_in, -bound, bound))
        parts.append(rng.uniform(fan_out, -bound, bound))
    mu = np.concatenate(parts)
    return VariationalNet(mode=mode, sizes=sizes, mu=mu, rho=np.full(mu.size, softplus_inv(init_sigma)))


def draw_noise(net: VariationalNet, rng: RngStream) -> np.ndarray:
    """Standard-normal eps for every weight, in flat layout."""
    return rng.normal(net.n_params)


def realize(net: VariationalNet, eps: np.ndarray | None, sigma: np.ndarray | None = None) -> RealizedWeights:
    if net.mode == DETERMINISTIC or eps is None:
        return RealizedWeights(net.sizes, net.mu, None)
    if sigma is None:
        sigma = softplus(net.rho)
    return RealizedWeights(net.sizes, net.mu + sigma * eps, eps)


def sample_weights(net: VariationalNet, rng: RngStream | None) -> RealizedWeights:
    if net.mode == DETERMINISTIC:
        return realize(net, None)
    return realize(net, draw_noise(net, rng))


def _forward(weights, X: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the input to every layer (needed for backprop)."""
    acts = [X]
    h = X
    last = len(weights) - 1
    for i, (W, b) in enumerate(weights):
        z = h @ W.T + b
        if i == last:
            return z, acts
        h = np.maximum(z, 0.0)
        acts.append(h)
    raise AssertionError("unreachable")


def _backward(weights, acts, dlogits: np.ndarray, out: np.ndarray, sizes: list[int]) -> None:
    """Accumulate d loss / d w into the flat vector ``out``."""
    views = _views(out, sizes)
    delta = dlogits
    for i in range(len(weights) - 1, -1, -1):
        gW, gb = views[i]
        gW += delta.T @ acts[i]
        gb += delta.sum(axis=0)
        if i:
            delta = (delta @ weights[i][0]) * (acts[i] > 0)


def logits(net: VariationalNet, X: np.ndarray, eps: np.ndarray | None = None) -> np.ndarray:
    return _forward(realize(net, eps).weights, np.asarray(X, dtype=np.float64))[0]


def _kl_terms(mu: np.ndarray, sigma: np.ndarray, prior: Prior) -> float:
    s0 = prior.sigma0
    return float(np.sum(np.log(s0 / sigma) + (sigma**2 + (mu - prior.mu0) ** 2) / (2 * s0**2) - 0.5))


def kl_diag_gauss(net: VariationalNet, prior: Prior) -> float:
    """Closed-form KL(q || p) summed over every weight and bias."""
    if net.mode != BAYESIAN:
        raise ContractError("KL is undefined for a deterministic (point-mass) net")
    return _kl_terms(net.mu, softplus(net.rho), prior)


def kl_grads(net: VariationalNet, prior: Prior) -> Gradients:
    """Gradient of :func:`kl_diag_gauss` w.r.t. mu and rho."""
    sigma = softplus(net.rho)
    s0sq = prior.sigma0**2
    return Gradients(net.sizes, (net.mu - prior.mu0) / s0sq,
                     (sigma / s0sq - 1.0 / sigma) * softplus_deriv(net.rho))


def _check_batch(net: VariationalNet, X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    if y.shape != (len(X),):
        raise DimensionError(f"labels {y.shape} do not match features {X.shape}")
    if X.shape[1] != net.sizes[0]:
        raise DimensionError(f"net expects {net.sizes[0]} features, batch has {X.shape[1]}")
    return X, y


def loss_and_grad(net: VariationalNet, X, y, prior: Prior, kl_scale: float, noise,
                  want_grad: bool = True) -> tuple[ElboBreakdown, Gradients | None]:
    """Negative-ELBO loss and its gradient for explicit (frozen) noise.

    ``noise`` holds one flat eps vector per Monte-Carlo sample (a list, or a
    2-D array with one row per sample); it is ignored for deterministic nets.
    """
    X, y = _check_batch(net, X, y)
    bayes = net.mode == BAYESIAN
    samples = list(noise) if bayes else [None]
    if bayes and not samples:
        raise ValueError("need at least one Monte-Carlo sample")
    n_mc = len(samples)
    sigma = softplus(net.rho) if bayes else None
    g_w = np.zeros(net.n_params) if want_grad else None
    g_rho = np.zeros(net.n_params) if (want_grad and bayes) else None
    nll = 0.0
    for eps in samples:
        rw = realize(net, eps, sigma)
        weights = rw.weights
        out, acts = _forward(weights, X)
        losses, dlog = softmax_xent_batch(out, y)
        nll += float(losses.mean()) / n_mc
        if want_grad:
            gs = np.zeros(net.n_params)
            _backward(weights, acts, dlog / (len(X) * n_mc), gs, net.sizes)
            g_w += gs
            if bayes:
                g_rho += gs * eps
    kl = 0.0
    scale = kl_scale if bayes else 0.0
    grads = None
    if bayes:
        kl = _kl_terms(net.mu, sigma, prior)
        if want_grad:
            dsig = softplus_deriv(net.rho)
            g_mu = g_w + scale * (net.mu - prior.mu0) / prior.sigma0**2
            g_r = g_rho * dsig + scale * (sigma / prior.sigma0**2 - 1.0 / sigma) * dsig
            grads = Gradients(net.sizes, g_mu, g_r)
    elif want_grad:
        grads = Gradients(net.sizes, g_w, np.zeros(net.n_params))
    return ElboBreakdown(nll=nll, kl=kl, kl_scale=scale, loss=nll + scale * kl), grads


def _noise_for(net: VariationalNet, n_mc: int, rng: RngStream | None):
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    if net.mode != BAYESIAN:
        return None
    return [draw_noise(net, rng) for _ in range(n_mc)]


def elbo_loss(net: VariationalNet, X, y, prior: Prior, n_mc: int, kl_scale: float,
              rng: RngStream | None) -> ElboBreakdown:
    _check_batch(net, X, y)
    return loss_and_grad(net, X, y, prior, kl_scale, _noise_for(net, n_mc, rng), want_grad=False)[0]


def elbo_backward(net: VariationalNet, X, y, prior: Prior, n_mc: int, kl_scale: float,
                  rng: RngStream | None) -> Gradients:
    """Gradient of :func:`elbo_loss`; consumes ``rng`` exactly like it does."""
    _check_batch(net, X, y)
    return loss_and_grad(net, X, y, prior, kl_scale, _noise_for(net, n_mc, rng))[1]


def sgd_step(net: VariationalNet, grads: Gradients, lr: float) -> None:
    """In-place descent step ``p -= lr * grad`` on every mean and rho."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if grads.mu.shape != net.mu.shape or grads.rho.shape != net.rho.shape or list(grads.sizes) != net.sizes:
        raise DimensionError(f"gradient layout {grads.sizes} does not match net {net.sizes}")
    if lr == 0:
        return
    net.mu -= lr * grads.mu
    if net.mode == BAYESIAN:
        net.rho -= lr * grads.rho


def predict_batch(net: VariationalNet, X, n_mc: int, rng: RngStream | None) -> np.ndarray:
    """Posterior predictive class probabilities, one row per input."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    noise = _noise_for(net, n_mc, rng) or [None]
    sigma = softplus(net.rho) if net.mode == BAYESIAN else None
    probs = np.zeros((len(X), net.sizes[-1]))
    for eps in noise:
        probs += softmax(_forward(realize(net, eps, sigma).weights, X)[0])
    return probs / len(noise)


def predict(net: VariationalNet, x, n_mc: int, rng: RngStream | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("predict takes a single feature vector")
    return predict_batch(net, x[None, :], n_mc, rng)[0]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MAGIC = b"FBVN"
VERSION = 1
_TAG_BYTES = {"muW": b"muW\0", "rhoW": b"rhoW", "mub": b"mub\0", "rhob": b"rhob"}
_BYTES_TAG = {v: k for k, v in _TAG_BYTES.items()}


def to_bytes(net: VariationalNet) -> bytes:
    """Binary container: magic, version, mode, then one record per tensor.

    Record = layer index (u32), 4-byte tag, ndim (u8), shape (u32 each),
    row-major big-endian float64 values.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack(">BBI", VERSION, MODES.index(net.mode), 4 * len(net.layers)))
    for i, layer in enumerate(net.layers):
        for tag in TAGS:
            t = layer.tensor(tag)
            buf.write(struct.pack(">I", i) + _TAG_BYTES[tag] + struct.pack(">B", t.ndim))
            buf.write(struct.pack(f">{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t, dtype=">f8").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> VariationalNet:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated net container at byte {pos}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}")
    version, mode_idx, n_records = struct.unpack(">BBI", take(6))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if mode_idx >= len(MODES):
        raise FormatError(f"unknown mode byte {mode_idx}")
    records = {}
    for _ in range(n_records):
        (layer_idx,) = struct.unpack(">I", take(4))
        tag = _BYTES_TAG.get(take(4))
        if tag is None:
            raise FormatError(f"unknown tensor tag at byte {pos - 4}")
        (ndim,) = struct.unpack(">B", take(1))
        shape = struct.unpack(f">{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if shape else 1
        records[(layer_idx, tag)] = np.frombuffer(take(8 * count), dtype=">f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError(f"trailing bytes after record {n_records} at byte {pos}")
    return _assemble(records, MODES[mode_idx])


def _assemble(records: dict, mode: str) -> VariationalNet:
    n_layers = 1 + max((i for i, _ in records), default=-1)
    layers = []
    for i in range(n_layers):
        missing = [tag for tag in TAGS if (i, tag) not in records]
        if missing:
            raise FormatError(f"layer {i} is missing tensor {missing[0]}")
        layers.append(VariationalLayer(*(records[(i, tag)] for tag in TAGS)))
    try:
        return VariationalNet(layers, mode)
    except (DimensionError, ValueError) as exc:
        raise FormatError(str(exc)) from None


def to_text(net: VariationalNet) -> str:
    """Line-per-tensor text form: ``layer tag shape v1 v2 ...`` with exact reprs."""
    lines = [f"FBVN-TEXT {VERSION} {net.mode}"]
    for i, layer in enumerate(net.layers):
        for tag in TAGS:
            t = layer.tensor(tag)
            shape = "x".join(str(s) for s in t.shape)
            lines.append(" ".join([str(i), tag, shape] + [repr(float(v)) for v in t.ravel()]))
    return "\n".join(lines) + "\n"


def from_text(text: str) -> VariationalNet:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "FBVN-TEXT":
        raise FormatError("missing FBVN-TEXT header")
    if head[1] != str(VERSION):
        raise FormatError(f"unsupported text version {head[1]}")
    records = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            shape = tuple(int(s) for s in parts[2].split("x"))
            values = np.array([float(v) for v in parts[3:]], dtype=np.float64)
            records[(int(parts[0]), parts[1])] = values.reshape(shape)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
    return _assemble(records, head[2])


def save(net: VariationalNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(net))


def load(path) -> VariationalNet:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
