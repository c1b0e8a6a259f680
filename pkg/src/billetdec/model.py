"""Frame classifier: a small convolutional network with batch norm, written
directly on numpy with hand-derived gradients.

Layout for a (N, 1, 32, 32) batch:

    conv 3x3 (8 filters, pad 1) -> BN -> ReLU -> maxpool 2x2
    conv 3x3 (16 filters, pad 1) -> BN -> ReLU -> maxpool 2x2
    flatten (16*8*8) -> fully connected -> C logits

Batch norm runs in one of two modes.  ``batch_stats`` normalizes with the
current batch's mean/variance (training and adaptation); ``running_stats``
uses the stored running estimates and touches no state (deployment).  The
backward pass differentiates through the batch statistics, which is what
makes entropy gradients w.r.t. the BN affine parameters correct.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Alphabet, softmax
from .ctc import ProbLattice

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"BNET"
CHECKPOINT_VERSION = 1

AFFINE_KEYS = ("bn1_gamma", "bn1_beta", "bn2_gamma", "bn2_beta")


@dataclass
class BNLayerState:
    """Per-channel batch-norm state: running statistics plus the trainable
    affine scale/shift."""

    mu: np.ndarray
    sigma2: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels: int, eps: float = BN_EPS) -> "BNLayerState":
        return cls(
            mu=np.zeros(channels),
            sigma2=np.ones(channels),
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            eps=eps,
        )

    def copy(self) -> "BNLayerState":
        return BNLayerState(
            self.mu.copy(),
            self.sigma2.copy(),
            self.gamma.copy(),
            self.beta.copy(),
            self.eps,
            self.momentum,
        )


@dataclass
class ModelParams:
    """All tensors of the classifier plus the alphabet it predicts over.

    The last class is the CTC blank, so the head has
    ``alphabet.num_classes`` outputs.
    """

    conv1_w: np.ndarray
    conv1_b: np.ndarray
    bn1: BNLayerState
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    bn2: BNLayerState
    fc_w: np.ndarray
    fc_b: np.ndarray
    alphabet: Alphabet

    def trainable(self) -> dict[str, np.ndarray]:
        """Named references to every trainable tensor (updates in place)."""
        return {
            "conv1_w": self.conv1_w,
            "conv1_b": self.conv1_b,
            "bn1_gamma": self.bn1.gamma,
            "bn1_beta": self.bn1.beta,
            "conv2_w": self.conv2_w,
            "conv2_b": self.conv2_b,
            "bn2_gamma": self.bn2.gamma,
            "bn2_beta": self.bn2.beta,
            "fc_w": self.fc_w,
            "fc_b": self.fc_b,
        }

    def affine(self) -> dict[str, np.ndarray]:
        """The BN scale/shift tensors, the only ones adaptation may touch."""
        t = self.trainable()
        return {k: t[k] for k in AFFINE_KEYS}

    def tensors(self) -> dict[str, np.ndarray]:
        """Every tensor including BN running statistics, in a fixed order.

        This is the checkpoint payload and the basis for bit-exact
        comparisons between model states.
        """
        out = self.trainable()
        out.update(
            {
                "bn1_mu": self.bn1.mu,
                "bn1_sigma2": self.bn1.sigma2,
                "bn2_mu": self.bn2.mu,
                "bn2_sigma2": self.bn2.sigma2,
            }
        )
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.conv1_w.copy(),
            self.conv1_b.copy(),
            self.bn1.copy(),
            self.conv2_w.copy(),
            self.conv2_b.copy(),
            self.bn2.copy(),
            self.fc_w.copy(),
            self.fc_b.copy(),
            self.alphabet,
        )


def init_params(alphabet: Alphabet, seed: int = 0) -> ModelParams:
    """He-initialized weights, zero biases, identity batch norm."""
    rng = np.random.default_rng(seed)
    c = alphabet.num_classes

    def he(shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return ModelParams(
        conv1_w=he((8, 1, 3, 3), 9),
        conv1_b=np.zeros(8),
        bn1=BNLayerState.identity(8),
        conv2_w=he((16, 8, 3, 3), 8 * 9),
        conv2_b=np.zeros(16),
        bn2=BNLayerState.identity(16),
        fc_w=he((16 * 8 * 8, c), 16 * 8 * 8),
        fc_b=np.zeros(c),
        alphabet=alphabet,
    )


# ---- layer primitives ----


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3 same-padding patches of (N, C, H, W) as a (N*H*W, C*9) matrix."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def _conv_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, wd = x.shape
    f = w.shape[0]
    cols = _im2col(x)
    out = cols @ w.reshape(f, -1).T + b
    return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2), cols


def _conv_backward(
    cols: np.ndarray,
    x_shape: tuple[int, ...],
    w: np.ndarray,
    dout: np.ndarray,
    need_dx: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    n, c, h, wd = x_shape
    f = w.shape[0]
    drows = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (drows.T @ cols).reshape(w.shape)
    db = drows.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # each output position feeds 9 input positions; accumulate the shifted
    # contributions in a padded buffer instead of gathering patches of dout
    dxp = np.zeros((n, h + 2, wd + 2, c))
    contrib = np.empty((drows.shape[0], c))
    for i in range(3):
        for j in range(3):
            np.matmul(drows, w[:, :, i, j], out=contrib)
            dxp[:, i : i + h, j : j + wd, :] += contrib.reshape(n, h, wd, c)
    dx = np.ascontiguousarray(dxp[:, 1 : 1 + h, 1 : 1 + wd, :].transpose(0, 3, 1, 2))
    return dx, dw, db


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2; keeps the argmax for the backward pass."""
    n, c, h, w = x.shape
    r = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(
    dout: np.ndarray, idx: np.ndarray, x_shape: tuple[int, ...]
) -> np.ndarray:
    n, c, h, w = x_shape
    dr = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dr, idx[..., None], dout[..., None], axis=-1)
    return (
        dr.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_mode: bool
    m: int


def _bn_forward(
    x: np.ndarray, bn: BNLayerState, batch_mode: bool, update_running: bool
) -> tuple[np.ndarray, _BNCache]:
    if batch_mode:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            bn.mu[:] = (1.0 - bn.momentum) * bn.mu + bn.momentum * mu
            bn.sigma2[:] = (1.0 - bn.momentum) * bn.sigma2 + bn.momentum * var
    else:
        mu, var = bn.mu, bn.sigma2
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = x - mu[None, :, None, None]
    xhat *= inv_std[None, :, None, None]
    y = bn.gamma[None, :, None, None] * xhat
    y += bn.beta[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    return y, _BNCache(xhat, inv_std, batch_mode, m)


def _bn_backward(
    dy: np.ndarray, bn: BNLayerState, cache: _BNCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat = cache.xhat
    dgamma = np.einsum("nchw,nchw->c", dy, xhat)
    dbeta = np.einsum("nchw->c", dy)
    dxhat = dy * bn.gamma[None, :, None, None]
    scale = cache.inv_std[None, :, None, None]
    if cache.batch_mode:
        # batch statistics depend on x, so their gradients flow back too
        s1 = np.einsum("nchw->c", dxhat)
        s2 = np.einsum("nchw,nchw->c", dxhat, xhat)
        dxhat *= cache.m
        dxhat -= s1[None, :, None, None]
        dxhat -= xhat * s2[None, :, None, None]
        dxhat *= scale / cache.m
    else:
        dxhat *= scale
    return dxhat, dgamma, dbeta


@dataclass
class ForwardCache:
    x: np.ndarray
    cols1: np.ndarray
    bnc1: _BNCache
    r1: np.ndarray
    idx1: np.ndarray
    p1: np.ndarray
    cols2: np.ndarray
    bnc2: _BNCache
    r2: np.ndarray
    idx2: np.ndarray
    p2: np.ndarray
    flat: np.ndarray


@dataclass
class GradSet:
    """Gradients for every trainable tensor under the given mask.

    With mask ``affine`` only the BN gamma/beta slots are populated; all
    other entries are exactly zero.
    """

    grads: dict[str, np.ndarray]
    mask: str = "all"


def forward(
    params: ModelParams,
    batch: np.ndarray,
    stat_mode: str = "running_stats",
    update_running: bool = True,
) -> tuple[np.ndarray, ForwardCache]:
    """Logits for a (N, 1, H, W) batch, H and W divisible by 4.

    ``batch_stats`` mode needs N >= 2 (a single sample has degenerate
    variance) and, when ``update_running`` is set, folds the batch moments
    into the running statistics with momentum.  ``running_stats`` mode is a
    pure function of its inputs.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != params.conv1_w.shape[1]:
        raise ValueError(f"expected (N, C_in, H, W) batch, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError("spatial dims must be divisible by 4 (two poolings)")
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")
    if stat_mode not in ("batch_stats", "running_stats"):
        raise ValueError(f"unknown stat_mode {stat_mode!r}")
    batch_mode = stat_mode == "batch_stats"
    if batch_mode and x.shape[0] < 2:
        raise ValueError("batch_stats mode needs N >= 2, variance degenerates")

    z1, cols1 = _conv_forward(x, params.conv1_w, params.conv1_b)
    y1, bnc1 = _bn_forward(z1, params.bn1, batch_mode, batch_mode and update_running)
    r1 = np.maximum(y1, 0.0, out=y1)
    p1, idx1 = _pool_forward(r1)
    z2, cols2 = _conv_forward(p1, params.conv2_w, params.conv2_b)
    y2, bnc2 = _bn_forward(z2, params.bn2, batch_mode, batch_mode and update_running)
    r2 = np.maximum(y2, 0.0, out=y2)
    p2, idx2 = _pool_forward(r2)
    flat = p2.reshape(x.shape[0], -1)
    logits = flat @ params.fc_w + params.fc_b
    cache = ForwardCache(
        x, cols1, bnc1, r1, idx1, p1, cols2, bnc2, r2, idx2, p2, flat
    )
    return logits, cache


def backward(
    params: ModelParams,
    cache: ForwardCache,
    dlogits: np.ndarray,
    mask: str = "all",
) -> GradSet:
    """Backpropagate dLoss/dLogits to every trainable tensor.

    ``mask`` is ``all`` or ``affine``; masked-out slots come back as exact
    zeros so optimizer steps cannot move them.
    """
    if mask not in ("all", "affine"):
        raise ValueError(f"unknown mask {mask!r}")
    dl = np.asarray(dlogits, dtype=np.float64)
    if dl.shape != (cache.flat.shape[0], params.fc_w.shape[1]):
        raise ValueError(f"dlogits shape {dl.shape} does not match logits")

    dfc_w = cache.flat.T @ dl
    dfc_b = dl.sum(axis=0)
    dp2 = (dl @ params.fc_w.T).reshape(cache.p2.shape)
    dy2 = _pool_backward(dp2, cache.idx2, cache.r2.shape)
    np.multiply(dy2, cache.r2 > 0.0, out=dy2)
    dz2, dg2, db2 = _bn_backward(dy2, params.bn2, cache.bnc2)
    dp1, dw2, dcb2 = _conv_backward(cache.cols2, cache.p1.shape, params.conv2_w, dz2)
    dy1 = _pool_backward(dp1, cache.idx1, cache.r1.shape)
    np.multiply(dy1, cache.r1 > 0.0, out=dy1)
    dz1, dg1, db1 = _bn_backward(dy1, params.bn1, cache.bnc1)
    _, dw1, dcb1 = _conv_backward(
        cache.cols1, cache.x.shape, params.conv1_w, dz1, need_dx=False
    )

    grads = {
        "conv1_w": dw1,
        "conv1_b": dcb1,
        "bn1_gamma": dg1,
        "bn1_beta": db1,
        "conv2_w": dw2,
        "conv2_b": dcb2,
        "bn2_gamma": dg2,
        "bn2_beta": db2,
        "fc_w": dfc_w,
        "fc_b": dfc_b,
    }
    if mask == "affine":
        for key in grads:
            if key not in AFFINE_KEYS:
                grads[key] = np.zeros_like(grads[key])
    return GradSet(grads, mask)


# ---- losses ----


def entropy_loss_grad(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-row prediction entropy and its gradient w.r.t. the logits.

    For one row with p = softmax(z) and H = -sum(p log p):
    dH/dz_j = -p_j (log p_j + H).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValueError("entropy loss expects a (N, C) logit matrix")
    p = softmax(z, axis=1)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    h = -(p * logp).sum(axis=1)
    loss = float(h.mean())
    dlogits = -p * (logp + h[:, None]) / z.shape[0]
    return loss, dlogits


def cross_entropy_loss_grad(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its logit gradient (p - onehot)/N."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.ndim != 2 or y.shape != (z.shape[0],):
        raise ValueError("need (N, C) logits and (N,) integer labels")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError("label out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loglik = shifted[np.arange(z.shape[0]), y] - lse
    loss = float(-loglik.mean())
    p = softmax(z, axis=1)
    p[np.arange(z.shape[0]), y] -= 1.0
    return loss, p / z.shape[0]


# ---- optimization ----


class Adam:
    """Adam over a dict of named tensors, updating them in place."""

    def __init__(self, eps: float = 1e-8) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.eps = eps

    def step(
        self,
        tensors: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float,
        beta1: float,
        beta2: float,
    ) -> None:
        self.t += 1
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            m = self.m[key]
            v = self.v[key]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            mhat = m / (1.0 - beta1**self.t)
            vhat = v / (1.0 - beta2**self.t)
            tensors[key] -= lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.005
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0


def train(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig | None = None,
) -> ModelParams:
    """Minimize cross-entropy over labeled frames with Adam, updating
    ``params`` in place and returning it.

    ``images`` is (K, H, W) or (K, 1, H, W) in [0, 1]; ``labels`` holds class
    indices including the blank class.  Batches run in batch_stats mode so
    the running statistics end up matching the training distribution.
    """
    config = config or TrainConfig()
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None, :, :]
    y = np.asarray(labels)
    if x.ndim != 4 or y.shape != (x.shape[0],):
        raise ValueError("need (K, H, W) images and (K,) labels")
    if x.shape[0] == 0:
        raise ValueError("empty training set")
    n = x.shape[0]
    bs = max(2, min(config.batch_size, n))
    rng = np.random.default_rng(config.seed)
    opt = Adam()
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, bs):
            pick = order[lo : lo + bs]
            if pick.size < 2:
                continue  # a singleton batch has no batch statistics
            logits, cache = forward(params, x[pick], "batch_stats")
            loss, dl = cross_entropy_loss_grad(logits, y[pick])
            grads = backward(params, cache, dl, "all")
            opt.step(
                params.trainable(), grads.grads, config.lr, config.beta1, config.beta2
            )
            losses.append(loss)
        logger.info("epoch %d: mean loss %.5f", epoch + 1, float(np.mean(losses)))
    return params


def classify_frames(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    """Row-stochastic class probabilities for a stack of frames using the
    frozen running statistics.  Accepts (N, 1, H, W) or (N, H, W)."""
    f = np.asarray(frames, dtype=np.float64)
    if f.ndim == 3:
        f = f[:, None, :, :]
    logits, _ = forward(params, f, "running_stats")
    return softmax(logits, axis=1)


def classify_strip(
    params: ModelParams, strip: np.ndarray, window: int = 32, stride: int = 8
) -> ProbLattice:
    """Slide a window along a (1, H, W) strip and classify every frame.

    Produces a lattice with T = (W - window) // stride + 1 rows.
    """
    s = np.asarray(strip, dtype=np.float64)
    if s.ndim == 2:
        s = s[None, :, :]
    if s.ndim != 3 or s.shape[0] != 1:
        raise ValueError(f"expected a (1, H, W) strip, got {s.shape}")
    width = s.shape[2]
    if width < window:
        raise ValueError(f"strip width {width} is narrower than the window")
    starts = range(0, width - window + 1, stride)
    frames = np.stack([s[:, :, i : i + window] for i in starts])
    return ProbLattice(params.alphabet, classify_frames(params, frames))


# ---- checkpoint format ----


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Binary checkpoint: magic BNET, u32 version, alphabet, then every named
    tensor as (name, shape, little-endian float64 data)."""
    tensors = params.tensors()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        _pack_str(params.alphabet.symbols),
        struct.pack("<I", len(tensors)),
    ]
    for name, arr in tensors.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ModelParams:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{path}: truncated checkpoint")
        out = blob[off : off + n]
        off += n
        return out

    def take_str() -> str:
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    alphabet = Alphabet(take_str())
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(size * 8), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")

    def grab(name: str) -> np.ndarray:
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint missing tensor {name}")
        return tensors[name]

    return ModelParams(
        conv1_w=grab("conv1_w"),
        conv1_b=grab("conv1_b"),
        bn1=BNLayerState(
            grab("bn1_mu"), grab("bn1_sigma2"), grab("bn1_gamma"), grab("bn1_beta")
        ),
        conv2_w=grab("conv2_w"),
        conv2_b=grab("conv2_b"),
        bn2=BNLayerState(
            grab("bn2_mu"), grab("bn2_sigma2"), grab("bn2_gamma"), grab("bn2_beta")
        ),
        fc_w=grab("fc_w"),
        fc_b=grab("fc_b"),
        alphabet=alphabet,
    )
