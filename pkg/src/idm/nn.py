"""Three-layer ReLU MLP (encoder + linear classifier) with analytic gradients.

Row-vector convention: ``h = x @ w + b``.  The encoder is two ReLU layers,
the classifier one affine layer followed by softmax cross-entropy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidArgument

DEFAULT_HIDDEN = 433
CHECKPOINT_MAGIC = b"IDM1"
PARAM_NAMES = ("w1", "b1", "w2", "b2", "wc", "bc")


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class MlpModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wc: np.ndarray
    bc: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def num_classes(self) -> int:
        return self.wc.shape[1]

    def params(self) -> list:
        return [getattr(self, name) for name in PARAM_NAMES]

    def copy(self) -> "MlpModel":
        return MlpModel(*[p.copy() for p in self.params()])

    def zeros_like(self) -> "MlpModel":
        return MlpModel(*[np.zeros_like(p) for p in self.params()])

    def check(self):
        i, h, c = self.input_dim, self.hidden_dim, self.num_classes
        want = {"w1": (i, h), "b1": (h,), "w2": (h, h), "b2": (h,),
                "wc": (h, c), "bc": (c,)}
        for name, shape in want.items():
            p = getattr(self, name)
            if p.shape != shape:
                raise InvalidArgument(f"{name} has shape {p.shape}, expected {shape}")
            if not np.all(np.isfinite(p)):
                raise InvalidArgument(f"{name} has non-finite entries")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_mlp(input_dim: int, hidden_dim: int = DEFAULT_HIDDEN, num_classes: int = 2,
             seed: int = 0) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    if min(input_dim, hidden_dim, num_classes) < 1:
        raise InvalidArgument("all dimensions must be >= 1")
    rng = make_rng(seed)
    return MlpModel(
        w1=_glorot(rng, input_dim, hidden_dim), b1=np.zeros(hidden_dim),
        w2=_glorot(rng, hidden_dim, hidden_dim), b2=np.zeros(hidden_dim),
        wc=_glorot(rng, hidden_dim, num_classes), bc=np.zeros(num_classes),
    )


@dataclass
class ForwardCache:
    x: np.ndarray
    y: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    reps: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    losses: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    def deltas(self) -> np.ndarray:
        """p - onehot(y), the logit gradient of each per-sample loss."""
        d = self.probs.copy()
        d[np.arange(d.shape[0]), self.y] -= 1.0
        return d


def log_softmax(logits: np.ndarray) -> np.ndarray:
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(model: MlpModel, x, y) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise InvalidArgument(f"inputs must be b x {model.input_dim}, got {x.shape}")
    if y.shape != (x.shape[0],):
        raise InvalidArgument("need one label per row")
    if np.isnan(x).any():
        raise InvalidArgument("NaN in inputs")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise InvalidArgument(f"labels must lie in [0, {model.num_classes})")
    z1 = x @ model.w1 + model.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ model.w2 + model.b2
    a2 = np.maximum(z2, 0.0)
    logits = a2 @ model.wc + model.bc
    logp = log_softmax(logits)
    losses = -logp[np.arange(y.size), y]
    return ForwardCache(x, y, z1, a1, z2, a2, logits, np.exp(logp), losses)


def classifier_grad_dim(model: MlpModel) -> int:
    return (model.hidden_dim + 1) * model.num_classes


def per_sample_classifier_grads(cache: ForwardCache, model: MlpModel | None = None) -> np.ndarray:
    """Row j is vec(d loss_j / d [wc; bc]) = vec([r_j; 1] outer (p_j - onehot(y_j))).

    Flattening is row-major over the (hidden + 1) x classes block whose last
    row is the bias.
    """
    delta = cache.deltas()
    b = delta.shape[0]
    rext = np.hstack([cache.reps, np.ones((b, 1))])
    return (rext[:, :, None] * delta[:, None, :]).reshape(b, -1)


def backward(model: MlpModel, caches, loss_grads, rep_grads=None, clsgrad_grads=None,
             logit_grads=None) -> MlpModel:
    """Gradient of sum_i [<loss_grads_i, losses_i> + <rep_grads_i, R_i>
    + <clsgrad_grads_i, G_i> + <logit_grads_i, logits_i>] w.r.t. all parameters.

    ``G_i`` is the per-sample classifier gradient matrix; its path is
    differentiated through the softmax Jacobian and the representations.
    Any upstream list may be ``None`` (or contain ``None``) to skip that path.
    """
    m = len(caches)
    ups = []
    for name, up in (("loss_grads", loss_grads), ("rep_grads", rep_grads),
                     ("clsgrad_grads", clsgrad_grads), ("logit_grads", logit_grads)):
        if up is None:
            up = [None] * m
        if len(up) != m:
            raise InvalidArgument(f"{name} has {len(up)} entries for {m} domains")
        ups.append(up)

    grads = model.zeros_like()
    h, c = model.hidden_dim, model.num_classes
    for cache, gl, gr, gg, gz in zip(caches, *ups):
        b = cache.batch_size
        dlogits = np.zeros((b, c))
        drep = np.zeros((b, h))
        if gl is not None:
            gl = np.asarray(gl, dtype=np.float64)
            if np.ndim(gl) == 0:
                gl = np.full(b, float(gl))
            if gl.shape != (b,):
                raise InvalidArgument(f"loss_grads shape {gl.shape} != {(b,)}")
            dlogits += gl[:, None] * cache.deltas()
        if gz is not None:
            gz = np.asarray(gz, dtype=np.float64)
            if gz.shape != (b, c):
                raise InvalidArgument(f"logit_grads shape {gz.shape} != {(b, c)}")
            dlogits += gz
        if gr is not None:
            gr = np.asarray(gr, dtype=np.float64)
            if gr.shape != (b, h):
                raise InvalidArgument(f"rep_grads shape {gr.shape} != {(b, h)}")
            drep += gr
        if gg is not None:
            gg = np.asarray(gg, dtype=np.float64)
            if gg.size != b * (h + 1) * c:
                raise InvalidArgument(f"clsgrad_grads has {gg.size} entries, "
                                      f"expected {b * (h + 1) * c}")
            up = gg.reshape(b, h + 1, c)
            delta = cache.deltas()
            # G_j[k, c] = rext_j[k] * delta_j[c]
            drep += np.einsum("bkc,bc->bk", up[:, :h, :], delta)
            v = np.einsum("bkc,bk->bc", up[:, :h, :], cache.reps) + up[:, h, :]
            p = cache.probs
            dlogits += p * (v - np.sum(p * v, axis=1, keepdims=True))

        grads.wc += cache.reps.T @ dlogits
        grads.bc += dlogits.sum(axis=0)
        drep += dlogits @ model.wc.T
        dz2 = drep * (cache.z2 > 0)
        grads.w2 += cache.a1.T @ dz2
        grads.b2 += dz2.sum(axis=0)
        dz1 = (dz2 @ model.w2.T) * (cache.z1 > 0)
        grads.w1 += cache.x.T @ dz1
        grads.b1 += dz1.sum(axis=0)
    return grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, model: MlpModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params()],
                   [np.zeros_like(p) for p in model.params()], 0)


def adam_step(model: MlpModel, grads: MlpModel, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> tuple:
    """One bias-corrected Adam update; ``weight_decay * param`` joins the gradient."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(model.params(), grads.params(), state.m, state.v):
        if m.shape != p.shape:
            raise InvalidArgument("optimizer state does not match the model")
        g = g + weight_decay * p
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return MlpModel(*new_params), AdamState(new_m, new_v, t)


def save_checkpoint(model: MlpModel, path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack(
        "<4I", model.input_dim, model.hidden_dim, model.num_classes, len(PARAM_NAMES))
    with open(path, "wb") as fh:
        fh.write(header)
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    i, h, c, count = struct.unpack("<4I", blob[4:20])
    if count != len(PARAM_NAMES):
        raise FormatError(f"{path}: expected {len(PARAM_NAMES)} tensors, header says {count}")
    shapes = [(i, h), (h,), (h, h), (h,), (h, c), (c,)]
    expected = 20 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    offset, params = 20, []
    for shape in shapes:
        n = int(np.prod(shape))
        params.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
                      .astype(np.float64).reshape(shape))
        offset += 8 * n
    return MlpModel(*params)

