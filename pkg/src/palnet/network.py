"""Point-wise convolutional network with attention pooling, in numpy.

Forward and backward passes are written out by hand. Arrays follow the layout
``(subjects m, landmarks n, points K, channels)``; every dense/1x1 layer is a
matmul over the trailing channel axis, so no operation mixes points except max
pooling and the attention sums.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class ArchConfig:
    filters: tuple = (32, 64, 128)
    pool_factors: tuple = (5, 5, 4)
    attention: bool = True
    # None: full softmax attention; int: softmax over the top-k scoring points only
    top_k: int | None = None
    # "all": concatenate every block's global vector; "final": only the last block's
    attention_scope: str = "all"
    mlp_widths: tuple = (1024, 1024, 3)
    dropout: float = 0.3

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.pool_factors = tuple(int(p) for p in self.pool_factors)
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        if len(self.filters) != len(self.pool_factors) or not self.filters:
            raise ValueError("filters and pool_factors must be non-empty and of equal length")
        if any(p < 1 for p in self.pool_factors) or any(f < 1 for f in self.filters):
            raise ValueError("filters and pool factors must be positive")
        if not self.mlp_widths or self.mlp_widths[-1] != 3:
            raise ValueError("the final MLP width must be 3")
        if self.top_k is not None and self.top_k <= 0:
            raise ValueError("top_k must be positive")
        if self.attention_scope not in ("all", "final"):
            raise ValueError("attention_scope must be 'all' or 'final'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def depth(self) -> int:
        return len(self.filters)

    @property
    def pool_product(self) -> int:
        return int(np.prod(self.pool_factors))

    def attended_blocks(self):
        if not self.attention:
            return []
        if self.attention_scope == "final":
            return [self.depth - 1]
        return list(range(self.depth))

    def check_patch_size(self, k: int):
        if k % self.pool_product:
            raise ShapeError(f"patch size K={k} is not divisible by the pool chain product {self.pool_product}")

    def point_lengths(self, k: int):
        """Point-axis length after each block's pooling."""
        self.check_patch_size(k)
        out = []
        for p in self.pool_factors:
            k //= p
            out.append(k)
        return out

    def hybrid_width(self, k: int) -> int:
        return self.point_lengths(k)[-1] * self.filters[-1] + sum(self.filters[b] for b in self.attended_blocks())

    def to_dict(self):
        d = asdict(self)
        for key in ("filters", "pool_factors", "mlp_widths"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown architecture field(s): {sorted(unknown)}")
        return cls(**d)


def param_shapes(arch: ArchConfig, k: int):
    """Ordered (name, shape) list; this order is the checkpoint declaration order."""
    shapes = []
    c = 3
    attended = set(arch.attended_blocks())
    for b, f in enumerate(arch.filters):
        shapes += [(f"block{b}.conv1.W", (c, f)), (f"block{b}.conv1.b", (f,)),
                   (f"block{b}.conv2.W", (f, f)), (f"block{b}.conv2.b", (f,))]
        if b in attended:
            shapes += [(f"block{b}.att.W", (f, 1)), (f"block{b}.att.b", (1,))]
        c = f
    width = arch.hybrid_width(k)
    for i, w in enumerate(arch.mlp_widths):
        shapes += [(f"mlp{i}.W", (width, w)), (f"mlp{i}.b", (w,))]
        width = w
    return shapes


@dataclass
class ModelParams:
    arch: ArchConfig
    k: int
    tensors: dict
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def names(self):
        return [n for n, _ in param_shapes(self.arch, self.k)]

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self):
        return ModelParams(self.arch, self.k, {n: t.copy() for n, t in self.tensors.items()},
                           self.seed, dict(self.metadata))

    def astype(self, dtype):
        return ModelParams(self.arch, self.k, {n: t.astype(dtype) for n, t in self.tensors.items()},
                           self.seed, dict(self.metadata))


def init_params(arch: ArchConfig, k: int, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Glorot-normal weights (variance 2 / (fan_in + fan_out)), zero biases."""
    arch.check_patch_size(k)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch, k):
        if name.endswith(".W"):
            std = np.sqrt(2.0 / (shape[0] + shape[1]))
            tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return ModelParams(arch, k, tensors, seed)


# -- primitive layers ---------------------------------------------------------

def pointwise_conv(x, w, b, activation="relu"):
    """Per-point affine map over the channel axis, then ``activation``."""
    x = np.asarray(x)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"channel mismatch: input {x.shape[-1]}, weight {w.shape}, bias {b.shape}")
    z = x @ w + b
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def max_pool(x, factor: int, return_argmax: bool = False):
    """Non-overlapping max over windows of ``factor`` along the point axis (-2)."""
    x = np.asarray(x)
    k = x.shape[-2]
    if factor < 1 or k % factor:
        raise ShapeError(f"pool factor {factor} does not divide point axis length {k}")
    win = x.reshape(x.shape[:-2] + (k // factor, factor, x.shape[-1]))
    arg = win.argmax(axis=-2)
    out = np.take_along_axis(win, arg[..., None, :], axis=-2)[..., 0, :]
    if return_argmax:
        return out, arg
    return out


def _softmax_masked(t, mask):
    z = np.where(mask, t, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _topk_mask(t, k):
    if k is None or k >= t.shape[1]:
        return np.ones(t.shape, dtype=bool)
    order = np.argsort(-t, axis=1, kind="stable")[:, :k]
    mask = np.zeros(t.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def attention(s, w, b, top_k: int | None = None, return_cache: bool = False):
    """Softmax(tanh(S W + b)) over the sequence axis and the weighted feature sum.

    ``s`` is (m, L, f). Returns A (m, L, 1) and G (m, f). With ``top_k`` the
    softmax runs over the ``top_k`` highest scores per subject; others get 0.
    """
    s = np.asarray(s)
    if top_k is not None and top_k <= 0:
        raise ValueError("top_k must be positive")
    if top_k is not None and top_k > s.shape[1]:
        raise ValueError(f"top_k={top_k} exceeds sequence length {s.shape[1]}")
    t = np.tanh((s @ w)[..., 0] + b[0])
    mask = _topk_mask(t, top_k)
    a = _softmax_masked(t, mask)
    g = np.einsum("ml,mlf->mf", a, s)
    if return_cache:
        return a[..., None], g, (t, mask)
    return a[..., None], g


def topk_attention(s, w, b, k: int):
    return attention(s, w, b, top_k=k)


# -- full network ---------------------------------------------------------------

@dataclass
class ForwardTrace:
    predictions: np.ndarray  # (m, n, 3)
    cache: dict
    train: bool
    attention_weights: list  # per attended block, (m, n*K_b, 1)


def forward(x, params: ModelParams, train: bool = False, seed=0) -> ForwardTrace:
    """Run the network on a (m, n, K, 3) patch tensor."""
    arch = params.arch
    p = params.tensors
    x = np.asarray(getattr(x, "data", x))
    if x.ndim != 4 or x.shape[3] != 3:
        raise ShapeError(f"input must be (m, n, K, 3), got {x.shape}")
    m, n, k, _ = x.shape
    if k != params.k:
        raise ShapeError(f"model built for K={params.k}, got patches with K={k}")
    arch.check_patch_size(k)
    dt = params.dtype
    h = x.astype(dt, copy=False)
    attended = set(arch.attended_blocks())
    blocks = []
    globals_ = []
    att_weights = []
    for bi, pf in enumerate(arch.pool_factors):
        a1 = pointwise_conv(h, p[f"block{bi}.conv1.W"], p[f"block{bi}.conv1.b"])
        a2 = pointwise_conv(a1, p[f"block{bi}.conv2.W"], p[f"block{bi}.conv2.b"])
        blk = {"x": h, "a1": a1, "a2": a2}
        if bi in attended:
            s = a2.reshape(m, -1, a2.shape[-1])
            a, g, (t, mask) = attention(s, p[f"block{bi}.att.W"], p[f"block{bi}.att.b"],
                                        arch.top_k, return_cache=True)
            blk.update(att_a=a[..., 0], att_t=t, att_mask=mask)
            globals_.append(g)
            att_weights.append(a)
        pooled, arg = max_pool(a2, pf, return_argmax=True)
        blk["arg"] = arg
        blocks.append(blk)
        h = pooled
    kf, ff = h.shape[2], h.shape[3]
    parts = [h.reshape(m, n, kf * ff)]
    parts += [np.broadcast_to(g[:, None, :], (m, n, g.shape[1])) for g in globals_]
    hyb = np.concatenate(parts, axis=2)

    mlp = []
    z = hyb
    rng = np.random.default_rng(seed) if train else None
    for i in range(len(arch.mlp_widths)):
        inp = z
        z = inp @ p[f"mlp{i}.W"] + p[f"mlp{i}.b"]
        layer = {"x": inp}
        if i == 0 and len(arch.mlp_widths) > 1:
            z = np.maximum(z, 0)
            layer["relu"] = z > 0
            if train and arch.dropout > 0:
                keep = (rng.random(z.shape) >= arch.dropout).astype(dt) / dt.type(1.0 - arch.dropout)
                layer["dropout"] = keep
                z = z * keep
        mlp.append(layer)
    cache = {"blocks": blocks, "mlp": mlp, "local_shape": (kf, ff),
             "n_globals": [g.shape[1] for g in globals_], "shape": (m, n, k)}
    return ForwardTrace(z, cache, train, att_weights)


def backward(trace: ForwardTrace, params: ModelParams, grad_out) -> dict:
    """Reverse-mode gradients of a scalar loss w.r.t. every parameter tensor."""
    if trace is None or not trace.cache:
        raise ValueError("backward needs the trace of a forward pass")
    arch = params.arch
    p = params.tensors
    dt = params.dtype
    grads = {}
    m, n, k = trace.cache["shape"]
    d = np.asarray(grad_out, dtype=dt)
    if d.shape != trace.predictions.shape:
        raise ShapeError(f"upstream gradient shape {d.shape} != predictions {trace.predictions.shape}")

    for i in reversed(range(len(arch.mlp_widths))):
        layer = trace.cache["mlp"][i]
        if "dropout" in layer:
            d = d * layer["dropout"]
        if "relu" in layer:
            d = d * layer["relu"]
        x2 = layer["x"].reshape(-1, layer["x"].shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        grads[f"mlp{i}.W"] = x2.T @ d2
        grads[f"mlp{i}.b"] = d2.sum(axis=0)
        d = d @ p[f"mlp{i}.W"].T

    kf, ff = trace.cache["local_shape"]
    d_pooled = d[..., :kf * ff].reshape(m, n, kf, ff)
    d_globals = []
    off = kf * ff
    for width in trace.cache["n_globals"]:
        d_globals.append(d[..., off:off + width].sum(axis=1))
        off += width

    attended = arch.attended_blocks()
    for bi in reversed(range(arch.depth)):
        blk = trace.cache["blocks"][bi]
        a2 = blk["a2"]
        pf = arch.pool_factors[bi]
        # unpool: route each pooled gradient to the arg-max position of its window
        win = np.zeros(a2.shape[:-2] + (a2.shape[-2] // pf, pf, a2.shape[-1]), dtype=dt)
        np.put_along_axis(win, blk["arg"][..., None, :], d_pooled[..., None, :], axis=-2)
        d_a2 = win.reshape(a2.shape)
        if bi in attended:
            dg = d_globals[attended.index(bi)]
            s = a2.reshape(m, -1, a2.shape[-1])
            a, t, mask = blk["att_a"], blk["att_t"], blk["att_mask"]
            w = p[f"block{bi}.att.W"]
            d_s = a[..., None] * dg[:, None, :]
            d_a = np.einsum("mlf,mf->ml", s, dg)
            d_t = a * (d_a - (a * d_a).sum(axis=1, keepdims=True))
            d_t = np.where(mask, d_t, 0.0)
            d_score = d_t * (1.0 - t * t)
            grads[f"block{bi}.att.W"] = np.einsum("mlf,ml->f", s, d_score)[:, None].astype(dt)
            grads[f"block{bi}.att.b"] = np.array([d_score.sum()], dtype=dt)
            d_s = d_s + d_score[..., None] * w[:, 0]
            d_a2 = d_a2 + d_s.reshape(a2.shape)
        d_z2 = d_a2 * (a2 > 0)
        a1 = blk["a1"]
        a1f = a1.reshape(-1, a1.shape[-1])
        dz2f = d_z2.reshape(-1, d_z2.shape[-1])
        grads[f"block{bi}.conv2.W"] = a1f.T @ dz2f
        grads[f"block{bi}.conv2.b"] = dz2f.sum(axis=0)
        d_z1 = (d_z2 @ p[f"block{bi}.conv2.W"].T) * (a1 > 0)
        xin = blk["x"]
        dz1f = d_z1.reshape(-1, d_z1.shape[-1])
        grads[f"block{bi}.conv1.W"] = xin.reshape(-1, xin.shape[-1]).T @ dz1f
        grads[f"block{bi}.conv1.b"] = dz1f.sum(axis=0)
        if bi > 0:
            d_pooled = d_z1 @ p[f"block{bi}.conv1.W"].T
    return {name: grads[name].astype(dt, copy=False) for name in params.names}


def predict(x, params: ModelParams, batch_size: int = 16):
    x = np.asarray(getattr(x, "data", x))
    out = [forward(x[i:i + batch_size], params, train=False).predictions
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


# -- checkpoints ------------------------------------------------------------------

MAGIC = b"PALNETCK"


def save_checkpoint(path, params: ModelParams, metadata: dict | None = None):
    """JSON header + raw little-endian float32 tensors in declaration order."""
    names = params.names
    header = {
        "format": 1,
        "arch": params.arch.to_dict(),
        "k": params.k,
        "seed": params.seed,
        "tensors": [{"name": nm, "shape": list(params.tensors[nm].shape)} for nm in names],
        "metadata": metadata if metadata is not None else params.metadata,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for nm in names:
            fh.write(np.ascontiguousarray(params.tensors[nm], dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    arch = ArchConfig.from_dict(header["arch"])
    params = ModelParams(arch, header["k"], tensors, header["seed"], header.get("metadata", {}))
    if params.names != list(tensors):
        raise ValueError(f"{path}: tensor layout does not match the architecture header")
    return params
