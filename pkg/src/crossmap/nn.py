"""Dense MLPs with batch norm, softmax cross-entropy, Adadelta and gradient checks.

Everything is float64 NumPy. Parameters of an :class:`Mlp` are exposed as a
flat list of arrays (``W, b[, gamma, beta]`` per layer) so one optimizer
state can drive several networks at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchSizeError, CacheError, DeterminismError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_VERSION = 1


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"
    bn: BatchNorm | None = None

    def arrays(self):
        out = [self.W, self.b]
        if self.bn is not None:
            out += [self.bn.gamma, self.bn.beta]
        return out


@dataclass
class Mlp:
    layers: list[Layer]
    # bumped on every parameter update so stale caches can be detected
    version: int = field(default=0, compare=False)

    @property
    def in_dim(self):
        return self.layers[0].W.shape[0]

    @property
    def out_dim(self):
        return self.layers[-1].W.shape[1]

    def arrays(self):
        return [a for layer in self.layers for a in layer.arrays()]


def init_mlp(sizes, rng, batch_norm=True, out_activation="identity") -> Mlp:
    """Hidden layers are affine -> [batch norm] -> ReLU; the last layer has no batch norm."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        last = i == len(sizes) - 2
        bn = None
        if batch_norm and not last:
            bn = BatchNorm(np.ones(fan_out), np.zeros(fan_out), np.zeros(fan_out), np.ones(fan_out))
        layers.append(Layer(W, np.zeros(fan_out), out_activation if last else "relu", bn))
    return Mlp(layers)


@dataclass
class ForwardCache:
    mlp: Mlp
    version: int
    mode: str
    steps: list = field(default_factory=list)


def mlp_forward(params: Mlp, batch, mode="train"):
    """Run the network. Returns ``(output, cache)``.

    In train mode batch norm uses batch statistics and updates the running
    averages; in infer mode it uses the running statistics only.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"expected batch of width {params.in_dim}, got shape {x.shape}")
    B = x.shape[0]
    if mode == "train" and B < 2 and any(l.bn is not None for l in params.layers):
        raise BatchSizeError("batch norm in train mode needs at least 2 rows")
    cache = ForwardCache(params, params.version, mode)
    h = x
    for layer in params.layers:
        step = {"x": h}
        z = h @ layer.W + layer.b
        if layer.bn is not None:
            bn = layer.bn
            if mode == "train":
                mean = z.mean(axis=0)
                var = z.var(axis=0)
                bn.running_mean[...] = bn.momentum * bn.running_mean + (1 - bn.momentum) * mean
                bn.running_var[...] = bn.momentum * bn.running_var + (1 - bn.momentum) * var
            else:
                mean, var = bn.running_mean, bn.running_var
            std = np.sqrt(var + bn.eps)
            xhat = (z - mean) / std
            step["xhat"], step["std"] = xhat, std
            z = bn.gamma * xhat + bn.beta
        step["a"] = z
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.steps.append(step)
    return h, cache


def mlp_backward(cache: ForwardCache, output_gradient):
    """Backpropagate ``output_gradient``. Returns ``(grads, input_gradient)``.

    ``grads`` is aligned with ``cache.mlp.arrays()``.
    """
    mlp = cache.mlp
    if cache.mode != "train":
        raise CacheError("backward needs a train-mode cache")
    if cache.version != mlp.version:
        raise CacheError("parameters changed since the forward pass")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != (cache.steps[-1]["a"].shape):
        raise ShapeError(f"output gradient shape {g.shape} does not match output")
    per_layer = []
    for layer, step in zip(reversed(mlp.layers), reversed(cache.steps)):
        if layer.activation == "relu":
            g = g * (step["a"] > 0)
        grads = []
        if layer.bn is not None:
            xhat, std = step["xhat"], step["std"]
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dx = g * layer.bn.gamma
            B = dx.shape[0]
            g = (B * dx - dx.sum(axis=0) - xhat * (dx * xhat).sum(axis=0)) / (B * std)
            grads = [dgamma, dbeta]
        dW = step["x"].T @ g
        db = g.sum(axis=0)
        per_layer.append([dW, db] + grads)
        g = g @ layer.W.T
    flat = [a for layer_grads in reversed(per_layer) for a in layer_grads]
    return flat, g


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient. ``labels`` are 0-based."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    loss = -logp[np.arange(B), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


@dataclass
class AdadeltaState:
    sq_grad: list
    sq_delta: list
    lr: float = 0.125
    rho: float = 0.95
    eps: float = 1e-6
    gamma: float = 0.99
    epoch: int = 1

    @classmethod
    def create(cls, arrays, **kwargs):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kwargs)


def adadelta_step(state: AdadeltaState, params, grads):
    """One learning-rate-scaled Adadelta update, applied in place.

    ``params`` is an :class:`Mlp`, or a list of arrays and/or MLPs. The
    squared-update accumulator tracks the scaled step that is actually applied.
    """
    arrays = _as_arrays(params)
    if len(arrays) != len(grads) or len(arrays) != len(state.sq_grad):
        raise ShapeError("parameter, gradient and state lists differ in length")
    for a, g in zip(arrays, grads):
        if a.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {a.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient, step rejected")
    rho, eps, lr = state.rho, state.eps, state.lr
    for a, g, eg, ed in zip(arrays, grads, state.sq_grad, state.sq_delta):
        eg *= rho
        eg += (1 - rho) * g * g
        delta = -lr * np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1 - rho) * delta * delta
        a += delta
    for mlp in _mlps(params):
        mlp.version += 1


def lr_schedule(state: AdadeltaState) -> AdadeltaState:
    """Advance one epoch: ``lr <- gamma * lr``."""
    state.lr *= state.gamma
    state.epoch += 1
    return state


def _mlps(params):
    if isinstance(params, Mlp):
        return [params]
    return [p for p in params if isinstance(p, Mlp)]


def _as_arrays(params):
    if isinstance(params, Mlp):
        return params.arrays()
    out = []
    for p in params:
        out.extend(p.arrays() if isinstance(p, Mlp) else [p])
    return out


def grad_check(loss_closure, params, h=1e-5, max_entries=None, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_closure()`` evaluates ``(loss, grads)`` at the current values of
    ``params`` (perturbed in place). Relative error per entry is
    ``|g_an - g_fd| / max(1, |g_an|, |g_fd|)``. With ``max_entries`` set, that
    many randomly chosen entries per array are checked.
    """
    arrays = _as_arrays(params)
    loss0, grads = loss_closure()
    loss1, _ = loss_closure()
    if loss0 != loss1:
        raise DeterminismError(f"closure is not deterministic ({loss0!r} != {loss1!r})")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = loss_closure()
            flat[i] = orig - h
            lm, _ = loss_closure()
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = g.reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(1.0, abs(an), abs(fd)))
    return float(worst)


def mlp_to_dict(mlp: Mlp, prefix=""):
    """Flatten an MLP into ``(arrays, meta)`` for checkpointing."""
    arrays, meta = {}, []
    for i, layer in enumerate(mlp.layers):
        arrays[f"{prefix}{i}.W"] = layer.W
        arrays[f"{prefix}{i}.b"] = layer.b
        entry = {"activation": layer.activation, "bn": layer.bn is not None}
        if layer.bn is not None:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                arrays[f"{prefix}{i}.{name}"] = getattr(layer.bn, name)
            entry["momentum"] = layer.bn.momentum
            entry["eps"] = layer.bn.eps
        meta.append(entry)
    return arrays, meta


def mlp_from_dict(arrays, meta, prefix="") -> Mlp:
    layers = []
    for i, entry in enumerate(meta):
        bn = None
        if entry["bn"]:
            bn = BatchNorm(*(np.array(arrays[f"{prefix}{i}.{n}"]) for n in
                             ("gamma", "beta", "running_mean", "running_var")),
                           momentum=entry["momentum"], eps=entry["eps"])
        layers.append(Layer(np.array(arrays[f"{prefix}{i}.W"]), np.array(arrays[f"{prefix}{i}.b"]),
                            entry["activation"], bn))
    return Mlp(layers)


def state_to_dict(state: AdadeltaState, prefix="opt."):
    arrays = {}
    for i, (eg, ed) in enumerate(zip(state.sq_grad, state.sq_delta)):
        arrays[f"{prefix}{i}.sq_grad"] = eg
        arrays[f"{prefix}{i}.sq_delta"] = ed
    meta = {"lr": state.lr, "rho": state.rho, "eps": state.eps, "gamma": state.gamma,
            "epoch": state.epoch, "n": len(state.sq_grad)}
    return arrays, meta


def state_from_dict(arrays, meta, prefix="opt.") -> AdadeltaState:
    n = meta["n"]
    return AdadeltaState(
        [np.array(arrays[f"{prefix}{i}.sq_grad"]) for i in range(n)],
        [np.array(arrays[f"{prefix}{i}.sq_delta"]) for i in range(n)],
        lr=meta["lr"], rho=meta["rho"], eps=meta["eps"], gamma=meta["gamma"], epoch=meta["epoch"],
    )


def save_mlp(path, mlp: Mlp, state: AdadeltaState | None = None):
    arrays, meta = mlp_to_dict(mlp, "mlp.")
    doc = {"kind": "mlp", "version": CHECKPOINT_VERSION, "layers": meta, "optimizer": None}
    if state is not None:
        opt_arrays, doc["optimizer"] = state_to_dict(state)
        arrays.update(opt_arrays)
    np.savez(path, __meta__=np.array(json.dumps(doc)), **arrays)


def load_mlp(path):
    """Returns ``(mlp, optimizer_state_or_None)``."""
    with np.load(path, allow_pickle=False) as data:
        doc = json.loads(str(data["__meta__"]))
        if doc.get("kind") != "mlp" or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError("not an MLP checkpoint of a supported version")
        arrays = {k: data[k] for k in data.files}
    mlp = mlp_from_dict(arrays, doc["layers"], "mlp.")
    state = state_from_dict(arrays, doc["optimizer"]) if doc["optimizer"] else None
    return mlp, state
