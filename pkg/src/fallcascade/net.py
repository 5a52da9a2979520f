"""Small feed-forward network engine with analytic gradients.

The layer vocabulary is fixed: dense, relu, batchnorm, concat_input (re-attach
the raw network input to the running activations) and head (a prediction tap
that branches off the trunk).  A network always carries exactly three heads,
whose losses are combined with per-head weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ModelLoadError, TrainingError

FORMAT_VERSION = 1
N_HEADS = 3
DEFAULT_HEAD_WEIGHTS = (0.25, 0.25, 0.5)
DEFAULT_DENSE_WIDTHS = (256, 256, 128, 128, 64, 64, 32, 32)
PROB_CLAMP = 1e-7
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

LAYER_KINDS = ("dense", "relu", "batchnorm", "concat_input", "head")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None
    head_activation: str | None = None


def default_arch(class_count, widths=DEFAULT_DENSE_WIDTHS, concat_before=(4, 7), heads_after=(3, 6)):
    """The 9-dense-layer trunk: dense -> batchnorm -> relu blocks.

    The raw input is concatenated in front of the dense layers listed in
    ``concat_before`` (1-based), auxiliary heads tap the trunk after the dense
    blocks in ``heads_after`` and the final dense layer, of width
    ``class_count``, feeds the last head directly.
    """
    arch = []
    for i, w in enumerate(widths, start=1):
        if i in concat_before:
            arch.append(LayerSpec("concat_input"))
        arch += [LayerSpec("dense", w), LayerSpec("batchnorm"), LayerSpec("relu")]
        if i in heads_after:
            arch.append(LayerSpec("head", class_count))
    if len(widths) + 1 in concat_before:
        arch.append(LayerSpec("concat_input"))
    arch += [LayerSpec("dense", class_count), LayerSpec("head", class_count)]
    return arch


def mini_arch(class_count, widths=(32, 16)):
    """Compact three-head network (one head per dense block, last one direct)."""
    arch = []
    for w in widths:
        arch += [LayerSpec("dense", w), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("head", class_count)]
    arch += [LayerSpec("dense", class_count), LayerSpec("head", class_count)]
    return arch


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = ""
    trainable = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def spec(self):
        return LayerSpec(self.kind)


class Dense(Layer):
    kind = "dense"
    trainable = ("W", "b")

    def __init__(self, in_width, width, rng=None):
        super().__init__()
        self.in_width = in_width
        self.width = width
        if rng is None:
            W = np.zeros((in_width, width))
        else:
            limit = math.sqrt(6.0 / in_width)
            W = rng.uniform(-limit, limit, size=(in_width, width))
        self.params = {"W": W, "b": np.zeros(width)}

    def spec(self):
        return LayerSpec("dense", self.width)

    def forward(self, x, training, x0):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, g, cache):
        x = cache
        return {"W": x.T @ g, "b": g.sum(axis=0)}, g @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training, x0):
        mask = x > 0
        return x * mask, mask

    def backward(self, g, cache):
        return {}, g * cache


class BatchNorm(Layer):
    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def __init__(self, width):
        super().__init__()
        self.width = width
        self.params = {
            "gamma": np.ones(width),
            "beta": np.zeros(width),
            "running_mean": np.zeros(width),
            "running_var": np.ones(width),
        }

    def forward(self, x, training, x0):
        p = self.params
        if training:
            if x.shape[0] < 2:
                raise DataError("batchnorm needs at least 2 rows in train mode")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            p["running_mean"] = BN_MOMENTUM * p["running_mean"] + (1 - BN_MOMENTUM) * mu
            p["running_var"] = BN_MOMENTUM * p["running_var"] + (1 - BN_MOMENTUM) * var
        else:
            mu, var = p["running_mean"], p["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu) * inv_std
        return p["gamma"] * xhat + p["beta"], (xhat, inv_std, training)

    def backward(self, g, cache):
        xhat, inv_std, training = cache
        grads = {"gamma": (g * xhat).sum(axis=0), "beta": g.sum(axis=0)}
        dxhat = g * self.params["gamma"]
        if not training:
            return grads, dxhat * inv_std
        n = g.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return grads, dx


class ConcatInput(Layer):
    kind = "concat_input"

    def __init__(self, in_width):
        super().__init__()
        self.in_width = in_width

    def forward(self, x, training, x0):
        return np.concatenate([x, x0], axis=1), None

    def backward(self, g, cache):
        return {}, g[:, : self.in_width]


class Head(Layer):
    """Prediction tap.

    A head that directly follows a dense layer of its own width reads that
    layer's output as logits; any other head owns a linear projection.
    """

    kind = "head"

    def __init__(self, in_width, width, activation, projection, rng=None):
        super().__init__()
        self.in_width = in_width
        self.width = width
        self.activation = activation
        self.projection = projection
        if projection:
            self.trainable = ("W", "b")
            if rng is None:
                W = np.zeros((in_width, width))
            else:
                limit = math.sqrt(6.0 / in_width)
                W = rng.uniform(-limit, limit, size=(in_width, width))
            self.params = {"W": W, "b": np.zeros(width)}

    def spec(self):
        return LayerSpec("head", self.width, self.activation)

    def logits(self, x):
        if self.projection:
            return x @ self.params["W"] + self.params["b"]
        return x

    def activate(self, z):
        return sigmoid(z) if self.activation == "sigmoid" else softmax(z)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    layer_caches: list
    head_inputs: list
    outputs: list
    training: bool


class Network:
    def __init__(self, input_width, class_count, layers, head_weights=DEFAULT_HEAD_WEIGHTS, mode="train"):
        self.input_width = input_width
        self.class_count = class_count
        self.layers: list[Layer] = layers
        self.head_weights = np.asarray(head_weights, dtype=float)
        self.mode = mode

    @property
    def heads(self):
        return [layer for layer in self.layers if isinstance(layer, Head)]

    @property
    def head_activation(self):
        return self.heads[0].activation

    def arch(self):
        return [layer.spec() for layer in self.layers]

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every trainable tensor."""
        for i, layer in enumerate(self.layers):
            for name in layer.trainable:
                yield i, name, layer.params[name]

    def n_parameters(self):
        return sum(p.size for _, _, p in self.parameters())

    def forward(self, batch, training=None):
        x0 = np.asarray(batch, dtype=float)
        if x0.ndim != 2 or x0.shape[1] != self.input_width:
            raise DataError(f"expected a batch of width {self.input_width}, got shape {x0.shape}")
        if not np.all(np.isfinite(x0)):
            raise DataError("non-finite value in input batch")
        if training is None:
            training = self.mode == "train"
        x = x0
        caches, head_inputs, outputs = [], [], []
        for layer in self.layers:
            if isinstance(layer, Head):
                head_inputs.append(x)
                outputs.append(layer.activate(layer.logits(x)))
                caches.append(None)
                continue
            x, c = layer.forward(x, training, x0)
            caches.append(c)
        return outputs, ForwardCache(caches, head_inputs, outputs, training)

    def predict_proba(self, batch):
        """Final-head probabilities in inference mode."""
        outputs, _ = self.forward(batch, training=False)
        return outputs[-1]

    def backward(self, cache, targets, loss_kind, head_weights=None):
        """Gradients of the weighted loss for every trainable tensor.

        Returns a list aligned with ``self.layers``; each entry maps parameter
        name to gradient (empty for parameter-free layers).
        """
        if len(cache.layer_caches) != len(self.layers):
            raise RuntimeError("forward cache does not belong to this network")
        w = self.head_weights if head_weights is None else np.asarray(head_weights, dtype=float)
        dlogits = head_logit_grads(cache.outputs, targets, loss_kind, w)
        grads: list[dict] = [{} for _ in self.layers]
        g = None
        head_idx = N_HEADS
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if isinstance(layer, Head):
                head_idx -= 1
                dz = dlogits[head_idx]
                if layer.projection:
                    x = cache.head_inputs[head_idx]
                    grads[i] = {"W": x.T @ dz, "b": dz.sum(axis=0)}
                    dx = dz @ layer.params["W"].T
                else:
                    dx = dz
                g = dx if g is None else g + dx
                continue
            if g is None:
                continue
            grads[i], g = layer.backward(g, cache.layer_caches[i])
        return grads


def build_network(input_width, n_heads_classes, arch=None, rng=None, head_weights=DEFAULT_HEAD_WEIGHTS):
    """Instantiate a network, He-uniform initialised when ``rng`` is given.

    With ``rng=None`` all weights start at zero (useful for closed-form tests).
    """
    if input_width < 1:
        raise ConfigurationError("input_width must be >= 1")
    if n_heads_classes < 1:
        raise ConfigurationError("class count must be >= 1")
    if arch is None:
        arch = default_arch(n_heads_classes)
    arch = list(arch)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n_heads = sum(1 for s in arch if s.kind == "head")
    if n_heads != N_HEADS:
        raise ConfigurationError(f"architecture must contain exactly {N_HEADS} heads, found {n_heads}")
    if not arch or arch[-1].kind != "head":
        raise ConfigurationError("architecture must end with a head")
    hw = np.asarray(head_weights, dtype=float)
    if hw.shape != (N_HEADS,) or np.any(hw < 0) or hw.sum() <= 0:
        raise ConfigurationError(f"head weights must be {N_HEADS} non-negative reals, got {head_weights}")
    activation = "sigmoid" if n_heads_classes == 1 else "softmax"

    layers = []
    width = input_width
    for pos, s in enumerate(arch):
        if s.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {s.kind!r}")
        if s.kind == "dense":
            if s.width is None or s.width < 1:
                raise ConfigurationError(f"dense layer {pos} needs width >= 1")
            layers.append(Dense(width, s.width, rng))
            width = s.width
        elif s.kind == "relu":
            layers.append(ReLU())
        elif s.kind == "batchnorm":
            layers.append(BatchNorm(width))
        elif s.kind == "concat_input":
            layers.append(ConcatInput(width))
            width += input_width
        else:
            if s.width is not None and s.width != n_heads_classes:
                raise ConfigurationError(f"head {pos} width {s.width} != class count {n_heads_classes}")
            act = s.head_activation or activation
            if act not in ("sigmoid", "softmax"):
                raise ConfigurationError(f"unknown head activation {act!r}")
            prev = arch[pos - 1] if pos > 0 else None
            direct = prev is not None and prev.kind == "dense" and width == n_heads_classes
            layers.append(Head(width, n_heads_classes, act, projection=not direct, rng=rng))
    return Network(input_width, n_heads_classes, layers, hw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_heads(head_outputs, targets):
    if len(head_outputs) != N_HEADS:
        raise DataError(f"expected {N_HEADS} head outputs, got {len(head_outputs)}")
    targets = np.asarray(targets)
    for out in head_outputs:
        if out.shape[0] != targets.shape[0]:
            raise DataError(f"{out.shape[0]} predictions for {targets.shape[0]} targets")
    return targets


def _binary_targets(head_outputs, targets):
    targets = _check_heads(head_outputs, targets).astype(float).reshape(-1)
    if not np.all((targets == 0) | (targets == 1)):
        raise DataError("binary targets must be 0 or 1")
    return targets


def _class_targets(head_outputs, targets):
    targets = _check_heads(head_outputs, targets)
    C = head_outputs[0].shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise DataError(f"class index out of range for {C} classes")
    return targets.astype(int).reshape(-1)


def head_losses(head_outputs, targets, loss_kind):
    """Mean loss of each head separately (unweighted)."""
    if loss_kind == "bfc":
        y = _binary_targets(head_outputs, targets)
        losses = []
        for out in head_outputs:
            p = np.clip(out.reshape(-1), PROB_CLAMP, 1 - PROB_CLAMP)
            losses.append(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        return np.array(losses)
    if loss_kind == "mfec":
        y = _class_targets(head_outputs, targets)
        rows = np.arange(y.size)
        return np.array(
            [-np.mean(np.log(np.clip(out[rows, y], PROB_CLAMP, 1 - PROB_CLAMP))) for out in head_outputs]
        )
    raise ConfigurationError(f"unknown loss kind {loss_kind!r}")


def loss_bfc(head_outputs, targets, weights=DEFAULT_HEAD_WEIGHTS):
    """Weighted binary cross-entropy summed over the three heads."""
    return float(np.dot(weights, head_losses(head_outputs, targets, "bfc")))


def loss_mfec(head_outputs, targets, weights=DEFAULT_HEAD_WEIGHTS):
    """Weighted sparse categorical cross-entropy summed over the three heads."""
    return float(np.dot(weights, head_losses(head_outputs, targets, "mfec")))


def compute_loss(head_outputs, targets, loss_kind, weights=DEFAULT_HEAD_WEIGHTS):
    if loss_kind == "bfc":
        return loss_bfc(head_outputs, targets, weights)
    return loss_mfec(head_outputs, targets, weights)


def head_logit_grads(head_outputs, targets, loss_kind, weights):
    # Gradient of the clamped loss: zero wherever the clamp is active.
    grads = []
    if loss_kind == "bfc":
        y = _binary_targets(head_outputs, targets)
        B = y.size
        for w, out in zip(weights, head_outputs):
            p = out.reshape(-1)
            live = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
            grads.append((w / B * (p - y) * live).reshape(-1, 1))
    elif loss_kind == "mfec":
        y = _class_targets(head_outputs, targets)
        B = y.size
        rows = np.arange(B)
        for w, out in zip(weights, head_outputs):
            py = out[rows, y]
            live = (py > PROB_CLAMP) & (py < 1 - PROB_CLAMP)
            d = out.copy()
            d[rows, y] -= 1.0
            grads.append(w / B * d * live[:, None])
    else:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    return grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(net, grads, state, lr):
    """One bias-corrected Adam update, in place on ``net``."""
    if lr <= 0:
        raise ConfigurationError("learning rate must be positive")
    for i, name, _ in net.parameters():
        g = grads[i].get(name)
        if g is None:
            raise TrainingError(f"missing gradient for layer {i} parameter {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in layer {i} ({net.layers[i].kind}) parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for i, name, p in net.parameters():
        g = grads[i][name]
        key = (i, name)
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key] = b1 * state.m[key] + (1 - b1) * g
        v = state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    extras: dict = field(default_factory=dict)


def fit(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    loss_kind: str,
    *,
    lr: float,
    batch_size: int,
    epochs: int,
    rng: np.random.Generator,
    on_epoch: Callable[[int, Network], dict] | None = None,
) -> list[EpochRecord]:
    """Minibatch Adam training; returns one record per epoch.

    Rows are reshuffled every epoch.  A trailing minibatch of a single row is
    dropped because batch statistics are undefined for it.
    """
    if batch_size < 2:
        raise ConfigurationError("batch size must be >= 2")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if len(X) < 2:
        raise TrainingError("need at least 2 training rows")
    net.train()
    state = AdamState()
    log = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(X))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < 2:
                continue
            outputs, cache = net.forward(X[idx], training=True)
            total += compute_loss(outputs, y[idx], loss_kind, net.head_weights) * len(idx)
            seen += len(idx)
            adam_step(net, net.backward(cache, y[idx], loss_kind), state, lr)
        rec = EpochRecord(epoch, total / seen)
        if on_epoch is not None:
            rec.extras = on_epoch(epoch, net)
        log.append(rec)
    net.eval()
    return log


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def model_to_dict(net):
    layers = []
    for layer in net.layers:
        entry = {"kind": layer.kind}
        if isinstance(layer, (Dense, Head)):
            entry["width"] = layer.width
        if isinstance(layer, Head):
            entry["head_activation"] = layer.activation
        entry["params"] = {k: v.tolist() for k, v in layer.params.items()}
        layers.append(entry)
    return {
        "format_version": FORMAT_VERSION,
        "input_width": net.input_width,
        "class_count": net.class_count,
        "head_weights": net.head_weights.tolist(),
        "layers": layers,
    }


def dumps_model(net):
    return json.dumps(model_to_dict(net), separators=(",", ":"))


def save_model(net, path):
    path = Path(path)
    path.write_text(dumps_model(net), encoding="utf-8")
    return path


def _field(obj, name, where):
    if not isinstance(obj, dict) or name not in obj:
        raise ModelLoadError(f"missing field {where}{name}")
    return obj[name]


def model_from_dict(doc):
    version = _field(doc, "format_version", "")
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")
    input_width = _field(doc, "input_width", "")
    class_count = _field(doc, "class_count", "")
    head_weights = _field(doc, "head_weights", "")
    raw_layers = _field(doc, "layers", "")
    if not isinstance(raw_layers, list):
        raise ModelLoadError("field layers must be a list")
    arch = []
    for i, entry in enumerate(raw_layers):
        kind = _field(entry, "kind", f"layers[{i}].")
        arch.append(LayerSpec(kind, entry.get("width"), entry.get("head_activation")))
    try:
        net = build_network(input_width, class_count, arch, rng=None, head_weights=head_weights)
    except ConfigurationError as exc:
        raise ModelLoadError(f"inconsistent architecture: {exc}") from exc
    for i, (layer, entry) in enumerate(zip(net.layers, raw_layers)):
        params = entry.get("params", {})
        for name, current in layer.params.items():
            where = f"layers[{i}].params.{name}"
            if name not in params:
                raise ModelLoadError(f"missing field {where}")
            try:
                arr = np.asarray(params[name], dtype=float)
            except (TypeError, ValueError) as exc:
                raise ModelLoadError(f"field {where} is not numeric") from exc
            if arr.shape != current.shape:
                raise ModelLoadError(f"field {where} has shape {arr.shape}, expected {current.shape}")
            layer.params[name] = arr
    net.eval()
    return net


def load_model(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    return model_from_dict(doc)


def flatten_params(net) -> np.ndarray:
    return np.concatenate([p.ravel() for _, _, p in net.parameters()])


def flatten_grads(net, grads: Sequence[dict]) -> np.ndarray:
    return np.concatenate([grads[i][name].ravel() for i, name, _ in net.parameters()])
