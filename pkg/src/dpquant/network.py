"""Minimal feed-forward network with per-example gradients and quantization hooks.

Layers: dense, conv2d (im2col + matmul), relu, avgpool (non-overlapping),
flatten.  Working precision is float64 throughout; low precision is simulated
by value snapping in :mod:`dpquant.quantize`.

Quantization points follow the three-operator scheme for linear layers: the
forward matmul, the weight-gradient matmul, and the input-gradient matmul
each quantize both operands and their output when the layer is in the active
policy.  Bias addition, activation functions, and pooling always run in full
precision.  Per-example gradients are produced as rows of a (B, P) matrix,
computed with batched einsum contractions that never reduce over the batch
axis, so each row depends only on its own example in the unquantized path.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .quantize import QuantGrid, quantize

QUANTIZABLE_KINDS = ("dense", "conv2d")
_KINDS = ("dense", "conv2d", "relu", "avgpool", "flatten")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: integer id (position in the stack), kind, and size params."""

    id: int
    kind: str
    dims: dict = field(default_factory=dict)

    @property
    def quantizable(self) -> bool:
        return self.kind in QUANTIZABLE_KINDS


@dataclass
class ParamSnapshot:
    """Deep copy of network parameters plus an optional RNG-state capture."""

    fingerprint: tuple
    params: list
    rng_state: dict | None = None


class ForwardTrace:
    """Per-layer activations captured by forward() for the backward pass."""

    def __init__(self, batch_size: int):
        self.batch_size = batch_size
        self.inputs: dict[int, np.ndarray] = {}
        self.shapes: dict[int, tuple] = {}
        self.logits: np.ndarray | None = None


def _flat_matmul(stack: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """(B, P, K) @ (K, C) as one 2D GEMM; faster than batched matmul."""
    b, p, k = stack.shape
    return (stack.reshape(b * p, k) @ mat).reshape(b, p, -1)


def _parse_int(token: str, key: str, line_no: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ConfigError(f"layer {line_no}: {key}={token!r} is not an integer")
    if value <= 0 and key != "p":
        raise ConfigError(f"layer {line_no}: {key} must be positive, got {value}")
    if value < 0:
        raise ConfigError(f"layer {line_no}: {key} must be >= 0, got {value}")
    return value


_ALLOWED_KEYS = {
    "dense": {"in", "out"},
    "conv2d": {"in", "out", "k", "s", "p"},
    "avgpool": {"k", "s"},
    "relu": set(),
    "flatten": set(),
}

_REQUIRED_KEYS = {
    "dense": {"in", "out"},
    "conv2d": {"in", "out", "k"},
    "avgpool": {"k"},
    "relu": set(),
    "flatten": set(),
}


def parse_architecture(text: str) -> list[LayerSpec]:
    """Parse the one-layer-per-line ``kind key=value ...`` grammar."""
    specs = []
    position = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        position += 1
        parts = line.split()
        kind = parts[0]
        if kind not in _KINDS:
            raise ConfigError(f"layer {position}: unknown kind {kind!r}")
        dims = {}
        for tok in parts[1:]:
            if "=" not in tok:
                raise ConfigError(
                    f"layer {position}: expected key=value, got {tok!r}"
                )
            key, val = tok.split("=", 1)
            if key not in _ALLOWED_KEYS[kind]:
                raise ConfigError(
                    f"layer {position}: key {key!r} not valid for {kind}"
                )
            dims[key] = _parse_int(val, key, position)
        missing = _REQUIRED_KEYS[kind] - dims.keys()
        if missing:
            raise ConfigError(
                f"layer {position}: {kind} missing {sorted(missing)}"
            )
        if kind == "conv2d":
            dims.setdefault("s", 1)
            dims.setdefault("p", 0)
        if kind == "avgpool":
            dims.setdefault("s", dims["k"])
            if dims["s"] != dims["k"]:
                raise ConfigError(
                    f"layer {position}: avgpool stride must equal kernel size"
                )
        specs.append(LayerSpec(id=position - 1, kind=kind, dims=dims))
    if not specs:
        raise ConfigError("architecture text contains no layers")
    return specs


class Network:
    """Ordered layer stack with parameters and shape bookkeeping."""

    def __init__(self, specs: list[LayerSpec], input_shape: tuple, seed: int):
        self.specs = specs
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        self._in_shapes: list[tuple] = []
        self._out_shapes: list[tuple] = []
        self._conv_aux: dict[int, dict] = {}
        self._propagate_shapes()
        self.params: list[dict | None] = self._init_params(seed)
        self._index_params()

    # -- construction -----------------------------------------------------

    def _propagate_shapes(self):
        shape = self.input_shape
        for spec in self.specs:
            self._in_shapes.append(shape)
            n = spec.id + 1  # 1-based position for messages
            if spec.kind == "dense":
                if len(shape) != 1:
                    raise ConfigError(
                        f"layer {n} (dense) expects flat input, got shape "
                        f"{shape}; insert a flatten layer"
                    )
                if shape[0] != spec.dims["in"]:
                    prev = self._blame(spec.id)
                    raise ConfigError(
                        f"layer {prev} output {shape[0]} ≠ "
                        f"layer {n} input {spec.dims['in']}"
                    )
                shape = (spec.dims["out"],)
            elif spec.kind == "conv2d":
                if len(shape) != 3:
                    raise ConfigError(
                        f"layer {n} (conv2d) expects CxHxW input, got {shape}"
                    )
                c, h, w = shape
                if c != spec.dims["in"]:
                    prev = self._blame(spec.id)
                    raise ConfigError(
                        f"layer {prev} output {c} ≠ "
                        f"layer {n} input {spec.dims['in']} (channels)"
                    )
                k, s, p = spec.dims["k"], spec.dims["s"], spec.dims["p"]
                oh = (h + 2 * p - k) // s + 1
                ow = (w + 2 * p - k) // s + 1
                if oh <= 0 or ow <= 0:
                    raise ConfigError(
                        f"layer {n} (conv2d) kernel {k} does not fit input "
                        f"{h}x{w} with padding {p}"
                    )
                self._build_conv_aux(spec, c, h, w, oh, ow)
                shape = (spec.dims["out"], oh, ow)
            elif spec.kind == "relu":
                pass
            elif spec.kind == "avgpool":
                if len(shape) != 3:
                    raise ConfigError(
                        f"layer {n} (avgpool) expects CxHxW input, got {shape}"
                    )
                c, h, w = shape
                k = spec.dims["k"]
                oh, ow = h // k, w // k
                if oh <= 0 or ow <= 0:
                    raise ConfigError(
                        f"layer {n} (avgpool) kernel {k} exceeds input {h}x{w}"
                    )
                shape = (c, oh, ow)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            self._out_shapes.append(shape)

    def _blame(self, layer_id: int) -> int:
        """1-based position of the nearest upstream layer, for error text."""
        return layer_id if layer_id >= 1 else 1

    def _build_conv_aux(self, spec, c, h, w, oh, ow):
        k, s, p = spec.dims["k"], spec.dims["s"], spec.dims["p"]
        hp, wp = h + 2 * p, w + 2 * p
        ci, ki, kj = np.meshgrid(
            np.arange(c), np.arange(k), np.arange(k), indexing="ij"
        )
        taps = (ci * hp * wp + ki * wp + kj).ravel()  # (K,) at window origin
        oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
        origins = (oi * s * wp + oj * s).ravel()  # (oh*ow,)
        idx = origins[:, None] + taps[None, :]  # (oh*ow, K)
        n_flat = c * hp * wp
        m = idx.size
        scatter_t = sp.csr_matrix(
            (np.ones(m), (idx.ravel(), np.arange(m))), shape=(n_flat, m)
        )
        self._conv_aux[spec.id] = {
            "idx": idx,
            "scatter_t": scatter_t,
            "pad": p,
            "oh": oh,
            "ow": ow,
            "hp": hp,
            "wp": wp,
        }

    def _init_params(self, seed: int) -> list:
        rng = np.random.default_rng(seed)
        params = []
        for spec in self.specs:
            if spec.kind == "dense":
                fan_in = spec.dims["in"]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(fan_in, spec.dims["out"]))
                params.append({"W": w, "b": np.zeros(spec.dims["out"])})
            elif spec.kind == "conv2d":
                k = spec.dims["k"]
                fan_in = spec.dims["in"] * k * k
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(fan_in, spec.dims["out"]))
                params.append({"W": w, "b": np.zeros(spec.dims["out"])})
            else:
                params.append(None)
        return params

    def _index_params(self):
        self.param_slices: list[tuple[int, str, slice]] = []
        offset = 0
        for spec, p in zip(self.specs, self.params):
            if p is None:
                continue
            for name in ("W", "b"):
                size = p[name].size
                self.param_slices.append(
                    (spec.id, name, slice(offset, offset + size))
                )
                offset += size
        self.n_params = offset

    # -- introspection ----------------------------------------------------

    @property
    def quantizable_ids(self) -> tuple[int, ...]:
        return tuple(s.id for s in self.specs if s.quantizable)

    @property
    def n_classes(self) -> int:
        return self._out_shapes[-1][0]

    def fingerprint(self) -> tuple:
        return tuple(
            (s.kind, tuple(sorted(s.dims.items()))) for s in self.specs
        ) + (self.input_shape,)

    def get_flat_params(self) -> np.ndarray:
        vec = np.empty(self.n_params)
        for lid, name, sl in self.param_slices:
            vec[sl] = self.params[lid][name].ravel()
        return vec

    def set_flat_params(self, vec: np.ndarray) -> None:
        for lid, name, sl in self.param_slices:
            arr = self.params[lid][name]
            arr[...] = np.asarray(vec[sl]).reshape(arr.shape)

    def apply_update(self, direction: np.ndarray, eta: float) -> None:
        """In-place ``param -= eta * direction`` over the flat layout."""
        for lid, name, sl in self.param_slices:
            arr = self.params[lid][name]
            arr -= eta * direction[sl].reshape(arr.shape)

    def validate_policy(self, policy) -> frozenset:
        ids = frozenset(int(i) for i in policy)
        bad = ids - set(self.quantizable_ids)
        if bad:
            raise ConfigError(
                f"policy references non-quantizable or unknown layer ids "
                f"{sorted(bad)}; quantizable ids are {self.quantizable_ids}"
            )
        return ids

    # -- layer primitives ---------------------------------------------------
    # Both the plain path and the policy path go through these, so an empty
    # policy is bit-identical to the plain path.

    def _im2col(self, x: np.ndarray, lid: int) -> np.ndarray:
        aux = self._conv_aux[lid]
        p = aux["pad"]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        flat = x.reshape(x.shape[0], -1)
        return flat[:, aux["idx"]]  # (B, oh*ow, K)

    def _col2im(self, dcols: np.ndarray, lid: int, batch: int) -> np.ndarray:
        aux = self._conv_aux[lid]
        flat = (aux["scatter_t"] @ dcols.reshape(batch, -1).T).T
        c = self.specs[lid].dims["in"]
        hp, wp, p = aux["hp"], aux["wp"], aux["pad"]
        img = np.ascontiguousarray(flat).reshape(batch, c, hp, wp)
        if p:
            img = img[:, :, p:-p, p:-p]
        return img

    # -- forward ------------------------------------------------------------

    def forward(self, batch, policy=frozenset(), grid: QuantGrid | None = None,
                rng=None):
        """Run the stack, quantizing linear ops for layers in ``policy``.

        Returns ``(logits, trace)``.  ``grid``/``rng`` may be omitted only
        when the policy is empty.
        """
        x = np.asarray(batch, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ConfigError(
                f"batch shape {x.shape[1:]} does not match network input "
                f"{self.input_shape}"
            )
        ids = self.validate_policy(policy)
        if ids and grid is None:
            raise ConfigError("non-empty policy requires a quantizer grid")
        trace = ForwardTrace(batch_size=x.shape[0])
        for spec in self.specs:
            lid = spec.id
            if spec.kind == "dense":
                trace.inputs[lid] = x
                w, b = self.params[lid]["W"], self.params[lid]["b"]
                if lid in ids and not grid.identity:
                    z = quantize(x, grid, rng) @ quantize(w, grid, rng)
                    z = quantize(z, grid, rng)
                else:
                    z = x @ w
                x = z + b
            elif spec.kind == "conv2d":
                trace.inputs[lid] = x
                w, b = self.params[lid]["W"], self.params[lid]["b"]
                aux = self._conv_aux[lid]
                n_b = x.shape[0]
                if lid in ids and not grid.identity:
                    cols = self._im2col(quantize(x, grid, rng), lid)
                    z = _flat_matmul(cols, quantize(w, grid, rng))
                    z = quantize(z, grid, rng)
                else:
                    z = _flat_matmul(self._im2col(x, lid), w)
                z = z + b
                x = np.moveaxis(
                    z.reshape(n_b, aux["oh"], aux["ow"], -1), 3, 1
                )
            elif spec.kind == "relu":
                trace.inputs[lid] = x
                x = np.maximum(x, 0.0)
            elif spec.kind == "avgpool":
                trace.shapes[lid] = x.shape
                k = spec.dims["k"]
                b_, c, h, w_ = x.shape
                oh, ow = h // k, w_ // k
                x = x[:, :, : oh * k, : ow * k].reshape(
                    b_, c, oh, k, ow, k
                ).mean(axis=(3, 5))
            elif spec.kind == "flatten":
                trace.shapes[lid] = x.shape
                x = x.reshape(x.shape[0], -1)
        if x.ndim != 2:
            raise ConfigError(
                "network output is not a flat logits matrix; end the stack "
                "with flatten/dense layers"
            )
        trace.logits = x
        return x, trace

    def forward_plain(self, batch) -> np.ndarray:
        """Dedicated full-precision forward; no policy plumbing at all."""
        logits, _ = self.forward(batch)
        return logits

    # -- backward -----------------------------------------------------------

    def backward_per_example(self, trace: ForwardTrace, targets,
                             policy=frozenset(),
                             grid: QuantGrid | None = None, rng=None):
        """Per-example gradients of the per-example cross-entropy loss.

        Row ``i`` of the returned (B, P) matrix is the gradient of
        ``ce(logits_i, y_i)`` (not divided by the batch size).  Layers in
        ``policy`` quantize the operands and outputs of their two backward
        matmuls; everything else follows the exact chain rule.
        """
        y = np.asarray(targets)
        batch = trace.batch_size
        if y.shape[0] != batch:
            raise ConfigError(
                f"targets length {y.shape[0]} does not match trace batch "
                f"{batch}"
            )
        ids = self.validate_policy(policy)
        if ids and grid is None:
            raise ConfigError("non-empty policy requires a quantizer grid")

        # every parameter slice is written below, so no zero fill needed
        grads = np.empty((batch, self.n_params))
        slices = {(lid, name): sl for lid, name, sl in self.param_slices}

        probs = softmax(trace.logits)
        delta = probs.copy()
        delta[np.arange(batch), y] -= 1.0

        for spec in reversed(self.specs):
            lid = spec.id
            quant = lid in ids and not grid.identity
            if spec.kind == "dense":
                x = trace.inputs[lid]
                w = self.params[lid]["W"]
                grads[:, slices[(lid, "b")]] = delta
                if quant:
                    qx = quantize(x, grid, rng)
                    qd = quantize(delta, grid, rng)
                    wg = qx[:, :, None] * qd[:, None, :]
                    wg = quantize(wg, grid, rng)
                    dx = quantize(delta, grid, rng) @ quantize(w, grid, rng).T
                    dx = quantize(dx, grid, rng)
                else:
                    wg = x[:, :, None] * delta[:, None, :]
                    dx = delta @ w.T
                grads[:, slices[(lid, "W")]] = wg.reshape(batch, -1)
                delta = dx
            elif spec.kind == "conv2d":
                x = trace.inputs[lid]
                w = self.params[lid]["W"]
                aux = self._conv_aux[lid]
                d2 = np.ascontiguousarray(
                    np.moveaxis(delta, 1, 3)
                ).reshape(batch, aux["oh"] * aux["ow"], -1)
                grads[:, slices[(lid, "b")]] = d2.sum(axis=1)
                if quant:
                    cols = self._im2col(quantize(x, grid, rng), lid)
                    qd = quantize(d2, grid, rng)
                    wg = np.matmul(cols.transpose(0, 2, 1), qd)
                    wg = quantize(wg, grid, rng)
                    dcols = _flat_matmul(
                        quantize(d2, grid, rng), quantize(w, grid, rng).T
                    )
                    dx = self._col2im(dcols, lid, batch)
                    dx = quantize(dx, grid, rng)
                else:
                    cols = self._im2col(x, lid)
                    wg = np.matmul(cols.transpose(0, 2, 1), d2)
                    dcols = _flat_matmul(d2, w.T)
                    dx = self._col2im(dcols, lid, batch)
                grads[:, slices[(lid, "W")]] = wg.reshape(batch, -1)
                delta = dx
            elif spec.kind == "relu":
                delta = delta * (trace.inputs[lid] > 0.0)
            elif spec.kind == "avgpool":
                k = spec.dims["k"]
                b_, c, h, w_ = trace.shapes[lid]
                oh, ow = delta.shape[2], delta.shape[3]
                up = np.repeat(np.repeat(delta / (k * k), k, axis=2), k, axis=3)
                full = np.zeros((b_, c, h, w_))
                full[:, :, : oh * k, : ow * k] = up
                delta = full
            elif spec.kind == "flatten":
                delta = delta.reshape(trace.shapes[lid])
        return grads

    def backward_per_example_plain(self, trace: ForwardTrace, targets):
        """Dedicated full-precision per-example backward."""
        return self.backward_per_example(trace, targets)


# -- module-level operations ---------------------------------------------


def build_network(arch_text: str, input_shape, seed: int = 0) -> Network:
    """Build a network from architecture text with seeded He-style init."""
    specs = parse_architecture(arch_text)
    return Network(specs, tuple(input_shape), seed)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets) -> np.ndarray:
    """Per-example softmax cross-entropy."""
    y = np.asarray(targets)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), y]


def loss_batch(net: Network, batch, targets, policy=frozenset(),
               grid: QuantGrid | None = None, rng=None) -> float:
    """Mean cross-entropy of a batch under a quantization policy."""
    x = np.asarray(batch)
    if x.shape[0] == 0:
        raise ConfigError("loss_batch called with an empty batch")
    logits, _ = net.forward(x, policy, grid, rng)
    return float(np.mean(cross_entropy(logits, targets)))


def snapshot(net: Network, rng=None) -> ParamSnapshot:
    """Capture parameters (and the RNG state, if a generator is given)."""
    params = [
        None if p is None else {k: v.copy() for k, v in p.items()}
        for p in net.params
    ]
    state = copy.deepcopy(rng.bit_generator.state) if rng is not None else None
    return ParamSnapshot(fingerprint=net.fingerprint(), params=params,
                         rng_state=state)


def restore(net: Network, snap: ParamSnapshot, rng=None) -> None:
    """Write snapshot parameters back in place; optionally rewind the RNG.

    After restore, seeded computation replays bit-identically from the
    capture point.
    """
    if snap.fingerprint != net.fingerprint():
        raise ConfigError(
            "snapshot architecture does not match this network"
        )
    for dst, src in zip(net.params, snap.params):
        if dst is None:
            continue
        for name in dst:
            dst[name][...] = src[name]
    if rng is not None and snap.rng_state is not None:
        rng.bit_generator.state = copy.deepcopy(snap.rng_state)
