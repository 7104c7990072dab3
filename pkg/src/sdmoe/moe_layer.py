"""Single MoE feed-forward layer with softmax top-n routing and SwiGLU experts.

Two parameter layouts share one forward/backward path:

* ``baseline``: every expert owns explicit gate/up/down matrices.
* ``sd``: every projection is a :class:`DecoupledLinear`; expert ``i`` uses the
  proxy ``W_c + W_u^(i)``. The backward pass returns proxy gradients, which the
  trainer splits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StaleCacheError
from .sd_expert import DecoupledLinear, InitSpec, init_decoupled, proxy_weight

PROJECTIONS = ("gate", "up", "down")


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * _logistic(z)


def silu_grad(z):
    s = _logistic(z)
    return s * (1.0 + z * (1.0 - s))


_ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class MoeConfig:
    d_model: int = 32
    d_ff: int = 64
    n_experts: int = 4
    top_n: int = 2
    variant: str = "baseline"
    k: int = 4
    aux_coef: float = 0.01
    include_shared_expert: bool = False
    activation: str = "silu"
    init_gain: float = 1.0

    def __post_init__(self):
        if not 1 <= self.top_n <= self.n_experts:
            raise ValueError(f"top_n={self.top_n} must lie in [1, {self.n_experts}]")
        if self.variant not in ("baseline", "sd"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "sd" and not 1 <= self.k < min(self.d_model, self.d_ff):
            raise ValueError(f"k={self.k} must lie in [1, {min(self.d_model, self.d_ff) - 1}]")
        if self.aux_coef < 0:
            raise ValueError("aux_coef must be non-negative")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def proj_shape(self, proj: str) -> tuple[int, int]:
        return (self.d_model, self.d_ff) if proj == "down" else (self.d_ff, self.d_model)


@dataclass
class MoeParams:
    config: MoeConfig
    w_gate: np.ndarray
    experts: dict[str, np.ndarray] = field(default_factory=dict)
    decoupled: dict[str, DecoupledLinear] = field(default_factory=dict)
    shared: dict[str, np.ndarray] | None = None
    version: int = 0

    def expert(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self.config.variant == "sd":
            return tuple(proxy_weight(self.decoupled[p], i) for p in PROJECTIONS)
        return tuple(self.experts[p][i] for p in PROJECTIONS)

    def bump(self) -> None:
        self.version += 1

    def copy(self) -> "MoeParams":
        return MoeParams(
            self.config,
            self.w_gate.copy(),
            {p: w.copy() for p, w in self.experts.items()},
            {p: dl.copy() for p, dl in self.decoupled.items()},
            None if self.shared is None else {p: w.copy() for p, w in self.shared.items()},
            self.version,
        )


def init_params(config: MoeConfig, seed: int, refresh_interval: int = 16) -> MoeParams:
    """Seeded Gaussian init with std ``init_gain / sqrt(fan_in)`` for expert matrices
    (the router always uses ``1 / sqrt(d_model)``)."""
    gain = config.init_gain
    root = np.random.SeedSequence(seed)
    gate_ss, exp_ss, shared_ss = root.spawn(3)
    rng = np.random.default_rng(gate_ss)
    w_gate = rng.standard_normal((config.n_experts, config.d_model)) / np.sqrt(config.d_model)
    params = MoeParams(config, w_gate)
    if config.variant == "baseline":
        rng = np.random.default_rng(exp_ss)
        for p in PROJECTIONS:
            out_d, in_d = config.proj_shape(p)
            params.experts[p] = gain * rng.standard_normal((config.n_experts, out_d, in_d)) / np.sqrt(in_d)
        if config.include_shared_expert:
            rng = np.random.default_rng(shared_ss)
            params.shared = {}
            for p in PROJECTIONS:
                out_d, in_d = config.proj_shape(p)
                params.shared[p] = gain * rng.standard_normal((out_d, in_d)) / np.sqrt(in_d)
    else:
        seeds = exp_ss.generate_state(len(PROJECTIONS))
        for p, s in zip(PROJECTIONS, seeds):
            m, n = config.proj_shape(p)
            spec = InitSpec(int(s), config.k, config.n_experts, scale=gain / np.sqrt(n))
            params.decoupled[p] = init_decoupled(m, n, spec, refresh_interval)
    return params


@dataclass(frozen=True)
class RoutingDecision:
    """Per-token routing: ``selected`` is (T, top_n) ascending, ``weights`` aligned with it."""

    logits: np.ndarray
    probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray

    @property
    def n_experts(self) -> int:
        return self.probs.shape[1]


def route(w_gate, x, top_n: int) -> RoutingDecision:
    """Softmax over every expert, keep the top_n logits, renormalize their probabilities."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w_gate = np.asarray(w_gate, dtype=np.float64)
    if x.shape[1] != w_gate.shape[1]:
        raise ShapeError(f"tokens of width {x.shape[1]} do not match gate {w_gate.shape}")
    logits = x @ w_gate.T
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    # stable sort on -logit: equal logits keep the lower expert index first
    order = np.argsort(-logits, axis=1, kind="stable")[:, :top_n]
    selected = np.sort(order, axis=1)
    sel_p = np.take_along_axis(probs, selected, axis=1)
    weights = sel_p / sel_p.sum(axis=1, keepdims=True)
    return RoutingDecision(logits, probs, selected, weights)


def swiglu_forward(w_g, w_u, w_d, x, activation: str = "silu"):
    """``W_D (act(W_G x) * (W_U x))`` on a (T, d) batch; returns ``(y, intermediates)``."""
    act, _ = _ACTIVATIONS[activation]
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    g = x @ w_g.T
    u = x @ w_u.T
    a = act(g)
    h = a * u
    y = h @ w_d.T
    return y, {"g": g, "u": u, "a": a, "h": h}


def swiglu_backward(w_g, w_u, w_d, x, inter, dy, activation: str = "silu"):
    """Gradients of ``sum(dy * y)``: returns ``(dW_G, dW_U, dW_D, dx)``."""
    _, dact = _ACTIVATIONS[activation]
    dw_d = dy.T @ inter["h"]
    dh = dy @ w_d
    du = dh * inter["a"]
    dg = dh * inter["u"] * dact(inter["g"])
    dw_u = du.T @ x
    dw_g = dg.T @ x
    dx = du @ w_u + dg @ w_g
    return dw_g, dw_u, dw_d, dx


@dataclass
class ForwardCache:
    x: np.ndarray
    routing: RoutingDecision
    tokens: list[np.ndarray]
    slots: list[np.ndarray]
    inter: list[dict | None]
    outputs: list[np.ndarray | None]
    shared_inter: dict | None
    version: int
    weights: list[tuple]


def layer_forward(params: MoeParams, x) -> tuple[np.ndarray, ForwardCache]:
    cfg = params.config
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != cfg.d_model:
        raise ShapeError(f"expected tokens of width {cfg.d_model}, got {x.shape}")
    routing = route(params.w_gate, x, cfg.top_n)
    y = np.zeros_like(x)
    tokens, slots, inters, outs, weights = [], [], [], [], []
    for i in range(cfg.n_experts):
        t_idx, slot = np.nonzero(routing.selected == i)
        w = params.expert(i)
        weights.append(w)
        tokens.append(t_idx)
        slots.append(slot)
        if t_idx.size == 0:
            inters.append(None)
            outs.append(None)
            continue
        out, inter = swiglu_forward(*w, x[t_idx], cfg.activation)
        inters.append(inter)
        outs.append(out)
        y[t_idx] += routing.weights[t_idx, slot][:, None] * out
    shared_inter = None
    if params.shared is not None:
        out, shared_inter = swiglu_forward(
            params.shared["gate"], params.shared["up"], params.shared["down"], x, cfg.activation
        )
        y += out
    cache = ForwardCache(x, routing, tokens, slots, inters, outs, shared_inter, params.version, weights)
    return y, cache


def load_balance_loss(routing: RoutingDecision) -> float:
    """Switch-style ``E * sum_i f_i P_i`` with f_i normalized to sum to one."""
    f, p = _load_fractions(routing)
    return float(routing.n_experts * np.dot(f, p))


def _load_fractions(routing: RoutingDecision):
    n_tok, top_n = routing.selected.shape
    counts = np.bincount(routing.selected.ravel(), minlength=routing.n_experts)
    f = counts / (n_tok * top_n)
    return f, routing.probs.mean(axis=0)


@dataclass
class LayerGrads:
    """Gradients of one layer. ``experts[p]`` has shape (E, out, in); for the sd
    variant these are proxy gradients."""

    w_gate: np.ndarray
    experts: dict[str, np.ndarray]
    dx: np.ndarray
    token_counts: np.ndarray
    shared: dict[str, np.ndarray] | None = None

    def active(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.token_counts)]


def layer_backward(params: MoeParams, cache: ForwardCache, dy, aux_coef: float | None = None) -> LayerGrads:
    """Exact gradient of ``sum(dy * y) + aux_coef * load_balance_loss``.

    Flows through expert weights, the top-n renormalization and the softmax.
    """
    if cache.version != params.version:
        raise StaleCacheError(
            f"cache built at parameter version {cache.version}, params are at {params.version}"
        )
    cfg = params.config
    aux_coef = cfg.aux_coef if aux_coef is None else aux_coef
    dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    x, routing = cache.x, cache.routing
    if dy.shape != x.shape:
        raise ShapeError(f"dy shape {dy.shape} does not match output shape {x.shape}")
    n_tok = x.shape[0]
    dx = np.zeros_like(x)
    dweights = np.zeros_like(routing.weights)
    grads = {p: np.zeros((cfg.n_experts,) + cfg.proj_shape(p)) for p in PROJECTIONS}
    counts = np.zeros(cfg.n_experts, dtype=np.int64)

    for i in range(cfg.n_experts):
        t_idx, slot = cache.tokens[i], cache.slots[i]
        counts[i] = t_idx.size
        if t_idx.size == 0:
            continue
        gw = routing.weights[t_idx, slot][:, None]
        dweights[t_idx, slot] = np.einsum("ij,ij->i", dy[t_idx], cache.outputs[i])
        dw_g, dw_u, dw_d, dxi = swiglu_backward(
            *cache.weights[i], x[t_idx], cache.inter[i], gw * dy[t_idx], cfg.activation
        )
        grads["gate"][i], grads["up"][i], grads["down"][i] = dw_g, dw_u, dw_d
        np.add.at(dx, t_idx, dxi)

    # renormalized weights w_j = p_j / S over the selected set
    sel_p = np.take_along_axis(routing.probs, routing.selected, axis=1)
    total = sel_p.sum(axis=1, keepdims=True)
    dsel = (dweights - np.sum(dweights * routing.weights, axis=1, keepdims=True)) / total
    dprobs = np.zeros_like(routing.probs)
    np.put_along_axis(dprobs, routing.selected, dsel, axis=1)
    if aux_coef > 0:
        f, _ = _load_fractions(routing)
        dprobs += aux_coef * routing.n_experts * f[None, :] / n_tok
    dlogits = routing.probs * (dprobs - np.sum(dprobs * routing.probs, axis=1, keepdims=True))
    dw_gate = dlogits.T @ x
    dx += dlogits @ params.w_gate

    shared = None
    if params.shared is not None:
        sg, su, sd_, sdx = swiglu_backward(
            params.shared["gate"], params.shared["up"], params.shared["down"],
            x, cache.shared_inter, dy, cfg.activation,
        )
        shared = {"gate": sg, "up": su, "down": sd_}
        dx += sdx
    return LayerGrads(dw_gate, grads, dx, counts, shared)


def _parameter_views(params: MoeParams):
    """Yield ``(name, array)`` for every trainable array (arrays are live views)."""
    yield "w_gate", params.w_gate
    if params.config.variant == "sd":
        for p in PROJECTIONS:
            dl = params.decoupled[p]
            yield f"{p}.common", dl.w_c
            for i, w in enumerate(dl.uniques):
                yield f"{p}.unique{i}", w
    else:
        for p in PROJECTIONS:
            yield f"{p}.experts", params.experts[p]
        if params.shared is not None:
            for p in PROJECTIONS:
                yield f"{p}.shared", params.shared[p]


def _analytic(grads: LayerGrads, name: str) -> np.ndarray:
    if name == "w_gate":
        return grads.w_gate
    proj, kind = name.split(".")
    if kind == "experts":
        return grads.experts[proj]
    if kind == "shared":
        return grads.shared[proj]
    if kind == "common":
        return grads.experts[proj].sum(axis=0)
    return grads.experts[proj][int(kind[len("unique"):])]


@dataclass
class GradCheckReport:
    max_rel_error: float
    location: str
    n_checked: int
    per_tensor: dict[str, float]
    max_abs_error: float = 0.0

    def as_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "location": self.location,
            "n_checked": self.n_checked,
            "per_tensor": self.per_tensor,
        }


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    params: MoeParams,
    n_tokens: int = 5,
    h: float = 1e-5,
    seed: int = 0,
    max_entries: int | None = None,
) -> GradCheckReport:
    """Compare ``layer_backward`` with central differences of the scalar loss
    ``sum(R * y) + aux_coef * load_balance_loss`` for a seeded projection ``R``.

    With ``max_entries`` set and smaller than the parameter count, a seeded
    random subset of entries is probed.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    cfg = params.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_tokens, cfg.d_model))
    r = rng.standard_normal((n_tokens, cfg.d_model))
    params = params.copy()

    def loss() -> float:
        y, cache = layer_forward(params, x)
        return float(np.sum(r * y) + cfg.aux_coef * load_balance_loss(cache.routing))

    _, cache = layer_forward(params, x)
    grads = layer_backward(params, cache, r)

    views = list(_parameter_views(params))
    entries = [(name, idx) for name, arr in views for idx in np.ndindex(arr.shape)]
    if max_entries is not None and len(entries) > max_entries:
        pick = np.sort(rng.choice(len(entries), size=max_entries, replace=False))
        entries = [entries[j] for j in pick]
    arrays = dict(views)

    worst, worst_abs, where = 0.0, 0.0, ""
    per_tensor: dict[str, float] = {}
    for name, idx in entries:
        arr = arrays[name]
        orig = arr[idx]
        arr[idx] = orig + h
        lp = loss()
        arr[idx] = orig - h
        lm = loss()
        arr[idx] = orig
        fd = (lp - lm) / (2 * h)
        an = float(_analytic(grads, name)[idx])
        err = rel_error(an, fd)
        worst_abs = max(worst_abs, abs(an - fd))
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        if err > worst:
            worst, where = err, f"{name}{list(idx)}"
    return GradCheckReport(worst, where, len(entries), per_tensor, worst_abs)
