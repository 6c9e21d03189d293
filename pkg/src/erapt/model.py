"""Prompted cosine classifier with a frozen backbone.

features  u = W_in x + W_prompt p
          z = u                       (linear)
          z = tanh(W_hidden u)        (one-hidden-tanh)
logits_j  = cos(z, c_j) / tau_logit
probs     = softmax(logits)

Only the prompt ``p`` is learnable. Every loss comes with closed-form
gradients w.r.t. the input and w.r.t. the prompt; inputs may be a single
vector or a stack of row vectors.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numcore import PROB_FLOOR, RandomStream, softmax

LINEAR = "linear"
TANH = "one-hidden-tanh"
BACKBONES = (LINEAR, TANH)

_FEATURE_NORM_MIN = 0.0
_PROTOTYPE_NORM_MIN = 1e-9


@dataclass(frozen=True)
class ModelInitSpec:
    input_dim: int
    prompt_dim: int
    feature_dim: int
    num_classes: int
    backbone_kind: str = TANH
    init_seed: int = 0
    init_scale: float = 1.0
    tau_logit: float = 0.07

    def __post_init__(self):
        for name in ("input_dim", "prompt_dim", "feature_dim", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backbone_kind not in BACKBONES:
            raise ValueError(f"backbone_kind must be one of {BACKBONES}, got {self.backbone_kind!r}")
        if not self.init_scale > 0:
            raise ValueError("init_scale must be positive")
        if not self.tau_logit > 0:
            raise ValueError("tau_logit must be positive")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PromptedClassifier:
    backbone_kind: str
    W_in: np.ndarray
    W_prompt: np.ndarray
    prototypes: np.ndarray
    prompt: np.ndarray
    tau_logit: float
    W_hidden: Optional[np.ndarray] = None
    _proto_unit: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.backbone_kind not in BACKBONES:
            raise ValueError(f"unknown backbone_kind {self.backbone_kind!r}")
        if not self.tau_logit > 0:
            raise ValueError("tau_logit must be positive")
        f, d = self.W_in.shape
        if self.W_prompt.ndim != 2 or self.W_prompt.shape[0] != f:
            raise ValueError("W_prompt must be feature_dim x prompt_dim")
        if self.prototypes.ndim != 2 or self.prototypes.shape[1] != f:
            raise ValueError("prototypes must be num_classes x feature_dim")
        if self.prompt.shape != (self.W_prompt.shape[1],):
            raise ValueError("prompt length must equal prompt_dim")
        if self.backbone_kind == TANH:
            if self.W_hidden is None or self.W_hidden.shape != (f, f):
                raise ValueError("one-hidden-tanh backbone needs W_hidden of shape feature_dim x feature_dim")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(norms <= _PROTOTYPE_NORM_MIN):
            raise ValueError("prototype rows must have norm > 1e-9")
        for name in ("W_in", "W_prompt", "prototypes", "W_hidden"):
            a = getattr(self, name)
            if a is not None:
                object.__setattr__(self, name, _frozen(a))
        object.__setattr__(self, "prompt", _frozen(self.prompt))
        object.__setattr__(self, "_proto_unit", _frozen(self.prototypes / norms[:, None]))

    @property
    def input_dim(self) -> int:
        return self.W_in.shape[1]

    @property
    def prompt_dim(self) -> int:
        return self.W_prompt.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W_in.shape[0]

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def with_prompt(self, prompt) -> "PromptedClassifier":
        return dataclasses.replace(self, prompt=np.asarray(prompt, dtype=np.float64))

    def with_tau(self, tau_logit: float) -> "PromptedClassifier":
        return dataclasses.replace(self, tau_logit=float(tau_logit))


def init_model(spec: ModelInitSpec) -> PromptedClassifier:
    stream = RandomStream(spec.init_seed).split("model-init")
    s = spec.init_scale
    f = spec.feature_dim
    W_in = stream.uniform(-s, s, (f, spec.input_dim))
    W_prompt = stream.uniform(-s, s, (f, spec.prompt_dim))
    W_hidden = stream.uniform(-s, s, (f, f)) if spec.backbone_kind == TANH else None
    prototypes = np.empty((spec.num_classes, f))
    for j in range(spec.num_classes):
        row = stream.uniform(-s, s, (f,))
        while np.linalg.norm(row) <= _PROTOTYPE_NORM_MIN:
            row = stream.uniform(-s, s, (f,))
        prototypes[j] = row
    return PromptedClassifier(
        backbone_kind=spec.backbone_kind,
        W_in=W_in,
        W_prompt=W_prompt,
        W_hidden=W_hidden,
        prototypes=prototypes,
        prompt=np.zeros(spec.prompt_dim),
        tau_logit=float(spec.tau_logit),
    )


def frozen_checksum(model: PromptedClassifier) -> str:
    h = hashlib.sha256()
    h.update(model.backbone_kind.encode())
    h.update(np.float64(model.tau_logit).tobytes())
    for a in (model.W_in, model.W_prompt, model.W_hidden, model.prototypes):
        if a is None:
            h.update(b"none")
        else:
            h.update(repr(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class _Trace:
    z: np.ndarray       # (B, f) features
    norm: np.ndarray    # (B,)
    cos: np.ndarray     # (B, K)
    logits: np.ndarray  # (B, K)
    probs: np.ndarray   # (B, K)


def _as_batch(model: PromptedClassifier, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"input must have length {model.input_dim}, got shape {np.shape(x)}")
    return X, single


def _run(model: PromptedClassifier, X: np.ndarray) -> _Trace:
    u = X @ model.W_in.T + model.W_prompt @ model.prompt
    if model.backbone_kind == TANH:
        z = np.tanh(u @ model.W_hidden.T)
    else:
        z = u
    norm = np.linalg.norm(z, axis=1)
    if np.any(norm <= _FEATURE_NORM_MIN):
        raise ValueError("feature vector has zero norm; cosine logits undefined")
    cos = np.clip((z @ model._proto_unit.T) / norm[:, None], -1.0, 1.0)
    logits = cos / model.tau_logit
    return _Trace(z, norm, cos, logits, softmax(logits))


def forward(model: PromptedClassifier, x):
    """Return (features, logits, probs) for one input or a stack of inputs."""
    X, single = _as_batch(model, x)
    t = _run(model, X)
    if single:
        return t.z[0], t.logits[0], t.probs[0]
    return t.z, t.logits, t.probs


def predict(model: PromptedClassifier, x) -> np.ndarray:
    _, logits, _ = forward(model, x)
    return np.argmax(logits, axis=-1)


def _backprop(model: PromptedClassifier, t: _Trace, g_logits: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-activation u, given gradient w.r.t. logits."""
    g_cos = g_logits / model.tau_logit
    n = t.norm[:, None]
    # d cos_j / dz = c_j/n - cos_j z / n^2
    g_z = (g_cos @ model._proto_unit) / n - (np.sum(g_cos * t.cos, axis=1, keepdims=True) / n**2) * t.z
    if model.backbone_kind == TANH:
        return (g_z * (1.0 - t.z**2)) @ model.W_hidden
    return g_z


# ---------------------------------------------------------------------------
# cross-entropy


def _labels(y, B: int, K: int) -> np.ndarray:
    Y = np.broadcast_to(np.asarray(y, dtype=np.int64), (B,))
    if np.any(Y < 0) or np.any(Y >= K):
        raise IndexError(f"label out of range for {K} classes")
    return Y


def _ce_parts(model, x, y):
    X, single = _as_batch(model, x)
    t = _run(model, X)
    Y = _labels(y, X.shape[0], model.num_classes)
    rows = np.arange(X.shape[0])
    py = t.probs[rows, Y]
    loss = -np.log(np.maximum(py, PROB_FLOOR))
    g = t.probs.copy()
    g[rows, Y] -= 1.0
    # the floor makes CE locally constant
    g[py < PROB_FLOOR] = 0.0
    return t, loss, g, single


def loss_ce(model: PromptedClassifier, x, y):
    _, loss, _, single = _ce_parts(model, x, y)
    return float(loss[0]) if single else loss


def grad_input_ce(model: PromptedClassifier, x, y) -> np.ndarray:
    t, _, g, single = _ce_parts(model, x, y)
    gx = _backprop(model, t, g) @ model.W_in
    return gx[0] if single else gx


def grad_prompt_ce(model: PromptedClassifier, x, y) -> np.ndarray:
    """Prompt gradient; rows of a stacked input are summed."""
    t, _, g, _ = _ce_parts(model, x, y)
    return _backprop(model, t, g).sum(axis=0) @ model.W_prompt


def ce_with_grads(model: PromptedClassifier, X: np.ndarray, y):
    """Per-row CE, per-row input gradients and summed prompt gradient in one pass."""
    t, loss, g, _ = _ce_parts(model, np.atleast_2d(X), y)
    gu = _backprop(model, t, g)
    return loss, gu @ model.W_in, gu.sum(axis=0) @ model.W_prompt


# ---------------------------------------------------------------------------
# KL(p || q) between two forward passes


def kl_logit_grads(p: np.ndarray, q: np.ndarray):
    """KL(p||q) row-wise and its exact gradients w.r.t. the logits behind p and q.

    Honors the probability floor: a floored log is locally constant.
    """
    lp = np.log(np.maximum(p, PROB_FLOOR))
    lq = np.log(np.maximum(q, PROB_FLOOR))
    kl = np.sum(p * (lp - lq), axis=-1)
    active_q = q > PROB_FLOOR
    g_b = q * np.sum(p * active_q, axis=-1, keepdims=True) - p * active_q
    s = lp - lq + (p > PROB_FLOOR)
    g_a = p * (s - np.sum(p * s, axis=-1, keepdims=True))
    return kl, g_a, g_b


def _kl_parts(model, x_p, x_q):
    Xp, single = _as_batch(model, x_p)
    Xq, single_q = _as_batch(model, x_q)
    if Xp.shape[0] != Xq.shape[0]:
        Xp, Xq = np.broadcast_arrays(Xp, Xq)
    tp = _run(model, Xp)
    tq = _run(model, Xq)
    kl, g_a, g_b = kl_logit_grads(tp.probs, tq.probs)
    return tp, tq, kl, g_a, g_b, single and single_q


def loss_kl(model: PromptedClassifier, x_clean, x_adv):
    """KL(probs(x_clean) || probs(x_adv))."""
    _, _, kl, _, _, single = _kl_parts(model, x_clean, x_adv)
    return float(kl[0]) if single else kl


def grad_input_kl(model: PromptedClassifier, x_clean, x_adv) -> np.ndarray:
    """Gradient w.r.t. x_adv with the clean branch held constant."""
    _, tq, _, _, g_b, single = _kl_parts(model, x_clean, x_adv)
    gx = _backprop(model, tq, g_b) @ model.W_in
    return gx[0] if single else gx


def grad_prompt_kl(model: PromptedClassifier, x_clean, x_adv) -> np.ndarray:
    """Prompt gradient through both branches; rows are summed."""
    tp, tq, _, g_a, g_b, _ = _kl_parts(model, x_clean, x_adv)
    gu = _backprop(model, tp, g_a) + _backprop(model, tq, g_b)
    return gu.sum(axis=0) @ model.W_prompt


def kl_with_prompt_grad(model: PromptedClassifier, x_p, x_q):
    """Row-wise KL(probs(x_p) || probs(x_q)) with per-row prompt gradients.

    Either argument may be a single vector broadcast against the other's rows.
    """
    Xp = np.atleast_2d(np.asarray(x_p, dtype=np.float64))
    Xq = np.atleast_2d(np.asarray(x_q, dtype=np.float64))
    Xp, Xq = np.broadcast_arrays(Xp, Xq)
    tp = _run(model, Xp)
    tq = _run(model, Xq)
    kl, g_a, g_b = kl_logit_grads(tp.probs, tq.probs)
    gu = _backprop(model, tp, g_a) + _backprop(model, tq, g_b)
    return kl, gu @ model.W_prompt


# ---------------------------------------------------------------------------
# text serialization: one ``key = value-list`` line per field

_MATRIX_KEYS = ("W_in", "W_prompt", "W_hidden", "prototypes")


def _fmt(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in np.ravel(values))


def dumps_model(model: PromptedClassifier) -> str:
    lines = [
        f"backbone_kind = {model.backbone_kind}",
        f"dims = {model.input_dim} {model.prompt_dim} {model.feature_dim} {model.num_classes}",
        f"tau_logit = {model.tau_logit:.17g}",
    ]
    for key in _MATRIX_KEYS:
        a = getattr(model, key)
        if a is not None:
            lines.append(f"{key} = {_fmt(a)}")
    lines.append(f"prompt = {_fmt(model.prompt)}")
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> PromptedClassifier:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"model line {lineno}: expected 'key = value'")
        fields[key.strip()] = value.strip()
    try:
        kind = fields["backbone_kind"]
        d, p, f, k = (int(v) for v in fields["dims"].split())
        tau = float(fields["tau_logit"])

        def mat(key, shape):
            vals = np.array([float(v) for v in fields[key].split()], dtype=np.float64)
            if vals.size != int(np.prod(shape)):
                raise ValueError(f"model key {key}: expected {int(np.prod(shape))} values, got {vals.size}")
            return vals.reshape(shape)

        return PromptedClassifier(
            backbone_kind=kind,
            W_in=mat("W_in", (f, d)),
            W_prompt=mat("W_prompt", (f, p)),
            W_hidden=mat("W_hidden", (f, f)) if kind == TANH else None,
            prototypes=mat("prototypes", (k, f)),
            prompt=mat("prompt", (p,)),
            tau_logit=tau,
        )
    except KeyError as e:
        raise ValueError(f"model file missing key {e.args[0]}") from None


def save_model(model: PromptedClassifier, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> PromptedClassifier:
    with open(path) as fh:
        return loads_model(fh.read())
