"""Bucket predictors: training, fixed-point quantization, encrypted evaluation.

A predictor is ``W2 . relu(W1 x + b1) + b2`` over rank coordinates.  Hidden
unit ``h`` carries a sign ``s_h`` and training keeps ``s_h * W1[h, :] >= 0``
and ``s_h * W2[h] >= 0``, so every predictor is non-decreasing in each
coordinate.  Monotone routing is what lets the two query corners bound the
bucket range of every point between them.

Fixed point: ``W1, b1, W2`` at scale ``S`` and ``b2`` at ``S^2``; the raw
output is at ``S^2`` and labels are recovered by rounding at a decryption.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .paillier import Ciphertext, Encrypter, hom_add, scalar_mul
from .primitives import DspContext, Permutation, sm_batch, srelu_batch
from .transport import MsgType

log = logging.getLogger(__name__)

DEFAULT_SCALE = 1 << 16
MAX_SCALE = 1 << 30
RELU_BLIND_LO = 1 << 20
RELU_BLIND_HI = 1 << 40


@dataclass
class TrainConfig:
    hidden: int = 32
    lr: float = 0.01
    epochs: int = 2000
    err_target: int = 1
    check_every: int = 25
    seed: int = 0


@dataclass
class FloatMlp:
    """Float model acting directly on rank coordinates."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float

    def forward(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.maximum(X @ self.W1.T + self.b1, 0.0) @ self.W2 + self.b2


def _clamp(v, lo, hi):
    return np.minimum(np.maximum(v, lo), hi)


def _signs(hidden: int) -> np.ndarray:
    return np.where(np.arange(hidden) % 2 == 0, 1.0, -1.0)


def _project(W1, W2, s):
    W1[:] = s[:, None] * np.maximum(s[:, None] * W1, 0.0)
    W2[:] = s * np.maximum(s * W2, 0.0)


def train_predictor(X, y, cfg: TrainConfig | None = None, lo: int | None = None,
                    hi: int | None = None) -> tuple[FloatMlp, int]:
    """Fit a monotone MLP to integer labels by projected Adam on the L2 loss.

    Stops once the rounded, clamped predictions are within ``cfg.err_target``
    of every label or after ``cfg.epochs``; returns the best model seen and
    its achieved maximum label error.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("need matching, non-empty points and labels")
    lo = int(y.min()) if lo is None else lo
    hi = int(y.max()) if hi is None else hi
    n, d = X.shape
    in_scale = max(float(X.max()), 1.0)
    span = float(max(hi - lo, 1))
    xn = X / in_scale
    yn = (y - lo) / span
    H = cfg.hidden
    s = _signs(H)
    rng = np.random.default_rng(cfg.seed)

    mag = np.abs(rng.normal(1.0, 0.5, size=(H, d))) + 0.1
    W1 = s[:, None] * mag * 3.0
    centers = xn[rng.integers(0, n, size=H)]
    b1 = -np.sum(W1 * centers, axis=1)
    W2 = s * rng.uniform(0.0, 1.0 / H, size=H)
    b2 = float(yn.mean())
    params = [W1, b1, W2, np.array([b2])]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def unfold(W1, b1, W2, b2) -> FloatMlp:
        return FloatMlp(W1 / in_scale, b1.copy(), W2 * span, float(b2[0]) * span + lo)

    def label_err(model: FloatMlp) -> int:
        pred = _clamp(np.floor(model.forward(X) + 0.5), lo, hi)
        return int(np.max(np.abs(pred - y)))

    best = unfold(*params)
    best_err = label_err(best)
    for epoch in range(1, cfg.epochs + 1):
        if best_err <= cfg.err_target:
            break
        W1, b1, W2, b2 = params
        z = xn @ W1.T + b1
        a = np.maximum(z, 0.0)
        r = a @ W2 + b2[0] - yn
        g_out = 2.0 * r / n
        g_W2 = a.T @ g_out
        g_b2 = np.array([g_out.sum()])
        g_z = np.outer(g_out, W2) * (z > 0)
        g_W1 = g_z.T @ xn
        g_b1 = g_z.sum(axis=0)
        grads = [g_W1, g_b1, g_W2, g_b2]
        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            mh = m[i] / (1 - beta1 ** epoch)
            vh = v[i] / (1 - beta2 ** epoch)
            p -= cfg.lr * mh / (np.sqrt(vh) + eps)
        _project(params[0], params[2], s)
        if epoch % cfg.check_every == 0 or epoch == cfg.epochs:
            cand = unfold(*params)
            err = label_err(cand)
            if err < best_err:
                best, best_err = cand, err
    return best, best_err


# -- fixed point --------------------------------------------------------------

@dataclass
class QuantMlp:
    W1: list[list[int]]
    b1: list[int]
    W2: list[int]
    b2: int
    scale: int

    @property
    def hidden(self) -> int:
        return len(self.b1)

    @property
    def dim(self) -> int:
        return len(self.W1[0]) if self.W1 else 0

    def hidden_raw(self, x: Sequence[int]) -> list[int]:
        return [sum(w * int(xi) for w, xi in zip(row, x)) + b for row, b in zip(self.W1, self.b1)]

    def forward(self, x: Sequence[int]) -> int:
        """Exact output at scale ``S^2``."""
        return sum(w * max(0, h) for w, h in zip(self.W2, self.hidden_raw(x))) + self.b2

    def label(self, x: Sequence[int], lo: int, hi: int) -> int:
        s2 = self.scale * self.scale
        return min(max((self.forward(x) + s2 // 2) // s2, lo), hi)

    def shifted(self, delta_labels: int) -> "QuantMlp":
        s2 = self.scale * self.scale
        return QuantMlp([r[:] for r in self.W1], self.b1[:], self.W2[:],
                        self.b2 + delta_labels * s2, self.scale)

    def to_json(self) -> dict:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2, "scale": self.scale}

    @classmethod
    def from_json(cls, obj: dict) -> "QuantMlp":
        return cls([list(map(int, r)) for r in obj["W1"]], list(map(int, obj["b1"])),
                   list(map(int, obj["W2"])), int(obj["b2"]), int(obj["scale"]))


def quantize(model: FloatMlp, scale: int = DEFAULT_SCALE) -> QuantMlp:
    if scale < 1:
        raise ValueError("scale must be positive")
    limit = float(1 << 31)
    for arr in (model.W1, model.b1, model.W2):
        if arr.size and float(np.max(np.abs(arr))) * scale >= limit:
            raise OverflowError("parameter magnitude exceeds the fixed-point budget")
    W1 = [[int(round(float(w) * scale)) for w in row] for row in model.W1]
    b1 = [int(round(float(b) * scale)) for b in model.b1]
    W2 = [int(round(float(w) * scale)) for w in model.W2]
    b2 = int(round(model.b2 * scale * scale))
    return QuantMlp(W1, b1, W2, b2, scale)


def max_label_gap(model: FloatMlp, q: QuantMlp, X) -> int:
    X = np.asarray(X)
    fl = np.floor(model.forward(X) + 0.5).astype(np.int64)
    s2 = q.scale * q.scale
    return max((abs((q.forward(x) + s2 // 2) // s2 - int(f)) for x, f in zip(X.tolist(), fl)),
               default=0)


def required_scale(model: FloatMlp, X, start: int = DEFAULT_SCALE) -> int:
    """Smallest ``start * 2^i`` whose quantized labels stay within 1 of the float ones."""
    scale = start
    while True:
        try:
            q = quantize(model, scale)
        except OverflowError:
            return max(start, scale // 2)
        if max_label_gap(model, q, X) <= 1 or scale >= MAX_SCALE:
            return scale
        scale *= 2


def label_error(q: QuantMlp, X, y, lo: int, hi: int) -> int:
    return max((abs(q.label(x, lo, hi) - int(t)) for x, t in zip(np.asarray(X).tolist(), y)),
               default=0)


def add_weight_noise(q: QuantMlp, delta: float, in_scale: float, rng: np.random.Generator) -> QuantMlp:
    """Perturb ``W1`` by ``U[-delta, delta]`` on normalized inputs, keeping signs."""
    s = _signs(q.hidden)
    W1 = []
    for h, row in enumerate(q.W1):
        new = []
        for w in row:
            nw = w + int(round(rng.uniform(-delta, delta) / in_scale))
            new.append(nw if nw * s[h] >= 0 else 0)
        W1.append(new)
    return QuantMlp(W1, q.b1[:], q.W2[:], q.b2, q.scale)


def noised_router(q: QuantMlp, X, eta: int, in_scale: float, rng: np.random.Generator,
                  delta_frac: float = 1 / 16, tries: int = 8) -> tuple[QuantMlp, float]:
    """Noise ``W1`` while keeping every training point's route unchanged.

    ``delta`` starts at ``delta_frac * S`` and is halved on violation; after
    ``tries`` halvings the noiseless model is returned with ``delta = 0``.
    """
    X = np.asarray(X).tolist()
    base = [q.label(x, 1, eta) for x in X]
    delta = delta_frac * q.scale
    for _ in range(tries + 1):
        if delta <= 0:
            break
        cand = add_weight_noise(q, delta, in_scale, rng)
        if all(cand.label(x, 1, eta) == t for x, t in zip(X, base)):
            return cand, delta
        delta /= 2
    log.warning("routing noise could not be kept within bound; emitting noiseless weights")
    return q, 0.0


# -- secure predictors --------------------------------------------------------

@dataclass
class SecurePredictor:
    """DSP-side predictor.

    ``smlp_p``: ``W1``, ``W2``, ``b2`` plaintext integers, ``b1`` encrypted.
    ``smlp_c``: every parameter encrypted, plus ``E(err_max)`` and the
    bucket slice bounds ``E(lo * S^2)``, ``E(hi * S^2)`` used to clamp.
    """

    mode: str
    level: str
    scale: int
    W1: list
    b1: list
    W2: list
    b2: object
    eta: int = 0
    err: Ciphertext | None = None
    lo: Ciphertext | None = None
    hi: Ciphertext | None = None

    @property
    def hidden(self) -> int:
        return len(self.b1)

    @property
    def dim(self) -> int:
        return len(self.W1[0]) if self.W1 else 0

    def flat_params(self) -> list[Ciphertext]:
        """Encrypted parameters in a fixed order (leaf predictors only)."""
        if self.mode != "smlp_c":
            raise ValueError("only fully encrypted predictors expose ciphertext parameters")
        out = [c for row in self.W1 for c in row]
        out += list(self.b1) + list(self.W2) + [self.b2, self.err, self.lo, self.hi]
        return out

    @classmethod
    def from_flat(cls, flat: list[Ciphertext], hidden: int, dim: int, scale: int,
                  level: str = "leaf") -> "SecurePredictor":
        hd = hidden * dim
        W1 = [flat[h * dim:(h + 1) * dim] for h in range(hidden)]
        b1 = flat[hd:hd + hidden]
        W2 = flat[hd + hidden:hd + 2 * hidden]
        b2, err, lo, hi = flat[hd + 2 * hidden:hd + 2 * hidden + 4]
        return cls("smlp_c", level, scale, W1, b1, W2, b2, err=err, lo=lo, hi=hi)


def make_smlp_p(q: QuantMlp, eta: int, enc: Encrypter, level: str = "intermediate") -> SecurePredictor:
    return SecurePredictor("smlp_p", level, q.scale, [r[:] for r in q.W1],
                           [enc.encrypt(b) for b in q.b1], q.W2[:], q.b2, eta=eta)


def make_smlp_c(q: QuantMlp, err_max: int, lo: int, hi: int, enc: Encrypter) -> SecurePredictor:
    s2 = q.scale * q.scale
    return SecurePredictor(
        "smlp_c", "leaf", q.scale,
        [[enc.encrypt(w) for w in row] for row in q.W1],
        [enc.encrypt(b) for b in q.b1],
        [enc.encrypt(w) for w in q.W2],
        enc.encrypt(q.b2),
        err=enc.encrypt(err_max), lo=enc.encrypt(lo * s2), hi=enc.encrypt(hi * s2))


def eval_smlp_p(dsp: DspContext, pred: SecurePredictor, x: Sequence[Ciphertext]) -> int:
    """Route label in ``[1, eta]``; the DAP applies ReLU to blinded pre-activations."""
    if pred.mode != "smlp_p":
        raise ValueError("eval_smlp_p needs a partially encrypted predictor")
    H = pred.hidden
    psi = []
    for row, eb in zip(pred.W1, pred.b1):
        acc = eb
        for w, xc in zip(row, x):
            if w:
                acc = hom_add(acc, scalar_mul(xc, w))
        psi.append(acc)
    blinds = [RELU_BLIND_LO + dsp.prf.randbelow(RELU_BLIND_HI - RELU_BLIND_LO) for _ in range(H)]
    pi = Permutation.random(H, dsp.prf)
    sent = pi.apply([dsp.enc.rerandomize(scalar_mul(c, r)) for c, r in zip(psi, blinds)])
    w = dsp.session.writer().u32(H).cts(sent)
    rd = dsp.session.request(MsgType.RELU, w)
    acts = pi.invert(rd.sints(H))
    rd.done()
    dsp.stats["relu"] += H
    out = pred.b2
    for wt, a, r in zip(pred.W2, acts, blinds):
        if a % r:
            raise ValueError("DAP activation is not a multiple of its blinding factor")
        out += wt * (a // r)
    s2 = pred.scale * pred.scale
    return min(max((out + s2 // 2) // s2, 1), pred.eta)


def eval_smlp_c(dsp: DspContext, pred: SecurePredictor, x: Sequence[Ciphertext],
                clamp: bool = True) -> Ciphertext:
    """Fully encrypted forward pass; output ``E(v)`` at scale ``S^2``."""
    if pred.mode != "smlp_c":
        raise ValueError("eval_smlp_c needs a fully encrypted predictor")
    H, d = pred.hidden, pred.dim
    if len(x) != d:
        raise ValueError(f"expected {d} coordinates, got {len(x)}")
    prods = sm_batch(dsp, [(pred.W1[h][j], x[j]) for h in range(H) for j in range(d)])
    psi = []
    for h in range(H):
        acc = pred.b1[h]
        for j in range(d):
            acc = hom_add(acc, prods[h * d + j])
        psi.append(acc)
    acts = srelu_batch(dsp, psi)
    outs = sm_batch(dsp, list(zip(pred.W2, acts)))
    v = pred.b2
    for c in outs:
        v = hom_add(v, c)
    if clamp:
        v = encrypted_clamp(dsp, v, pred.lo, pred.hi)
    return v


def encrypted_clamp(dsp: DspContext, v: Ciphertext, lo: Ciphertext, hi: Ciphertext) -> Ciphertext:
    """``lo + relu(v - lo) - relu(v - hi)``, valid whenever ``lo <= hi``."""
    neg_lo = scalar_mul(lo, -1)
    neg_hi = scalar_mul(hi, -1)
    a, b = srelu_batch(dsp, [hom_add(v, neg_lo), hom_add(v, neg_hi)])
    return hom_add(hom_add(lo, a), scalar_mul(b, -1))


@dataclass
class FuzzyLabelTable:
    """Per routing label, an encrypted one-hot row over the permuted leaf list."""

    eta: int
    rows: list[list[Ciphertext]] = field(default_factory=list)


def make_fuzzy_rows(targets: Sequence[int | None], n_leaves: int, enc: Encrypter) -> list[list[Ciphertext]]:
    """``targets[j]`` is the stored leaf position for label ``j+1`` or None."""
    rows = []
    for t in targets:
        rows.append([] if t is None else [enc.encrypt(1 if k == t else 0) for k in range(n_leaves)])
    return rows


def select_leaf_fuzzy(dsp: DspContext, row: Sequence[Ciphertext],
                      leaves: Sequence[SecurePredictor]) -> SecurePredictor:
    """Oblivious selection: every parameter becomes ``sum_k SM(F[k], leaf_k.param)``."""
    if len(row) != len(leaves) or not leaves:
        raise ValueError("fuzzy row length must equal the number of leaves")
    H, d, scale = leaves[0].hidden, leaves[0].dim, leaves[0].scale
    if any(l.hidden != H or l.dim != d for l in leaves):
        raise ValueError("leaf predictors differ in shape")
    flats = [l.flat_params() for l in leaves]
    width = len(flats[0])
    pairs = [(row[k], flats[k][t]) for t in range(width) for k in range(len(leaves))]
    prods = sm_batch(dsp, pairs)
    agg = []
    eta = len(leaves)
    for t in range(width):
        acc = prods[t * eta]
        for k in range(1, eta):
            acc = hom_add(acc, prods[t * eta + k])
        agg.append(acc)
    return SecurePredictor.from_flat(agg, H, d, scale)

