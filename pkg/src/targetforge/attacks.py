"""Untargeted adversarial attacks behind one interface.

Every attack takes an eval-mode model, a batch of images in [0, 1] with
ground-truth labels, and a config; it returns an ``AdvBatch`` whose samples
are clipped to [0, 1]. Attacks never mutate the model or the input batch,
and are bit-reproducible for a fixed seed (randomized attacks derive
per-sample streams from the sample's source index, so chunked and serial
runs agree).

Against a classifier with designated target classes (2k or 3k outputs) the
attacks see the raw softmax over all outputs and use the ground-truth label
as the class to escape from; that raw view is exactly what the duplicated
training data shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import container
from .engine import cross_entropy_dlogits
from .model import Model

ADV_MAGIC = b"TGFADVS1"


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------


def _positive(name, value):
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class FGSM:
    epsilon: float  # 0 allowed: degenerate null attack used in equivalence tests


@dataclass(frozen=True)
class BIM:
    epsilon: float
    alpha: float
    steps: int

    def __post_init__(self):
        _positive("alpha", self.alpha)
        _positive("steps", self.steps)


@dataclass(frozen=True)
class PGD:
    epsilon: float
    alpha: float
    steps: int
    random_start: bool = True

    def __post_init__(self):
        _positive("alpha", self.alpha)
        _positive("steps", self.steps)


@dataclass(frozen=True)
class CW:
    norm: str = "l2"  # "l2" | "linf"
    kappa: float = 0.0
    max_iterations: int = 1000
    binary_search_steps: int = 9
    initial_const: float = 1e-3
    learning_rate: float = 1e-2

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"CW norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        _positive("max_iterations", self.max_iterations)
        _positive("binary_search_steps", self.binary_search_steps)


@dataclass(frozen=True)
class DeepFool:
    max_iterations: int = 50
    overshoot: float = 0.02

    def __post_init__(self):
        _positive("max_iterations", self.max_iterations)


@dataclass(frozen=True)
class ZOO:
    max_iterations: int = 1000
    initial_const: float = 0.01
    coord_batch: int = 128
    learning_rate: float = 1e-2

    def __post_init__(self):
        _positive("max_iterations", self.max_iterations)
        _positive("coord_batch", self.coord_batch)


@dataclass(frozen=True)
class UAP:
    xi: float = 0.3
    norm: str = "linf"  # "linf" | "l2"
    max_outer_iterations: int = 10
    per_sample_max_iter: int = 10

    def __post_init__(self):
        _positive("xi", self.xi)
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"UAP norm must be 'linf' or 'l2', got {self.norm!r}")
        _positive("max_outer_iterations", self.max_outer_iterations)


AttackConfig = FGSM | BIM | PGD | CW | DeepFool | ZOO | UAP

_CFG_TAGS: dict[type, str] = {
    FGSM: "fgsm", BIM: "bim", PGD: "pgd", CW: "cw",
    DeepFool: "deepfool", ZOO: "zoo", UAP: "uap",
}
_TAG_CFGS = {v: k for k, v in _CFG_TAGS.items()}


def config_to_dict(cfg: AttackConfig) -> dict:
    d = {"kind": _CFG_TAGS[type(cfg)]}
    d.update({f.name: getattr(cfg, f.name) for f in cfg.__dataclass_fields__.values()})
    return d


def config_from_dict(d: dict) -> AttackConfig:
    d = dict(d)
    tag = d.pop("kind", None)
    if tag not in _TAG_CFGS:
        raise ValueError(f"unknown attack kind {tag!r}")
    return _TAG_CFGS[tag](**d)


def config_digest(cfg: AttackConfig) -> str:
    import hashlib

    blob = container.canonical_json(config_to_dict(cfg)).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def config_label(cfg: AttackConfig) -> str:
    """Short human-readable tag, e.g. 'cw-l2(k=0,iter=1000)'."""
    if isinstance(cfg, FGSM):
        return f"fgsm(eps={cfg.epsilon:g})"
    if isinstance(cfg, BIM):
        return f"bim(eps={cfg.epsilon:g},alpha={cfg.alpha:g},steps={cfg.steps})"
    if isinstance(cfg, PGD):
        return f"pgd(eps={cfg.epsilon:g},alpha={cfg.alpha:g},steps={cfg.steps})"
    if isinstance(cfg, CW):
        return f"cw-{cfg.norm}(k={cfg.kappa:g},iter={cfg.max_iterations})"
    if isinstance(cfg, DeepFool):
        return "deepfool"
    if isinstance(cfg, ZOO):
        return f"zoo(iter={cfg.max_iterations})"
    if isinstance(cfg, UAP):
        return f"uap(xi={cfg.xi:g})"
    raise TypeError(type(cfg))


def reduce_iterations(cfg: AttackConfig, cap: int) -> AttackConfig:
    """Cap iteration counts for attack generation inside training loops."""
    if isinstance(cfg, CW) and cfg.max_iterations > cap:
        return replace(cfg, max_iterations=cap)
    if isinstance(cfg, ZOO) and cfg.max_iterations > cap:
        return replace(cfg, max_iterations=cap)
    return cfg


# ---------------------------------------------------------------------------
# Result container
# ---------------------------------------------------------------------------


@dataclass
class AdvBatch:
    """Adversarial samples plus per-sample bookkeeping.

    ``success`` marks samples whose raw argmax over all model outputs no
    longer equals the ground-truth label index (the view the attack itself
    optimizes); the defended block-sum decision rule is applied separately
    at evaluation time.
    """

    adversarial: np.ndarray
    source_indices: np.ndarray
    l2: np.ndarray
    linf: np.ndarray
    success: np.ndarray

    def __post_init__(self):
        lo, hi = float(self.adversarial.min(initial=0.0)), float(self.adversarial.max(initial=1.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"adversarial values outside [0,1]: [{lo}, {hi}]")


def _finish(model: Model, x0, x_adv, labels, source_indices) -> AdvBatch:
    x_adv = np.clip(x_adv, 0.0, 1.0).astype(np.float32)
    delta = (x_adv - x0).reshape(len(x0), -1)
    preds = model.predict_probs(x_adv).argmax(axis=1)
    return AdvBatch(
        adversarial=x_adv,
        source_indices=np.asarray(source_indices, dtype=np.int64),
        l2=np.sqrt((delta.astype(np.float64) ** 2).sum(axis=1)).astype(np.float32),
        linf=np.abs(delta).max(axis=1, initial=0.0).astype(np.float32),
        success=preds != np.asarray(labels),
    )


def _default_indices(x, source_indices):
    if source_indices is None:
        return np.arange(len(x), dtype=np.int64)
    return np.asarray(source_indices, dtype=np.int64)


def _loss_input_grad(model: Model, x, labels) -> np.ndarray:
    """Gradient of mean cross-entropy wrt the input, eval mode."""
    record = model.forward(x, "eval")
    dlogits = cross_entropy_dlogits(record.logits, labels)
    _, dx = model.network.backward(record, dlogits, with_param_grads=False)
    return dx


# ---------------------------------------------------------------------------
# Budget attacks: FGSM / BIM / PGD
# ---------------------------------------------------------------------------


def fgsm(model: Model, x, labels, cfg: FGSM, source_indices=None) -> AdvBatch:
    """Single signed-gradient step of size epsilon, clipped to [0, 1]."""
    grad = _loss_input_grad(model, x, labels)
    x_adv = np.clip(x + np.float32(cfg.epsilon) * np.sign(grad), 0.0, 1.0)
    return _finish(model, x, x_adv, labels, _default_indices(x, source_indices))


def _iterated_sign_steps(model, x0, start, labels, epsilon, alpha, steps, on_iterate=None):
    eps = np.float32(epsilon)
    alpha = np.float32(alpha)
    x_adv = start.astype(np.float32)
    for _ in range(steps):
        grad = _loss_input_grad(model, x_adv, labels)
        x_adv = x_adv + alpha * np.sign(grad)
        x_adv = np.minimum(np.maximum(x_adv, x0 - eps), x0 + eps)
        x_adv = np.clip(x_adv, 0.0, 1.0)
        if on_iterate is not None:
            on_iterate(x_adv)
    return x_adv


def bim(model: Model, x, labels, cfg: BIM, source_indices=None) -> AdvBatch:
    """FGSM applied iteratively with step alpha, re-projected each step."""
    x_adv = _iterated_sign_steps(model, x, x, labels, cfg.epsilon, cfg.alpha, cfg.steps)
    return _finish(model, x, x_adv, labels, _default_indices(x, source_indices))


def pgd(model: Model, x, labels, cfg: PGD, seed: int = 0, source_indices=None,
        on_iterate=None) -> AdvBatch:
    """Projected gradient descent in the L-inf ball, optional random start."""
    idx = _default_indices(x, source_indices)
    start = x.astype(np.float32)
    if cfg.random_start and cfg.epsilon > 0:
        noise = np.empty_like(start)
        for row, src in enumerate(idx):
            rng = np.random.default_rng([seed, int(src)])
            noise[row] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape[1:]).astype(np.float32)
        start = np.clip(start + noise, 0.0, 1.0)
    x_adv = _iterated_sign_steps(model, x, start, labels, cfg.epsilon, cfg.alpha,
                                 cfg.steps, on_iterate)
    return _finish(model, x, x_adv, labels, idx)


# ---------------------------------------------------------------------------
# Carlini-Wagner
# ---------------------------------------------------------------------------

_TANH_CLIP = 0.999999


def _to_tanh_space(x):
    return np.arctanh((2.0 * x.astype(np.float64) - 1.0) * _TANH_CLIP)


def _from_tanh_space(w):
    return ((np.tanh(w) + 1.0) / 2.0).astype(np.float32)


def _cw_margin_terms(logits, labels):
    """Returns (z_true, z_best_other, best_other_index) per sample."""
    n = len(labels)
    z_true = logits[np.arange(n), labels]
    masked = logits.copy()
    masked[np.arange(n), labels] = -np.inf
    other_idx = masked.argmax(axis=1)
    return z_true, masked[np.arange(n), other_idx], other_idx


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape, dtype=np.float64)
        self.v = np.zeros(shape, dtype=np.float64)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


def cw(model: Model, x, labels, cfg: CW, source_indices=None) -> AdvBatch:
    if cfg.norm == "l2":
        return _cw_l2(model, x, labels, cfg, source_indices)
    return _cw_linf(model, x, labels, cfg, source_indices)


def _cw_l2(model: Model, x, labels, cfg: CW, source_indices=None) -> AdvBatch:
    """L2 variant: tanh box change of variable, per-sample binary search on c.

    Minimizes ||x'-x||^2 + c * max(Z_true - max_other Z + kappa, 0); keeps the
    smallest-norm candidate whose logit margin reaches kappa, otherwise returns
    the original sample.
    """
    n = len(x)
    labels = np.asarray(labels)
    x0 = x.astype(np.float32)
    flat0 = x0.reshape(n, -1).astype(np.float64)
    w0 = _to_tanh_space(x0)

    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    const = np.full(n, cfg.initial_const)

    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    ever_found = np.zeros(n, dtype=bool)

    for _ in range(cfg.binary_search_steps):
        w = w0.copy()
        opt = _Adam(w.shape, cfg.learning_rate)
        found_this = np.zeros(n, dtype=bool)
        for _ in range(cfg.max_iterations):
            x_adv = _from_tanh_space(w)
            record = model.forward(x_adv, "eval")
            z_true, z_other, other_idx = _cw_margin_terms(record.logits, labels)
            g = z_true - z_other + cfg.kappa
            delta = x_adv.reshape(n, -1).astype(np.float64) - flat0
            l2sq = (delta ** 2).sum(axis=1)

            hit = g <= 0
            improved = hit & (l2sq < best_l2)
            if improved.any():
                best_l2[improved] = l2sq[improved]
                best_adv[improved] = x_adv[improved]
                ever_found |= improved
            found_this |= hit

            dlogits = np.zeros_like(record.logits)
            active = g > 0
            rows = np.arange(n)[active]
            dlogits[rows, labels[active]] = const[active]
            dlogits[rows, other_idx[active]] = -const[active]
            _, dx = model.network.backward(record, dlogits, with_param_grads=False)
            dx = dx.astype(np.float64) + (2.0 * delta).reshape(x0.shape)
            dw = dx * (1.0 - np.tanh(w) ** 2) / 2.0
            w = opt.step(w, dw)

        # binary search update on c
        upper = np.where(found_this, np.minimum(upper, const), upper)
        lower = np.where(found_this, lower, np.maximum(lower, const))
        const = np.where(
            upper < 1e9, (lower + upper) / 2.0, np.where(found_this, const, const * 10.0)
        )

    adv = np.where(ever_found[:, None, None, None], best_adv, x0)
    return _finish(model, x0, adv, labels, _default_indices(x, source_indices))


def _cw_linf(model: Model, x, labels, cfg: CW, source_indices=None) -> AdvBatch:
    """L-inf variant: penalize coordinates above a shrinking threshold tau."""
    n = len(x)
    labels = np.asarray(labels)
    x0 = x.astype(np.float32)
    flat0 = x0.reshape(n, -1).astype(np.float64)

    w = _to_tanh_space(x0)
    tau = np.ones(n)
    const = np.full(n, max(cfg.initial_const, 1e-2))
    best_adv = x0.copy()
    best_linf = np.full(n, np.inf)
    ever_found = np.zeros(n, dtype=bool)

    rounds = 10
    inner = max(1, cfg.max_iterations // rounds)
    for _ in range(rounds):
        opt = _Adam(w.shape, cfg.learning_rate)
        found_this = np.zeros(n, dtype=bool)
        for _ in range(inner):
            x_adv = _from_tanh_space(w)
            record = model.forward(x_adv, "eval")
            z_true, z_other, other_idx = _cw_margin_terms(record.logits, labels)
            g = z_true - z_other + cfg.kappa
            delta = x_adv.reshape(n, -1).astype(np.float64) - flat0
            linf = np.abs(delta).max(axis=1)

            hit = g <= 0
            improved = hit & (linf < best_linf)
            if improved.any():
                best_linf[improved] = linf[improved]
                best_adv[improved] = x_adv[improved]
                ever_found |= improved
            found_this |= hit

            dlogits = np.zeros_like(record.logits)
            active = g > 0
            rows = np.arange(n)[active]
            dlogits[rows, labels[active]] = const[active]
            dlogits[rows, other_idx[active]] = -const[active]
            _, dx = model.network.backward(record, dlogits, with_param_grads=False)
            over = np.abs(delta) > tau[:, None]
            dpen = (np.sign(delta) * over).reshape(x0.shape)
            dx = dx.astype(np.float64) + dpen
            dw = dx * (1.0 - np.tanh(w) ** 2) / 2.0
            w = opt.step(w, dw)

        shrink = found_this & (best_linf < np.inf)
        tau = np.where(shrink, 0.9 * np.minimum(tau, best_linf), tau)
        const = np.where(found_this, const, np.minimum(const * 2.0, 1e6))

    adv = np.where(ever_found[:, None, None, None], best_adv, x0)
    return _finish(model, x0, adv, labels, _default_indices(x, source_indices))


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------


def _logit_grad(model: Model, record, class_indices) -> np.ndarray:
    """Per-sample input gradient of logit[class_indices[i]]."""
    dlogits = np.zeros_like(record.logits)
    dlogits[np.arange(len(class_indices)), class_indices] = 1.0
    _, dx = model.network.backward(record, dlogits, with_param_grads=False)
    return dx


def deepfool(model: Model, x, labels, cfg: DeepFool, source_indices=None) -> AdvBatch:
    """Iterative minimal step to the nearest linearized class boundary.

    Samples already misclassified under the raw argmax are returned unchanged.
    The accumulated perturbation is scaled by (1 + overshoot) and the result
    clipped to [0, 1].
    """
    n = len(x)
    labels = np.asarray(labels)
    x0 = x.astype(np.float32)
    num_out = model.spec.num_outputs

    preds0 = model.predict_probs(x0).argmax(axis=1)
    r_tot = np.zeros(x0.shape, dtype=np.float64)
    touched = preds0 == labels  # only these enter the loop
    active = touched.copy()

    for _ in range(cfg.max_iterations):
        if not active.any():
            break
        idx = np.where(active)[0]
        m = len(idx)
        # evaluate and linearize at the feasible (clipped) point
        xa = np.clip(x0[idx] + ((1.0 + cfg.overshoot) * r_tot[idx]), 0.0, 1.0).astype(np.float32)
        record = model.forward(xa, "eval")
        logits = record.logits
        fooled = logits.argmax(axis=1) != labels[idx]
        active[idx[fooled]] = False
        if fooled.all():
            continue

        y = labels[idx]
        grad_true = _logit_grad(model, record, y)
        best_pert = np.full(m, np.inf)
        best_w = np.zeros(grad_true.shape, dtype=np.float64)
        best_f = np.zeros(m)
        for j in range(num_out):
            rows = np.where(y != j)[0]
            if len(rows) == 0:
                continue
            grad_j = _logit_grad(model, record, np.full(m, j))
            w_j = (grad_j - grad_true).astype(np.float64)
            f_j = (logits[:, j] - logits[np.arange(m), y]).astype(np.float64)
            w_norm = np.sqrt((w_j.reshape(m, -1) ** 2).sum(axis=1)) + 1e-12
            pert_j = np.abs(f_j) / w_norm
            upd = rows[pert_j[rows] < best_pert[rows]]
            if len(upd):
                best_pert[upd] = pert_j[upd]
                best_w[upd] = w_j[upd]
                best_f[upd] = f_j[upd]

        # step only samples that are still on the correct side
        step_rows = np.where(~fooled)[0]
        w_norm_sq = (best_w.reshape(m, -1) ** 2).sum(axis=1) + 1e-24
        step = ((np.abs(best_f) + 1e-4) / w_norm_sq)[:, None, None, None] * best_w
        r_tot[idx[step_rows]] += step[step_rows]

    x_adv = np.clip(x0 + ((1.0 + cfg.overshoot) * r_tot), 0.0, 1.0).astype(np.float32)
    x_adv[~touched] = x0[~touched]  # 0 iterations for already-misclassified inputs
    return _finish(model, x0, x_adv, labels, _default_indices(x, source_indices))


# ---------------------------------------------------------------------------
# ZOO (black-box, coordinate-wise zeroth-order)
# ---------------------------------------------------------------------------

ZOO_FD_STEP = 1e-4


def zoo_estimate_gradient(objective: Callable[[np.ndarray], np.ndarray], x_flat,
                          coords, h: float = ZOO_FD_STEP) -> np.ndarray:
    """Symmetric-difference gradient estimate along chosen coordinates.

    ``objective`` maps an (M, D) matrix of candidates to (M,) values and is
    called with exactly 2 * len(coords) rows.
    """
    d = len(x_flat)
    probes = np.repeat(x_flat[None, :], 2 * len(coords), axis=0)
    rows = np.arange(len(coords))
    probes[2 * rows, coords] += h
    probes[2 * rows + 1, coords] -= h
    vals = objective(probes)
    return (vals[2 * rows] - vals[2 * rows + 1]) / (2.0 * h)


def _zoo_objective_factory(model: Model, x0_flat, labels, const, kappa, img_shape):
    """Black-box objective over flattened candidates for one sample batch."""

    def objective(cands: np.ndarray, sample_row: int) -> np.ndarray:
        probs = model.predict_probs(
            cands.reshape((-1,) + img_shape).astype(np.float32)
        )
        logp = np.log(np.clip(probs, 1e-30, 1.0))
        y = labels[sample_row]
        z_true = logp[:, y]
        masked = logp.copy()
        masked[:, y] = -np.inf
        z_other = masked.max(axis=1)
        g = np.maximum(z_true - z_other + kappa, 0.0)
        dist = ((cands - x0_flat[sample_row]) ** 2).sum(axis=1)
        return dist + const[sample_row] * g

    return objective


def zoo(model: Model, x, labels, cfg: ZOO, seed: int = 0, source_indices=None) -> AdvBatch:
    """Gradient-free CW-style attack using only class probabilities.

    Each iteration picks a random coordinate batch per sample, estimates the
    gradient by symmetric differences (2 model calls per coordinate), and
    applies per-coordinate Adam updates to the perturbation.
    """
    n = len(x)
    labels = np.asarray(labels)
    x0 = x.astype(np.float32)
    img_shape = x0.shape[1:]
    d = int(np.prod(img_shape))
    flat0 = x0.reshape(n, -1).astype(np.float64)
    kappa = 0.0
    const = np.full(n, cfg.initial_const)
    idx = _default_indices(x, source_indices)

    delta = np.zeros((n, d))
    mt = np.zeros((n, d))
    vt = np.zeros((n, d))
    tc = np.zeros((n, d))
    beta1, beta2 = 0.9, 0.999

    best_adv = x0.copy()
    best_l2 = np.full(n, np.inf)
    ever_found = np.zeros(n, dtype=bool)
    objective = _zoo_objective_factory(model, flat0, labels, const, kappa, img_shape)
    rngs = [np.random.default_rng([seed, int(s)]) for s in idx]
    nb = min(cfg.coord_batch, d)

    for _ in range(cfg.max_iterations):
        for i in range(n):
            coords = rngs[i].choice(d, size=nb, replace=False)
            cand = flat0[i] + delta[i]
            grad = zoo_estimate_gradient(lambda c: objective(c, i), cand, coords)
            mt[i, coords] = beta1 * mt[i, coords] + (1 - beta1) * grad
            vt[i, coords] = beta2 * vt[i, coords] + (1 - beta2) * grad * grad
            tc[i, coords] += 1
            t = tc[i, coords]
            corr = np.sqrt(1 - beta2 ** t) / (1 - beta1 ** t)
            delta[i, coords] -= cfg.learning_rate * corr * mt[i, coords] / (
                np.sqrt(vt[i, coords]) + 1e-8
            )
            np.clip(delta[i], -flat0[i], 1.0 - flat0[i], out=delta[i])

        # candidate tracking (not part of the estimator's call budget)
        cand_imgs = (flat0 + delta).reshape((-1,) + img_shape).astype(np.float32)
        probs = model.predict_probs(cand_imgs)
        preds = probs.argmax(axis=1)
        hit = preds != labels
        l2sq = (delta ** 2).sum(axis=1)
        improved = hit & (l2sq < best_l2)
        if improved.any():
            best_l2[improved] = l2sq[improved]
            best_adv[improved] = cand_imgs[improved]
            ever_found |= improved

    adv = np.where(ever_found[:, None, None, None], best_adv, x0)
    return _finish(model, x0, adv, labels, idx)


# ---------------------------------------------------------------------------
# Universal adversarial perturbation
# ---------------------------------------------------------------------------


def _project_norm_ball(v: np.ndarray, xi: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(v, -xi, xi)
    nrm = float(np.sqrt((v.astype(np.float64) ** 2).sum()))
    if nrm > xi and nrm > 0:
        return (v * (xi / nrm)).astype(v.dtype)
    return v


def uap(model: Model, train_images, train_labels, test_x, test_labels, cfg: UAP,
        seed: int = 0, source_indices=None, deepfool_cfg: DeepFool | None = None):
    """Builds one universal perturbation from training samples, applies it to a test set.

    Per outer pass, every training sample still classified correctly under
    the current perturbation contributes a minimal DeepFool step; the
    aggregate is re-projected onto the xi-ball after each contribution.
    Returns (perturbation, AdvBatch over the test set).
    """
    df_cfg = deepfool_cfg or DeepFool(max_iterations=cfg.per_sample_max_iter)
    v = np.zeros(train_images.shape[1:], dtype=np.float32)
    order = np.random.default_rng([seed]).permutation(len(train_images))

    for _ in range(cfg.max_outer_iterations):
        for i in order:
            xi_img = train_images[i : i + 1]
            perturbed = np.clip(xi_img + v, 0.0, 1.0)
            pred = model.predict_probs(perturbed).argmax(axis=1)[0]
            if pred != train_labels[i]:
                continue
            adv = deepfool(model, perturbed, train_labels[i : i + 1], df_cfg)
            if not adv.success[0]:
                continue
            v = v + (adv.adversarial[0] - perturbed[0])
            v = _project_norm_ball(v, cfg.xi, cfg.norm)

    x_adv = np.clip(test_x + v, 0.0, 1.0)
    batch = _finish(model, test_x.astype(np.float32), x_adv, test_labels,
                    _default_indices(test_x, source_indices))
    return v, batch


# ---------------------------------------------------------------------------
# Dispatch and persistence
# ---------------------------------------------------------------------------


def run_attack(model: Model, x, labels, cfg: AttackConfig, seed: int = 0,
               source_indices=None, train_data=None) -> AdvBatch:
    """Run any configured attack; UAP additionally needs (images, labels) train data."""
    if isinstance(cfg, FGSM):
        return fgsm(model, x, labels, cfg, source_indices)
    if isinstance(cfg, BIM):
        return bim(model, x, labels, cfg, source_indices)
    if isinstance(cfg, PGD):
        return pgd(model, x, labels, cfg, seed, source_indices)
    if isinstance(cfg, CW):
        return cw(model, x, labels, cfg, source_indices)
    if isinstance(cfg, DeepFool):
        return deepfool(model, x, labels, cfg, source_indices)
    if isinstance(cfg, ZOO):
        return zoo(model, x, labels, cfg, seed, source_indices)
    if isinstance(cfg, UAP):
        if train_data is None:
            raise ValueError("UAP needs train_data=(images, labels)")
        _, batch = uap(model, train_data[0], train_data[1], x, labels, cfg, seed,
                       source_indices)
        return batch
    raise TypeError(f"unknown attack config {type(cfg)}")


def save_adv_batch(path, batch: AdvBatch, labels, cfg: AttackConfig | None = None) -> None:
    meta = {
        "labels": np.asarray(labels).astype(int).tolist(),
        "source_indices": batch.source_indices.tolist(),
        "success": batch.success.astype(bool).tolist(),
        "attack": config_to_dict(cfg) if cfg is not None else None,
    }
    tensors = [
        ("adversarial", batch.adversarial),
        ("l2", batch.l2),
        ("linf", batch.linf),
    ]
    container.write_container(path, ADV_MAGIC, meta, tensors)


def load_adv_batch(path):
    """Returns (AdvBatch, labels, attack config dict or None)."""
    meta, arrays = container.read_container(path, ADV_MAGIC)
    batch = AdvBatch(
        adversarial=arrays["adversarial"],
        source_indices=np.asarray(meta["source_indices"], dtype=np.int64),
        l2=arrays["l2"],
        linf=arrays["linf"],
        success=np.asarray(meta["success"], dtype=bool),
    )
    labels = np.asarray(meta["labels"], dtype=np.int64)
    return batch, labels, meta.get("attack")
