"""Numerical checks of the two guarantees behind test-time training.

Hessian bound check (``theorem1``): cross-entropy over a softmax is convex in the logits, its Hessian
eigenvalues are at most 2 and its gradient norm is at most 2.
Aligned-step check (``theorem2``): for a convex, beta-smooth supervised loss with gradients bounded
by B, one step along the self-supervised gradient with rate
eps / (beta B^2) strictly lowers the supervised loss whenever the two
gradients have inner product above eps.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import log_softmax, softmax

EIG_TOL = 1e-8


def ce_hessian(probs) -> np.ndarray:
    """Hessian of -log softmax(g)[c] in g: diag(p) - p p^T (independent of c)."""
    p = np.asarray(probs, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


def ce_value(logits, true_index: int) -> float:
    return -float(log_softmax(np.asarray(logits, dtype=np.float64))[true_index])


def ce_grad(logits, true_index: int) -> np.ndarray:
    """Closed form: p_i - 1 at the true index, p_i elsewhere."""
    grad = softmax(logits)
    grad[true_index] -= 1.0
    return grad


@dataclass
class CEInstance:
    logits: np.ndarray
    true_index: int

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


@dataclass
class Theorem1Report:
    trials: int = 0
    passes: int = 0
    worst_min_eig: float | None = None
    worst_max_eig: float | None = None
    worst_grad_norm: float | None = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passes == self.trials

    def to_dict(self) -> dict:
        return {"trials": self.trials, "passes": self.passes,
                "worst_min_eig": self.worst_min_eig, "worst_max_eig": self.worst_max_eig,
                "worst_grad_norm": self.worst_grad_norm}


def check_ce_instance(inst: CEInstance) -> tuple[float, float, float]:
    """(min eigenvalue, max eigenvalue, gradient norm) of one instance."""
    eig = np.linalg.eigvalsh(ce_hessian(inst.probs))
    return float(eig[0]), float(eig[-1]), float(np.linalg.norm(ce_grad(inst.logits, inst.true_index)))


def random_ce_instance(rng: np.random.Generator, n_max: int) -> CEInstance:
    n = int(rng.integers(1, n_max + 1))
    scale = float(10.0 ** rng.uniform(-2, 1.5))
    return CEInstance(rng.normal(0.0, scale, n), int(rng.integers(n)))


def verify_theorem1(samples: int, n_max: int, rng: np.random.Generator) -> Theorem1Report:
    report = Theorem1Report()
    for _ in range(samples):
        inst = random_ce_instance(rng, n_max)
        lo, hi, gnorm = check_ce_instance(inst)
        report.trials += 1
        report.worst_min_eig = lo if report.worst_min_eig is None else min(report.worst_min_eig, lo)
        report.worst_max_eig = hi if report.worst_max_eig is None else max(report.worst_max_eig, hi)
        report.worst_grad_norm = gnorm if report.worst_grad_norm is None else max(report.worst_grad_norm, gnorm)
        if lo >= -EIG_TOL and hi <= 2.0 + EIG_TOL and gnorm <= 2.0 + EIG_TOL:
            report.passes += 1
        else:
            report.failures.append({"logits": inst.logits.tolist(), "true_index": inst.true_index,
                                    "min_eig": lo, "max_eig": hi, "grad_norm": gnorm})
    return report


# --- aligned-step descent on a convex surrogate ------------------------------

@dataclass
class Theorem2Instance:
    """Linear softmax classifier W on a fixed input x with ||x|| <= 1.

    The supervised loss is cross-entropy at label ``label``; the
    self-supervised loss is cross-entropy on an augmented view ``x_aug``
    against the model's own prediction there. Both are convex in W with
    beta = 2 and gradient norms at most sqrt(2) <= B = 2.
    """

    W: np.ndarray
    x: np.ndarray
    label: int
    x_aug: np.ndarray
    eps: float = 0.01
    beta: float = 2.0
    B: float = 2.0

    def __post_init__(self):
        self.pseudo_label = int(np.argmax(self.W @ self.x_aug))

    def sup_loss(self, W) -> float:
        return ce_value(W @ self.x, self.label)

    def sup_grad(self, W) -> np.ndarray:
        return np.outer(ce_grad(W @ self.x, self.label), self.x)

    def ssl_grad(self, W) -> np.ndarray:
        return np.outer(ce_grad(W @ self.x_aug, self.pseudo_label), self.x_aug)

    @property
    def step(self) -> float:
        return self.eps / (self.beta * self.B ** 2)


@dataclass
class Theorem2Report:
    trials: int = 0
    condition_met: int = 0
    passes: int = 0
    mean_decrease: float = 0.0
    min_decrease: float | None = None
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passes == self.condition_met

    def to_dict(self) -> dict:
        return {"trials": self.trials, "condition_met": self.condition_met,
                "passes": self.passes, "mean_decrease": self.mean_decrease}


def _unit_ball(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v) * rng.uniform(0.2, 1.0)


def random_theorem2_instance(rng, eps=0.01, beta=2.0, B=2.0) -> Theorem2Instance:
    n_classes = int(rng.integers(2, 11))
    dim = int(rng.integers(2, 9))
    W = rng.normal(0.0, 1.5, (n_classes, dim))
    x = _unit_ball(rng, dim)
    aug = x + rng.normal(0.0, 0.3, dim)
    aug = aug / max(1.0, np.linalg.norm(aug))
    return Theorem2Instance(W, x, int(rng.integers(n_classes)), aug, eps, beta, B)


def theorem2_trial(inst: Theorem2Instance) -> tuple[float, float | None]:
    """(alignment, decrease); decrease is None when the alignment condition fails."""
    g_sup = inst.sup_grad(inst.W)
    g_ssl = inst.ssl_grad(inst.W)
    alignment = float(np.sum(g_sup * g_ssl))
    if alignment <= inst.eps:
        return alignment, None
    after = inst.W - inst.step * g_ssl
    return alignment, inst.sup_loss(inst.W) - inst.sup_loss(after)


def verify_theorem2(trials: int, rng: np.random.Generator, eps: float = 0.01,
                    beta: float = 2.0, B: float = 2.0) -> Theorem2Report:
    report = Theorem2Report()
    decreases = []
    for _ in range(trials):
        inst = random_theorem2_instance(rng, eps, beta, B)
        alignment, decrease = theorem2_trial(inst)
        report.trials += 1
        if decrease is None:
            continue
        report.condition_met += 1
        decreases.append(decrease)
        if decrease > 0:
            report.passes += 1
        else:
            report.failures.append({"W": inst.W.tolist(), "x": inst.x.tolist(),
                                    "label": inst.label, "x_aug": inst.x_aug.tolist(),
                                    "alignment": alignment, "decrease": decrease})
    if decreases:
        report.mean_decrease = float(np.mean(decreases))
        report.min_decrease = float(np.min(decreases))
    return report


def verification_report(trials1: int, trials2: int, seed: int, n_max: int = 10) -> dict:
    from .numerics import RngStreams

    streams = RngStreams(seed)
    t1 = verify_theorem1(trials1, n_max, streams.stream("theorem1"))
    t2 = verify_theorem2(trials2, streams.stream("theorem2"))
    return {"theorem1": t1.to_dict(), "theorem2": t2.to_dict()}


# --- alignment diagnostic on the deep model --------------------------------

def flat_grads(grads: dict) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


def alignment(sup_grads, ssl_grads) -> float:
    """Inner product of two gradient structures (dicts or flat arrays)."""
    a = flat_grads(sup_grads) if isinstance(sup_grads, dict) else np.ravel(sup_grads)
    b = flat_grads(ssl_grads) if isinstance(ssl_grads, dict) else np.ravel(ssl_grads)
    return float(a @ b)


def measure_alignment(model, inputs, ce_batch, ssl_batch, **ssl_kwargs) -> float:
    """<grad CE, grad total SSL loss> at the current parameters.

    Diagnostic only: the labeled batch never enters the adaptation loop.
    """
    from .backbone import analytic_gradients

    _, g_sup = analytic_gradients("ce", ce_batch, model, inputs)
    _, g_ssl = analytic_gradients("total", ssl_batch, model, inputs, **ssl_kwargs)
    return alignment(g_sup, g_ssl)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
