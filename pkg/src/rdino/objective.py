"""Distillation cross-entropy, the two embedding regularizers and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import NetworkPair, as_tensors, forward
from .numerics import ContractError, DimensionError, ParameterError, Tensor

XCORR_EPS = 1e-12


def ce_pairs(n_global: int = 2, n_local: int = 4) -> list[tuple[int, int]]:
    """(teacher view, student view) index pairs: every global view against every other view."""
    n_views = n_global + n_local
    return [(i, j) for i in range(n_global) for j in range(n_views) if j != i]


def dino_ce(teacher_probs, student_logprobs) -> Tensor:
    """Mean cross-entropy over utterances and view pairs.

    ``teacher_probs`` is (n_global, B, K) and treated as a constant;
    ``student_logprobs`` is (n_views, B, K), global views first.
    """
    t = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    s = student_logprobs if isinstance(student_logprobs, Tensor) else Tensor(student_logprobs)
    n_global, n_views = t.shape[0], s.shape[0]
    if t.shape[1:] != s.shape[1:]:
        raise DimensionError(f"teacher {t.shape} and student {s.shape} batches do not align")
    pairs = ce_pairs(n_global, n_views - n_global)
    # fold the pair sum into one weight tensor over student views
    weight = np.zeros(s.shape, dtype=s.dtype)
    for i, j in pairs:
        weight[j] += t[i]
    batch = s.shape[1]
    return -nx.tsum(s * weight) * (1.0 / (batch * len(pairs)))


def _hinge_std(z, eps: float) -> Tensor:
    std = nx.sqrt(nx.var(z, axis=0) + eps)
    return nx.mean(nx.maximum(1.0 - std, 0.0))


def diversity_loss(z_tea, z_stu, eps: float = 1e-4) -> Tensor:
    """Hinge on per-dimension batch std, averaged over dimensions, teacher term + student term."""
    z_tea = Tensor(z_tea.data if isinstance(z_tea, Tensor) else np.asarray(z_tea))
    z_stu = z_stu if isinstance(z_stu, Tensor) else Tensor(z_stu)
    if z_stu.shape[0] < 2 or z_tea.shape[0] < 2:
        raise ContractError("diversity loss needs at least two rows to define a variance")
    return _hinge_std(z_tea, eps) + _hinge_std(z_stu, eps)


def cross_correlation(z_tea, z_stu, centered: bool = False) -> Tensor:
    """Column-normalized inner products between teacher column i and student column j over the batch.

    The default is un-centered; ``centered=True`` subtracts column means first.
    """
    zt = np.asarray(z_tea.data if isinstance(z_tea, Tensor) else z_tea)
    zs = z_stu if isinstance(z_stu, Tensor) else Tensor(z_stu)
    if zt.shape != zs.shape:
        raise DimensionError(f"teacher {zt.shape} and student {zs.shape} activations must align")
    if centered:
        zt = zt - zt.mean(axis=0, keepdims=True)
        zs = zs - nx.mean(zs, axis=0, keepdims=True)
    t_norm = np.sqrt((zt * zt).sum(axis=0) + XCORR_EPS)
    s_norm = nx.sqrt(nx.tsum(nx.square(zs), axis=0) + XCORR_EPS)
    num = nx.matmul(Tensor(np.ascontiguousarray((zt / t_norm).T)), zs)
    return num * nx.reshape(nx.reciprocal(s_norm), (1, -1))


def redundancy_loss(c) -> Tensor:
    """Sum of squared off-diagonal entries."""
    c = c if isinstance(c, Tensor) else Tensor(c)
    off = 1.0 - np.eye(c.shape[0], c.shape[1], dtype=c.dtype)
    return nx.tsum(nx.square(c) * off)


@dataclass
class LossBreakdown:
    ce: float
    dr: float
    rer: float
    total: float
    lam: float
    mean_std: float = float("nan")
    entropy: float = float("nan")
    mean_offdiag: float = float("nan")
    # scalar graph root; None once only values are needed
    root: Tensor | None = None
    teacher_logits: np.ndarray | None = None

    def log_line(self, step: int) -> str:
        return f"{step} {self.ce:.6f} {self.dr:.6f} {self.rer:.6f} {self.total:.6f} {self.mean_std:.6f} {self.entropy:.6f}"


@dataclass
class CollapseMetrics:
    mean_std: float
    entropy: float
    mean_offdiag: float


def collapse_metrics(z_tea, teacher_probs, z_stu=None) -> CollapseMetrics:
    """Mean per-dim std of teacher activations, entropy of the batch-mean teacher
    distribution, and mean |off-diagonal| cross-correlation (teacher with itself
    unless ``z_stu`` is given)."""
    zt = np.asarray(z_tea, dtype=np.float64)
    p = np.asarray(teacher_probs, dtype=np.float64).reshape(-1, np.shape(teacher_probs)[-1])
    mean_p = p.mean(axis=0)
    nz = mean_p > 0
    entropy = float(-(mean_p[nz] * np.log(mean_p[nz])).sum())
    c = cross_correlation(zt, zt if z_stu is None else np.asarray(z_stu, dtype=np.float64)).data
    d = c.shape[0]
    off = np.abs(c[~np.eye(d, dtype=bool)])
    return CollapseMetrics(float(zt.std(axis=0).mean()), entropy, float(off.mean()) if off.size else 0.0)


def stack_views(viewsets, which: str) -> np.ndarray:
    """(n_views * B, T, F) array, view-major so rows [v*B:(v+1)*B] are view v of every utterance."""
    rows = []
    n = 2 if which == "globals" else 4
    for v in range(n):
        for vs in viewsets:
            rows.append(getattr(vs, which)[v].frames)
    return np.stack(rows)


def total_loss(
    viewsets,
    pair: NetworkPair,
    lam: float = 0.3,
    tau_t: float = 0.04,
    tau_s: float = 0.1,
    eps: float = 1e-4,
    centering: bool = True,
    centered_xcorr: bool = False,
    student_params: dict[str, Tensor] | None = None,
    dtype=None,
) -> LossBreakdown:
    """Full objective ``ce + lam * (dr + rer)`` for a batch of view sets.

    The teacher runs on global views only, on plain arrays (no gradient).
    Gradients reach ``student_params`` (created from ``pair.student`` when not
    supplied).
    """
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    if not (tau_t > 0 and tau_s > 0):
        raise ParameterError("temperatures must be positive")
    enc, head = pair.encoder, pair.head
    dtype = dtype or next(iter(pair.student.values())).dtype
    if student_params is None:
        student_params = as_tensors(pair.student, requires_grad=True)
    b = len(viewsets)
    g_feats = stack_views(viewsets, "globals").astype(dtype)
    l_feats = stack_views(viewsets, "locals").astype(dtype)

    tea = forward(g_feats, pair.teacher, enc, head)
    t_logits = tea.logits.data
    shifted = t_logits - pair.center if centering else t_logits
    t_probs = nx.softmax_temp(Tensor(shifted), tau_t).data.reshape(2, b, -1)

    stu_g = forward(g_feats, student_params, enc, head)
    stu_l = forward(l_feats, student_params, enc, head)
    s_logits = nx.concat([stu_g.logits, stu_l.logits], axis=0)
    s_logp = nx.reshape(nx.log_softmax_temp(s_logits, tau_s), (6, b, -1))
    ce = dino_ce(t_probs, s_logp)

    z_tea = tea.reg_activations.data
    z_stu = stu_g.reg_activations
    dr = diversity_loss(z_tea, z_stu, eps)
    c = cross_correlation(z_tea, z_stu, centered=centered_xcorr)
    rer = redundancy_loss(c)
    total = ce + (dr + rer) * lam if lam != 0 else ce

    d = c.shape[0]
    diag = collapse_metrics(z_tea, t_probs)
    off = np.abs(c.data[~np.eye(d, dtype=bool)])
    return LossBreakdown(
        ce=ce.item(),
        dr=dr.item(),
        rer=rer.item(),
        total=total.item(),
        lam=lam,
        mean_std=diag.mean_std,
        entropy=diag.entropy,
        mean_offdiag=float(off.mean()) if off.size else 0.0,
        root=total,
        teacher_logits=t_logits,
    )
