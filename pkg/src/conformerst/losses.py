"""Training objectives: label-smoothed cross-entropy, CTC, and their
weighted combination.

CTC is computed with a log-space forward recursion over the blank-augmented
label sequence; its gradient w.r.t. the input log-probabilities is the
analytic forward-backward result, attached to the tape as a single node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

NEG_INF = -np.inf
BLANK_ID = 0


@dataclass
class LossWeights:
    lambda_ce: float = 5.0
    lambda_ctc_src: float = 1.0
    lambda_ctc_tgt: float = 2.0
    smoothing: float = 0.1

    def __post_init__(self):
        if min(self.lambda_ce, self.lambda_ctc_src, self.lambda_ctc_tgt) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must be in [0, 1)")


@dataclass
class LossBreakdown:
    ce: float
    ctc_src: float
    ctc_tgt: float
    total: float
    token_count: int


def loss_total(weights: LossWeights, ce: float, ctc_src: float, ctc_tgt: float) -> float:
    """The single place the weighted sum is evaluated (keeps it bit-exact)."""
    return (
        weights.lambda_ce * ce
        + weights.lambda_ctc_src * ctc_src
        + weights.lambda_ctc_tgt * ctc_tgt
    )


def label_smoothed_ce(logprobs: Tensor, targets, smoothing: float, pad_id: int | None = None) -> Tensor:
    """Mean per-token smoothed NLL.

    logprobs: N x V log-softmax rows; targets: N integer ids. Positions equal
    to pad_id are excluded from the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logprobs.shape
    if targets.shape != (n,):
        raise nc.ShapeError(f"label_smoothed_ce: logprobs {logprobs.shape} vs targets {targets.shape}")
    mask = np.ones(n) if pad_id is None else (targets != pad_id).astype(np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("label_smoothed_ce: all positions are padding")
    safe_targets = np.where(mask > 0, targets, 0)
    picked = nc.gather_index(logprobs, safe_targets)  # N
    uniform = nc.mean_(logprobs, axis=1)  # N
    per_tok = nc.add(nc.scale(picked, -(1.0 - smoothing)), nc.scale(uniform, -smoothing))
    weighted = nc.mul(per_tok, nc.tensor(mask.astype(logprobs.dtype)))
    return nc.scale(nc.sum_(weighted), 1.0 / count)


def ctc_feasible(num_frames: int, target) -> bool:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return num_frames >= len(target) + repeats


def _extend(target, blank):
    ext = [blank]
    for t in target:
        ext.append(int(t))
        ext.append(blank)
    return np.asarray(ext, dtype=np.int64)


def ctc_forward(logp: np.ndarray, target, blank: int = BLANK_ID) -> float:
    """Log-likelihood log P(target | logp) via the forward recursion."""
    ext = _extend(target, blank)
    s = len(ext)
    t_len = logp.shape[0]
    alpha = np.full(s, NEG_INF)
    alpha[0] = logp[0, ext[0]]
    if s > 1:
        alpha[1] = logp[0, ext[1]]
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    for t in range(1, t_len):
        prev = alpha
        stay = prev
        move = np.concatenate([[NEG_INF], prev])[:s]
        skip = np.concatenate([[NEG_INF, NEG_INF], prev])[:s]
        skip = np.where(skip_ok, skip, NEG_INF)
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.maximum(np.maximum(stay, move), skip)
            safe_m = np.where(np.isfinite(m), m, 0.0)
            acc = (
                np.exp(np.where(np.isfinite(stay), stay - safe_m, NEG_INF))
                + np.exp(np.where(np.isfinite(move), move - safe_m, NEG_INF))
                + np.exp(np.where(np.isfinite(skip), skip - safe_m, NEG_INF))
            )
            alpha = np.where(m > NEG_INF, safe_m + np.log(acc), NEG_INF) + logp[t, ext]
    tail = alpha[-1] if s == 1 else np.logaddexp(alpha[-1], alpha[-2])
    return float(tail)


def _ctc_alpha_beta(logp: np.ndarray, ext: np.ndarray, blank: int):
    """Full log alpha/beta lattices (both include the frame emission term)."""
    s = len(ext)
    t_len = logp.shape[0]
    skip_ok = np.zeros(s, dtype=bool)
    skip_ok[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    def lse3(a, b, c):
        m = np.maximum(np.maximum(a, b), c)
        safe = np.where(np.isfinite(m), m, 0.0)
        with np.errstate(divide="ignore"):
            out = safe + np.log(
                np.exp(np.where(np.isfinite(a), a - safe, NEG_INF))
                + np.exp(np.where(np.isfinite(b), b - safe, NEG_INF))
                + np.exp(np.where(np.isfinite(c), c - safe, NEG_INF))
            )
        return np.where(m > NEG_INF, out, NEG_INF)

    alpha = np.full((t_len, s), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        move = np.concatenate([[NEG_INF], prev])[:s]
        skip = np.where(skip_ok, np.concatenate([[NEG_INF, NEG_INF], prev])[:s], NEG_INF)
        alpha[t] = lse3(prev, move, skip) + logp[t, ext]

    beta = np.full((t_len, s), NEG_INF)
    beta[-1, -1] = logp[-1, ext[-1]]
    if s > 1:
        beta[-1, -2] = logp[-1, ext[-2]]
    # skip allowed forward from s to s+2 iff ext[s+2] != blank and != ext[s]
    fskip_ok = np.zeros(s, dtype=bool)
    fskip_ok[:-2] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1]
        move = np.concatenate([nxt[1:], [NEG_INF]])[:s]
        skip = np.where(fskip_ok, np.concatenate([nxt[2:], [NEG_INF, NEG_INF]])[:s], NEG_INF)
        beta[t] = lse3(nxt, move, skip) + logp[t, ext]
    return alpha, beta


def ctc_loss(logprobs: Tensor, target, input_len: int | None = None, blank: int = BLANK_ID) -> Tensor:
    """Negative log-likelihood of `target` (no blanks) under frame logprobs.

    Infeasible target lengths yield a +inf loss tensor instead of raising.
    Gradient w.r.t. logprobs is the analytic forward-backward result.
    """
    target = [int(t) for t in target]
    t_len = logprobs.shape[0] if input_len is None else int(input_len)
    if t_len > logprobs.shape[0]:
        raise nc.ShapeError(f"ctc_loss: input_len {t_len} exceeds frames {logprobs.shape[0]}")
    if not ctc_feasible(t_len, target):
        return nc.tensor(np.inf)
    logp = logprobs.data[:t_len]
    ext = _extend(target, blank)
    alpha, beta = _ctc_alpha_beta(logp, ext, blank)
    s = len(ext)
    log_p = alpha[-1, -1] if s == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    loss_val = -log_p

    def bw(g):
        # d(-logP)/dlogp[t,k] = -sum_{s: ext[s]=k} exp(alpha+beta-emit-logP)
        occ = alpha + beta - logp[:, ext] - log_p  # t x s, log occupancy
        grad = np.zeros_like(logprobs.data)
        with np.errstate(invalid="ignore"):
            w = np.exp(occ)
        w[~np.isfinite(occ)] = 0.0
        for si, k in enumerate(ext):
            grad[:t_len, k] -= w[:, si]
        nc._accum(logprobs, grad * g)

    return nc._make("ctc_loss", np.asarray(loss_val), (logprobs,), bw)


def ctc_brute_force(logp: np.ndarray, target, blank: int = BLANK_ID) -> float:
    """Oracle: -log of the summed probability over all alignment paths.

    Enumerates every V^T frame labeling and keeps those that collapse
    (dedupe repeats, drop blanks) to the target. Exponential; tests only.
    """
    import itertools

    t_len, v = logp.shape
    target = [int(t) for t in target]
    total = NEG_INF
    for path in itertools.product(range(v), repeat=t_len):
        collapsed = []
        prev = None
        for p in path:
            if p != prev and p != blank:
                collapsed.append(p)
            prev = p
        if collapsed == target:
            total = np.logaddexp(total, sum(logp[t, p] for t, p in enumerate(path)))
    return float(-total)


@dataclass
class UtteranceOutputs:
    """Per-utterance model outputs entering the combined objective."""

    dec_logprobs: Tensor  # N x V, teacher-forced next-token log-probs
    dec_targets: np.ndarray  # N target ids (shifted sequence)
    ctc_src_logprobs: Tensor  # T' x V, intermediate-tap head
    ctc_tgt_logprobs: Tensor  # T' x V, final-encoder head
    enc_len: int


def combined_loss(outputs, src_targets, task_targets, task: str, weights: LossWeights):
    """Weighted sum of CE and the two CTC losses over a batch.

    outputs: list of UtteranceOutputs; src_targets: per-utterance transcript
    text-token ids (CTCsrc reference); task_targets: transcript ids for ASR,
    translation ids for ST (CE and CTCtgt reference).

    Returns (LossBreakdown, objective) where objective is the sum over
    utterances of per-utterance losses (divide its gradients by the
    utterance count; keeping it a plain sum makes gradient accumulation
    split-invariant).
    """
    if task not in ("ASR", "ST"):
        raise ValueError(f"unknown task {task!r}")
    if len(outputs) != len(src_targets) or len(outputs) != len(task_targets):
        raise ValueError("combined_loss: mismatched batch lists")
    if any(t is None for t in task_targets):
        raise ValueError(f"combined_loss: missing target text for task {task}")
    ce_vals, src_vals, tgt_vals = [], [], []
    objective = None
    token_count = 0
    for out, src_t, tgt_t in zip(outputs, src_targets, task_targets):
        ce_u = label_smoothed_ce(out.dec_logprobs, out.dec_targets, weights.smoothing)
        src_u = ctc_loss(out.ctc_src_logprobs, src_t, input_len=out.enc_len)
        src_u = nc.scale(src_u, 1.0 / max(len(src_t), 1))
        tgt_u = ctc_loss(out.ctc_tgt_logprobs, tgt_t, input_len=out.enc_len)
        tgt_u = nc.scale(tgt_u, 1.0 / max(len(tgt_t), 1))
        term = nc.add(
            nc.scale(ce_u, weights.lambda_ce),
            nc.add(
                nc.scale(src_u, weights.lambda_ctc_src),
                nc.scale(tgt_u, weights.lambda_ctc_tgt),
            ),
        )
        objective = term if objective is None else nc.add(objective, term)
        ce_vals.append(float(ce_u.data))
        src_vals.append(float(src_u.data))
        tgt_vals.append(float(tgt_u.data))
        token_count += len(out.dec_targets)
    n = len(outputs)
    ce = sum(ce_vals) / n
    ctc_src = sum(src_vals) / n
    ctc_tgt = sum(tgt_vals) / n
    breakdown = LossBreakdown(
        ce=ce,
        ctc_src=ctc_src,
        ctc_tgt=ctc_tgt,
        total=loss_total(weights, ce, ctc_src, ctc_tgt),
        token_count=token_count,
    )
    return breakdown, objective
