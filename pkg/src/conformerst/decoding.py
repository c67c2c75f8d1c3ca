"""Attention beam search with unknown-token penalty, no-repeat n-gram
blocking, and joint CTC rescoring of completed hypotheses; plus a greedy
CTC diagnostic decoder.

Decoding has no RNG: identical inputs and config produce identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .losses import ctc_feasible, ctc_forward

NEG_INF = -np.inf


@dataclass
class DecodeConfig:
    beam: int = 5
    unk_penalty: float = 10000.0  # subtracted from the unk log-score
    no_repeat_ngram: int = 5
    ctc_weight: float = 0.2
    max_len_factor: float = 1.0  # output cap: factor * encoder frames + 10
    length_normalize: bool = True

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError(f"beam must be >= 1, got {self.beam}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")


@dataclass
class Hypothesis:
    tokens: list
    attn_logp: float = 0.0
    ctc_logp: float = 0.0
    score: float = 0.0

    def text_tokens(self, vocab):
        """Generated text ids: strip bos/lang prefix and the trailing eos."""
        toks = self.tokens[2:]
        if toks and toks[-1] == vocab.eos_id:
            toks = toks[:-1]
        return toks


def banned_ngram_tokens(tokens, n: int):
    """Tokens that would complete an n-gram already present in `tokens`."""
    if n <= 0 or len(tokens) < n - 1:
        return set()
    prefix = tuple(tokens[-(n - 1):]) if n > 1 else ()
    banned = set()
    for i in range(len(tokens) - n + 1):
        if tuple(tokens[i : i + n - 1]) == prefix:
            banned.add(tokens[i + n - 1])
    return banned


def _norm(score: float, hyp_len: int, normalize: bool) -> float:
    return score / max(hyp_len, 1) if normalize else score


def combined_score(attn_logp: float, ctc_logp: float, w: float, hyp_len: int, normalize: bool) -> float:
    return _norm((1.0 - w) * attn_logp + w * ctc_logp, hyp_len, normalize)


def ctc_prefix_score(prefix, ctc_logprobs: np.ndarray, blank: int = 0, complete: bool = False) -> float:
    """log-probability mass of label sequences beginning with `prefix`.

    With complete=True the prefix is scored as the full label sequence
    (equals -ctc_loss of that sequence). The empty prefix scores 0 by the
    cumulative-prefix convention; prefixes infeasible for the number of
    frames score -inf.
    """
    prefix = [int(t) for t in prefix]
    logp = np.asarray(ctc_logprobs)
    t_len = logp.shape[0]
    if not prefix:
        return 0.0 if not complete else ctc_forward(logp, [], blank)
    if not ctc_feasible(t_len, prefix):
        return NEG_INF
    if complete:
        return ctc_forward(logp, prefix, blank)
    # forward over the lattice restricted to states before the final label;
    # mass entering the final-label state is absorbed (any continuation counts)
    l = len(prefix)
    ext = [blank]
    for tok in prefix:
        ext.extend((tok, blank))
    last = 2 * l - 1  # state index of the final label
    inner = np.full(last, NEG_INF)  # states 0 .. last-1
    inner[0] = logp[0, blank]
    if last >= 2:
        inner[1] = logp[0, ext[1]]
    absorbed = logp[0, ext[last]] if last == 1 else NEG_INF
    skip_ok = [s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] for s in range(last + 1)]
    for t in range(1, t_len):
        # completion mass first: transitions into `last` from t-1 states
        enter = inner[last - 1]
        if skip_ok[last] and last >= 2:
            enter = np.logaddexp(enter, inner[last - 2])
        absorbed = np.logaddexp(absorbed, logp[t, ext[last]] + enter)
        new = np.full(last, NEG_INF)
        for s in range(last):
            acc = inner[s]
            if s >= 1:
                acc = np.logaddexp(acc, inner[s - 1])
            if s >= 2 and skip_ok[s]:
                acc = np.logaddexp(acc, inner[s - 2])
            new[s] = acc + logp[t, ext[s]]
        inner = new
    return float(absorbed)


def greedy_ctc(ctc_logprobs: np.ndarray, blank: int = 0) -> list:
    """Best-path decode: per-frame argmax, collapse repeats, drop blanks."""
    path = np.asarray(ctc_logprobs).argmax(axis=-1)
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def joint_rescore(hyps, ctc_logprobs: np.ndarray, w: float, vocab, normalize: bool = True):
    """Rerank finished hypotheses by (1-w)*attention + w*CTC sequence score."""
    for h in hyps:
        h.ctc_logp = ctc_prefix_score(h.text_tokens(vocab), ctc_logprobs, blank=vocab.blank_id,
                                      complete=True)
        h.score = combined_score(h.attn_logp, h.ctc_logp, w, len(h.tokens) - 2, normalize)
    return sorted(hyps, key=lambda h: h.score, reverse=True)


def beam_search(model, vocab, enc, tgt_lang: str, cfg: DecodeConfig):
    """Decode one utterance; returns hypotheses ranked by combined score."""
    start = [vocab.bos_id, vocab.lang_id(tgt_lang)]
    never = [vocab.blank_id, vocab.pad_id, vocab.bos_id,
             vocab.lang_id("en"), vocab.lang_id("it")]
    max_len = int(enc.lengths[0] * cfg.max_len_factor) + 10
    beams = [Hypothesis(tokens=list(start))]
    finished = []
    with nc.no_grad():
        ctc_logprobs = None
        if cfg.ctc_weight > 0.0:
            ctc_logprobs = model.ctc_head(enc.states, "tgt-final").data[0, : enc.lengths[0]]
        for _ in range(max_len):
            prefixes = np.array([b.tokens for b in beams], dtype=np.int64)
            logp = model.decode_step(enc, prefixes).data[:, -1, :]  # beams x V
            candidates = []
            for i, b in enumerate(beams):
                scores = logp[i].astype(np.float64).copy()
                scores[vocab.unk_id] -= cfg.unk_penalty
                scores[never] = NEG_INF
                for t in banned_ngram_tokens(b.tokens, cfg.no_repeat_ngram):
                    scores[t] = NEG_INF
                if not np.isfinite(scores).any():
                    # every continuation masked: force eos rather than deadlock
                    candidates.append((b.attn_logp, b, vocab.eos_id))
                    continue
                order = np.argsort(scores)[::-1][: cfg.beam]
                for t in order:
                    if not np.isfinite(scores[t]):
                        continue
                    candidates.append((b.attn_logp + float(scores[t]), b, int(t)))
            candidates.sort(key=lambda c: c[0], reverse=True)
            next_beams = []
            for total, b, tok in candidates:
                hyp = Hypothesis(tokens=b.tokens + [tok], attn_logp=total)
                if tok == vocab.eos_id:
                    finished.append(hyp)
                else:
                    next_beams.append(hyp)
                if len(next_beams) >= cfg.beam:
                    break
            beams = next_beams
            if not beams or len(finished) >= cfg.beam:
                break
        # length cap reached with open beams: close them with eos
        if not finished:
            for b in beams:
                finished.append(Hypothesis(tokens=b.tokens + [vocab.eos_id], attn_logp=b.attn_logp))
    if cfg.ctc_weight > 0.0:
        return joint_rescore(finished, ctc_logprobs, cfg.ctc_weight, vocab, cfg.length_normalize)
    for h in finished:
        h.ctc_logp = 0.0
        h.score = combined_score(h.attn_logp, 0.0, 0.0, len(h.tokens) - 2, cfg.length_normalize)
    return sorted(finished, key=lambda h: h.score, reverse=True)


def greedy_attention(model, vocab, enc, tgt_lang: str, max_len_factor: float = 1.0):
    """Plain argmax decoding (beam=1, no CTC); used as a reference path."""
    cfg = DecodeConfig(beam=1, ctc_weight=0.0, no_repeat_ngram=0, unk_penalty=0.0,
                       max_len_factor=max_len_factor)
    return beam_search(model, vocab, enc, tgt_lang, cfg)[0]
