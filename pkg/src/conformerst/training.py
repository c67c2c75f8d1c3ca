"""Two-stage trainer: LR schedules, AdamW with decoupled weight decay,
gradient clipping, task sampling, token-budget batching with gradient
accumulation, checkpointing/averaging, and a catastrophic-forgetting probe.

The optimizer objective is the plain sum of per-utterance losses; gradients
are divided by the utterance count only at the optimizer step, which makes
gradient accumulation exactly equivalent to one large batch.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import perplexity
from .frontend import FeatureCache, SpecAugmentPolicy, spec_augment
from .losses import LossWeights, UtteranceOutputs, combined_loss, loss_total
from .model import Model, load_checkpoint, save_checkpoint
from .textproc import encode, encode_text
from . import numcore as nc

STAGES = ("ASR-pretrain", "ASR+ST")
SCHEDULES = ("noam", "piecewise-noam", "constant")


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------


def noam_lr(step: int, peak: float = 2e-3, warmup: int = 25_000) -> float:
    """peak * min(step/warmup, sqrt(warmup/step)); peak reached at `warmup`."""
    if warmup <= 0:
        raise ValueError(f"warmup must be positive, got {warmup}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def piecewise_noam_lr(step: int, lr_a: float = 2e-5, knee_a: int = 25_000,
                      lr_b: float = 2e-4, knee_b: int = 50_000) -> float:
    """Linear 0->lr_a over [0, knee_a], lr_a->lr_b over [knee_a, knee_b],
    then inverse square root decay from lr_b."""
    if not 0 < knee_a < knee_b:
        raise ValueError(f"knees must satisfy 0 < {knee_a} < {knee_b}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step <= knee_a:
        return lr_a * step / knee_a
    if step <= knee_b:
        return lr_a + (lr_b - lr_a) * (step - knee_a) / (knee_b - knee_a)
    return lr_b * math.sqrt(knee_b / step)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.001
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


class AdamW:
    """Decoupled-weight-decay Adam over a dict of named numpy arrays.

    Decay shrinks the parameter before the Adam delta is applied. A step
    whose gradients contain non-finite values is skipped entirely: the
    counter increments and moments/step count stay untouched.
    """

    def __init__(self, opt: OptimizerConfig | None = None):
        self.opt = opt or OptimizerConfig()
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0
        self.skipped = 0

    def step(self, params: dict, grads: dict, lr: float) -> bool:
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        o = self.opt
        self.t += 1
        bc1 = 1.0 - o.beta1**self.t
        bc2 = 1.0 - o.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = o.beta1 * self.m[name] + (1 - o.beta1) * g
            self.v[name] = o.beta2 * self.v[name] + (1 - o.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p *= 1.0 - lr * o.weight_decay
            p -= lr * m_hat / (np.sqrt(v_hat) + o.eps)
        return True


def adamw_step(params: dict, grads: dict, lr: float, opt: OptimizerConfig,
               state: AdamW | None = None) -> AdamW:
    """Functional wrapper: applies one update and returns the carried state."""
    state = state or AdamW(opt)
    state.step(params, grads, lr)
    return state


def clip_grad_norm(grads: dict, max_norm: float = 10.0) -> float:
    """Scales grads in place to global L2 norm `max_norm`; returns the
    pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sample_task(rng: np.random.Generator, p_asr: float) -> str:
    if not 0.0 <= p_asr <= 1.0:
        raise ValueError(f"p_asr must be in [0, 1], got {p_asr}")
    return "ASR" if rng.random() < p_asr else "ST"


# ---------------------------------------------------------------------------
# stage configuration
# ---------------------------------------------------------------------------


@dataclass
class StageConfig:
    stage: str = "ASR-pretrain"
    schedule: str = "noam"
    lr_peak: float = 2e-3
    lr_const: float = 1e-4
    warmup_steps: int = 25_000
    p_asr: float = 0.5
    max_steps: int = 2_000  # reference recipe trains for 1M steps
    batch_tokens: int = 10_000
    accum: int = 1
    clip_norm: float = 10.0
    checkpoint_interval: int = 1_000
    shuffle: bool = True  # shuffle batch order each epoch (off for debugging)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if (self.schedule == "constant") != (self.stage == "ASR+ST"):
            raise ValueError("constant schedule is used exactly for the ASR+ST stage")
        if not 0.0 <= self.p_asr <= 1.0:
            raise ValueError(f"p_asr must be in [0, 1], got {self.p_asr}")
        if self.max_steps < 0 or self.accum < 1 or self.batch_tokens < 1:
            raise ValueError("max_steps >= 0, accum >= 1, batch_tokens >= 1 required")

    def lr_at(self, step: int) -> float:
        if self.schedule == "noam":
            return noam_lr(step, self.lr_peak, self.warmup_steps)
        if self.schedule == "piecewise-noam":
            return piecewise_noam_lr(step)
        return self.lr_const


def load_stage_config(path) -> StageConfig:
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    known = set(StageConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"{path}: unknown config key(s): {unknown}")
    return StageConfig(**data)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _target_tokens(entry) -> int:
    longest = max(len(entry.transcript), len(entry.translation or ""))
    return longest + 3  # bos + language tag + eos


def make_batches(entries, batch_tokens: int, cache: FeatureCache):
    """Sort by feature length, then fill each batch up to the token budget."""
    order = sorted(range(len(entries)), key=lambda i: cache(entries[i]).shape[0])
    batches, current, budget = [], [], 0
    for i in order:
        need = _target_tokens(entries[i])
        if current and budget + need > batch_tokens:
            batches.append(current)
            current, budget = [], 0
        current.append(i)
        budget += need
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _forward_utterance(model, vocab, entry, feats, task: str):
    text = entry.transcript if task == "ASR" else entry.translation
    lang = entry.src_lang if task == "ASR" else entry.tgt_lang
    if text is None:
        raise ValueError(f"entry {entry.audio} has no translation for ST")
    ids = encode(text, lang, vocab)
    enc = model.encode(feats[None], [feats.shape[0]])
    t_enc = enc.states.shape[1]
    v = model.config.vocab_size
    dec_lp = model.decode_step(enc, [ids[:-1]])
    out = UtteranceOutputs(
        dec_logprobs=nc.reshape(dec_lp, (len(ids) - 1, v)),
        dec_targets=np.asarray(ids[1:]),
        ctc_src_logprobs=nc.reshape(model.ctc_head(enc.tap_states, "src-tap"), (t_enc, v)),
        ctc_tgt_logprobs=nc.reshape(model.ctc_head(enc.states, "tgt-final"), (t_enc, v)),
        enc_len=int(enc.lengths[0]),
    )
    src_tokens = encode_text(entry.transcript, vocab)
    task_tokens = encode_text(text, vocab)
    return out, src_tokens, task_tokens


def train_stage(entries, model: Model, vocab, cfg: StageConfig, out_dir,
                weights: LossWeights | None = None, cache: FeatureCache | None = None,
                augment: SpecAugmentPolicy | None = None,
                opt: OptimizerConfig | None = None):
    """Runs one training stage; returns (final checkpoint path, metrics path).

    Writes `ckpt_<step>.ckpt` every `cfg.checkpoint_interval` optimizer steps
    plus the final step, and appends one JSON metrics line per step.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("train_stage: empty manifest")
    os.makedirs(out_dir, exist_ok=True)
    weights = weights or LossWeights()
    cache = cache or FeatureCache()
    optimizer = AdamW(opt)
    rng = np.random.default_rng(cfg.seed)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    stage_tag = cfg.stage

    batches = make_batches(entries, cfg.batch_tokens, cache)
    model.training = True

    def save(step):
        path = os.path.join(out_dir, f"ckpt_{step:06d}.ckpt")
        save_checkpoint(path, model.state_arrays(), model.config, step, stage_tag)
        return path

    metrics_f = open(metrics_path, "w", encoding="utf-8")
    try:
        if cfg.max_steps == 0:
            return save(0), metrics_path
        step = 0
        batch_cursor = 0
        epoch_order = None
        final_path = None
        while step < cfg.max_steps:
            step += 1
            t0 = time.perf_counter()
            task = "ASR" if cfg.stage == "ASR-pretrain" else sample_task(rng, cfg.p_asr)
            model.zero_grad()
            breakdowns, n_utts = [], 0
            for _ in range(cfg.accum):
                if epoch_order is None or batch_cursor >= len(epoch_order):
                    epoch_order = (rng.permutation(len(batches)) if cfg.shuffle
                                   else np.arange(len(batches)))
                    batch_cursor = 0
                batch = batches[epoch_order[batch_cursor]]
                batch_cursor += 1
                outs, srcs, tasks = [], [], []
                for i in batch:
                    feats = cache(entries[i])
                    if augment is not None:
                        feats = spec_augment(feats, augment)
                    o, s, tt = _forward_utterance(model, vocab, entries[i], feats, task)
                    outs.append(o)
                    srcs.append(s)
                    tasks.append(tt)
                breakdown, objective = combined_loss(outs, srcs, tasks, task, weights)
                breakdowns.append((breakdown, len(batch)))
                if np.isfinite(objective.data):
                    nc.backward(objective)
                n_utts += len(batch)
            grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) / n_utts
                     for n, p in model.params.items()}
            norm = clip_grad_norm(grads, cfg.clip_norm)
            lr = cfg.lr_at(step)
            total_w = sum(n for _, n in breakdowns)
            record = {
                "step": step,
                "lr": lr,
                "ce": sum(b.ce * n for b, n in breakdowns) / total_w,
                "ctc_src": sum(b.ctc_src * n for b, n in breakdowns) / total_w,
                "ctc_tgt": sum(b.ctc_tgt * n for b, n in breakdowns) / total_w,
                "grad_norm": norm,
                "task": task,
            }
            record["total"] = loss_total(
                weights, record["ce"], record["ctc_src"], record["ctc_tgt"]
            )
            applied = np.isfinite(record["total"]) and np.isfinite(norm)
            if applied:
                params = {n: p.data for n, p in model.params.items()}
                applied = optimizer.step(params, grads, lr)
            if not applied:
                record["skipped"] = True
            record["wall_ms"] = (time.perf_counter() - t0) * 1000.0
            metrics_f.write(json.dumps(record) + "\n")
            if step % cfg.checkpoint_interval == 0:
                final_path = save(step)
        if final_path is None or step % cfg.checkpoint_interval != 0:
            final_path = save(step)
        return final_path, metrics_path
    finally:
        metrics_f.close()
        model.training = False


# ---------------------------------------------------------------------------
# checkpoint averaging
# ---------------------------------------------------------------------------


def average_checkpoints(paths, out_path=None):
    """Elementwise mean of named tensors over checkpoints; metadata keeps
    the maximum step. Accumulates in float64 before casting back."""
    paths = list(paths)
    if not paths:
        raise ValueError("average_checkpoints: no checkpoints given")
    ref_arrays, config, step, stage = load_checkpoint(paths[0])
    acc = {n: a.astype(np.float64) for n, a in ref_arrays.items()}
    for p in paths[1:]:
        arrays, cfg_i, step_i, _ = load_checkpoint(p)
        if cfg_i != config:
            raise ValueError(f"average_checkpoints: {p} has a different model config")
        if set(arrays) != set(acc):
            odd = sorted(set(arrays) ^ set(acc))
            raise ValueError(f"average_checkpoints: {p} tensor names differ: {odd}")
        for n, a in arrays.items():
            if a.shape != acc[n].shape:
                raise ValueError(
                    f"average_checkpoints: {p} tensor {n!r} shape {a.shape} != {acc[n].shape}"
                )
            acc[n] += a
        step = max(step, step_i)
    k = len(paths)
    mean = {n: (a / k).astype(ref_arrays[n].dtype) for n, a in acc.items()}
    if out_path is not None:
        save_checkpoint(out_path, mean, config, step, stage)
    return mean, config, step, stage


# ---------------------------------------------------------------------------
# catastrophic-forgetting probe
# ---------------------------------------------------------------------------


def forgetting_probe(pretrained_path, train_entries, val_entries, vocab,
                     lr_variants, p_asr_variants, steps: int, out_dir,
                     eval_interval: int = 100, batch_tokens: int = 10_000,
                     seed: int = 0, cache: FeatureCache | None = None):
    """Runs short second-stage trainings from one pretrained checkpoint and
    tracks ASR/ST validation perplexity per (lr, p_asr) variant.

    Returns a report dict and writes a plottable series file plus a text
    table under `out_dir`.
    """
    val_entries = list(val_entries)
    if not val_entries:
        raise ValueError("forgetting_probe: empty validation set")
    os.makedirs(out_dir, exist_ok=True)
    cache = cache or FeatureCache()
    arrays, config, _, _ = load_checkpoint(pretrained_path)

    runs = []
    for lr in lr_variants:
        for p_asr in p_asr_variants:
            model = Model(config, seed=seed)
            model.load_state(arrays)
            start_asr = perplexity(model, vocab, val_entries, "ASR", cache)
            start_st = perplexity(model, vocab, val_entries, "ST", cache)
            series = {"lr": lr, "p_asr": p_asr, "steps": [0],
                      "asr_ppl": [start_asr], "st_ppl": [start_st]}
            done = 0
            while done < steps:
                chunk = min(eval_interval, steps - done)
                cfg = StageConfig(stage="ASR+ST", schedule="constant", lr_const=lr,
                                  p_asr=p_asr, max_steps=chunk,
                                  batch_tokens=batch_tokens,
                                  checkpoint_interval=max(chunk, 1),
                                  seed=seed + done)
                run_dir = os.path.join(out_dir, f"lr{lr:g}_p{p_asr:g}")
                train_stage(train_entries, model, vocab, cfg, run_dir, cache=cache)
                done += chunk
                series["steps"].append(done)
                series["asr_ppl"].append(perplexity(model, vocab, val_entries, "ASR", cache))
                series["st_ppl"].append(perplexity(model, vocab, val_entries, "ST", cache))
            runs.append(series)

    series_path = os.path.join(out_dir, "probe_series.jsonl")
    with open(series_path, "w", encoding="utf-8") as f:
        for s in runs:
            f.write(json.dumps(s) + "\n")
    lines = [f"{'lr':>10} {'p_asr':>6} {'asr_ppl_0':>10} {'asr_ppl_T':>10} "
             f"{'st_ppl_0':>10} {'st_ppl_T':>10}"]
    for s in runs:
        lines.append(f"{s['lr']:>10g} {s['p_asr']:>6g} {s['asr_ppl'][0]:>10.4f} "
                     f"{s['asr_ppl'][-1]:>10.4f} {s['st_ppl'][0]:>10.4f} "
                     f"{s['st_ppl'][-1]:>10.4f}")
    table = "\n".join(lines)
    with open(os.path.join(out_dir, "probe_table.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    return {"runs": runs, "series_path": series_path, "table": table}
