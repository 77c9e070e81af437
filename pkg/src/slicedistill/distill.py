"""Teacher-student self-distillation: multi-crop loss with teacher
centering and sharpening, EMA teacher, AdamW, cosine schedule with
linear warmup, and resumable checkpointing.

Each training step derives its RNG purely from (seed, step), so a run
is a pure function of its seed and resuming from a checkpoint
reproduces the remaining loss trace bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import vit as vit_mod
from .augment import AugSample, CropConfig, derive_seed, make_multicrop
from .autodiff import Tensor
from .errors import (EmptyBatch, LeakageDetected, MismatchedViewCounts,
                     NaNGradient, ShapeMismatch)
from .slices import SliceSample
from .vit import ViTConfig, ViTParams


@dataclass(frozen=True)
class DistillConfig:
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    center_momentum: float = 0.9
    ema_momentum: float = 0.99
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    warmup_steps: int = 20
    total_steps: int = 200
    batch_slices: int = 16
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.tau_teacher < self.tau_student:
            raise ValueError("need 0 < tau_teacher < tau_student")
        if not (0 <= self.ema_momentum <= 1 and 0 <= self.center_momentum <= 1):
            raise ValueError("momenta must lie in [0, 1]")
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")


@dataclass
class DistillState:
    student: ViTParams
    teacher: ViTParams
    center: np.ndarray
    step: int = 0
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)


def init_distill_state(vit_cfg: ViTConfig, seed: int) -> DistillState:
    student = vit_mod.init_vit_params(vit_cfg, np.random.default_rng(np.random.SeedSequence([31, seed])))
    return DistillState(
        student=student,
        teacher=vit_mod.copy_params(student),
        center=np.zeros(vit_cfg.n_prototypes, dtype=np.float32),
        step=0,
        opt_m={k: np.zeros_like(v) for k, v in student.items()},
        opt_v={k: np.zeros_like(v) for k, v in student.items()},
    )


# ---------------------------------------------------------------------------
# loss pieces

def teacher_distribution(logits: np.ndarray, center: np.ndarray,
                         tau_teacher: float) -> np.ndarray:
    """softmax((logits - center) / tau); constant wrt the loss."""
    if tau_teacher <= 0:
        raise ValueError(f"tau_teacher {tau_teacher}")
    z = (logits.astype(np.float64) - center.astype(np.float64)) / tau_teacher
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def distill_loss(student_logits: list[Tensor], teacher_probs: list[np.ndarray],
                 cfg: DistillConfig) -> Tensor:
    """Mean over ordered (teacher global, student view) pairs, view
    indices differing, of the batch-mean cross entropy
    H(P_t, softmax(s / tau_student)). Gradient flows only through the
    student logits; teacher probabilities enter as constants.
    """
    n_views = len(student_logits)
    n_global = len(teacher_probs)
    if n_global == 0 or n_views < n_global:
        raise MismatchedViewCounts(f"{n_views} student views, {n_global} teacher views")
    log_p = [ad.log_softmax(ad.mul_scalar(s, 1.0 / cfg.tau_student)) for s in student_logits]
    terms = []
    for t in range(n_global):
        pt = Tensor(teacher_probs[t])
        for s in range(n_views):
            if s == t:
                continue
            terms.append(ad.mul_scalar(ad.mul(pt, log_p[s]).sum(axis=-1).mean(), -1.0))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul_scalar(total, 1.0 / len(terms))


def update_center(center: np.ndarray, teacher_logits_batch: np.ndarray,
                  center_momentum: float) -> np.ndarray:
    """center' = m*center + (1-m)*mean over all teacher global logits."""
    batch = np.asarray(teacher_logits_batch, dtype=np.float32)
    if batch.ndim == 1:
        batch = batch[None]
    if batch.shape[0] == 0:
        raise EmptyBatch("no teacher logits to update the center with")
    m = np.float32(center_momentum)
    return (m * center + (np.float32(1.0) - m) * batch.mean(axis=0)).astype(np.float32)


def ema_update(teacher: ViTParams, student: ViTParams, momentum: float) -> None:
    """In-place theta_t <- m*theta_t + (1-m)*theta_s."""
    m = np.float32(momentum)
    one_m = np.float32(1.0) - m
    for name, tv in teacher.items():
        sv = student.get(name)
        if sv is None or sv.shape != tv.shape:
            raise ShapeMismatch(f"teacher/student mismatch at {name!r}")
        tv *= m
        tv += one_m * sv


_NO_DECAY_MARKERS = ("norm",)


def decays_weight(name: str) -> bool:
    """Decoupled weight decay applies to weights only: norms, biases,
    class token, and the positional tables are exempt."""
    if name.endswith(".b") or name.endswith(".bias"):
        return False
    if name in ("cls_token",) or name.startswith("pos_"):
        return False
    return not any(m in name for m in _NO_DECAY_MARKERS)


def adamw_step(params: ViTParams, grads: dict[str, np.ndarray],
               opt_m: dict[str, np.ndarray], opt_v: dict[str, np.ndarray],
               lr_t: float, cfg: DistillConfig, step_count: int) -> None:
    """One decoupled-weight-decay Adam update, in place.

    step_count is 1-based for bias correction. Raises NaNGradient on
    any non-finite gradient.
    """
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    c1 = 1.0 - cfg.beta1 ** step_count
    c2 = 1.0 - cfg.beta2 ** step_count
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NaNGradient(f"non-finite gradient for parameter {name!r}")
        m = opt_m[name]
        v = opt_v[name]
        m *= b1
        m += (np.float32(1.0) - b1) * g
        v *= b2
        v += (np.float32(1.0) - b2) * (g * g)
        mhat = m / np.float32(c1)
        vhat = v / np.float32(c2)
        if cfg.weight_decay and decays_weight(name):
            p *= np.float32(1.0 - lr_t * cfg.weight_decay)
        p -= np.float32(lr_t) * mhat / (np.sqrt(vhat) + np.float32(cfg.eps))


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float


def _forward_view_group(views: np.ndarray, n_views: int, batch: int,
                        params: dict[str, Tensor], vit_cfg: ViTConfig) -> list[Tensor]:
    """Forward a (n_views*batch, S, S, 3) stack; returns per-view logits."""
    cls, _ = vit_mod.forward_views(views, params, vit_cfg)
    logits = vit_mod.forward_head(cls, params)
    return [ad.narrow(logits, 0, v * batch, batch) for v in range(n_views)]


def _assemble_views(samples: list[AugSample], start: int, count: int) -> np.ndarray:
    """Stack view indices [start, start+count) across samples, view-major."""
    return np.stack([s.views[v] for v in range(start, start + count) for s in samples])


def pretrain(corpus: list[SliceSample], cfg: DistillConfig, vit_cfg: ViTConfig,
             seed: int, crop_cfg: CropConfig | None = None,
             forbidden_subjects: frozenset[str] | set[str] = frozenset(),
             state: DistillState | None = None, out_dir=None,
             progress=None) -> tuple[DistillState, list[TraceRow]]:
    """Run self-distillation over a slice corpus.

    `state` resumes a checkpointed run; `forbidden_subjects` is the
    leakage guard (any held-out subject appearing in a batch aborts).
    Returns the final state plus the loss trace for the steps executed.
    """
    if not corpus:
        raise EmptyBatch("empty slice corpus")
    crop_cfg = crop_cfg or CropConfig()
    if state is None:
        state = init_distill_state(vit_cfg, seed)
    trace: list[TraceRow] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    n_views = crop_cfg.n_global + crop_cfg.n_local
    for step in range(state.step, cfg.total_steps):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), step]))
        idx = rng.integers(0, len(corpus), size=cfg.batch_slices)
        batch = [corpus[i] for i in idx]
        leaked = sorted({s.subject_id for s in batch} & set(forbidden_subjects))
        if leaked:
            raise LeakageDetected(f"held-out subjects sampled at step {step}: {leaked}")

        augmented = []
        for pos, s in enumerate(batch):
            sample_rng = np.random.default_rng(
                derive_seed(seed, step, s.subject_id, s.slice_index, pos))
            augmented.append(make_multicrop(s, crop_cfg, sample_rng))

        student = vit_mod.wrap_params(state.student, requires_grad=True)
        teacher = vit_mod.wrap_params(state.teacher, requires_grad=False)

        globals_np = _assemble_views(augmented, 0, crop_cfg.n_global)
        student_logits = _forward_view_group(globals_np, crop_cfg.n_global,
                                             cfg.batch_slices, student, vit_cfg)
        if crop_cfg.n_local:
            locals_np = _assemble_views(augmented, crop_cfg.n_global, crop_cfg.n_local)
            student_logits += _forward_view_group(locals_np, crop_cfg.n_local,
                                                  cfg.batch_slices, student, vit_cfg)

        teacher_logits = _forward_view_group(globals_np, crop_cfg.n_global,
                                             cfg.batch_slices, teacher, vit_cfg)
        teacher_logits_np = [t.data for t in teacher_logits]
        teacher_probs = [teacher_distribution(t, state.center, cfg.tau_teacher)
                         for t in teacher_logits_np]

        loss = distill_loss(student_logits, teacher_probs, cfg)
        ad.backward(loss)
        grads = {k: t.grad for k, t in student.items()}

        lr_t = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.lr)
        adamw_step(state.student, grads, state.opt_m, state.opt_v, lr_t, cfg, step + 1)
        state.student["head.prototypes"] = vit_mod.normalize_prototype_rows(
            state.student["head.prototypes"])
        ema_update(state.teacher, state.student, cfg.ema_momentum)
        state.center = update_center(state.center, np.concatenate(teacher_logits_np),
                                     cfg.center_momentum)
        state.step = step + 1

        row = TraceRow(step=step, lr=lr_t, loss=float(loss.data))
        trace.append(row)
        if progress is not None:
            progress(row)
        if out_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_state(out_path / f"ckpt_{step + 1:06d}.vdck", state, vit_cfg)

    if out_path is not None:
        save_state(out_path / "ckpt_final.vdck", state, vit_cfg)
        write_trace(out_path / "trace.csv", trace)
    return state, trace


# ---------------------------------------------------------------------------
# persistence

def save_state(path, state: DistillState, vit_cfg: ViTConfig) -> None:
    table: dict[str, np.ndarray] = {"center": state.center,
                                    "step": np.array([state.step], dtype=np.float32)}
    for k, v in state.student.items():
        table[f"student/{k}"] = v
    for k, v in state.teacher.items():
        table[f"teacher/{k}"] = v
    for k, v in state.opt_m.items():
        table[f"opt_m/{k}"] = v
    for k, v in state.opt_v.items():
        table[f"opt_v/{k}"] = v
    vit_mod.save_checkpoint(path, {}, vit_cfg, extra=table)


def load_state(path) -> tuple[DistillState, ViTConfig]:
    _, vit_cfg, table = vit_mod.load_checkpoint(path)
    state = DistillState(
        student={k.split("/", 1)[1]: v for k, v in table.items() if k.startswith("student/")},
        teacher={k.split("/", 1)[1]: v for k, v in table.items() if k.startswith("teacher/")},
        center=table["center"],
        step=int(table["step"][0]),
        opt_m={k.split("/", 1)[1]: v for k, v in table.items() if k.startswith("opt_m/")},
        opt_v={k.split("/", 1)[1]: v for k, v in table.items() if k.startswith("opt_v/")},
    )
    return state, vit_cfg


def write_trace(path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for row in trace:
            writer.writerow([row.step, repr(row.lr), repr(row.loss)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [TraceRow(step=int(r["step"]), lr=float(r["lr"]), loss=float(r["loss"]))
                for r in reader]
