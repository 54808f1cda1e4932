"""Continual test-time adaptation with instance-wise full/efficient tuning.

For every stream instance the engine runs exactly two encoder forwards:

1. the EMA teacher sees the unmasked image and emits hard per-patch
   pseudo-labels;
2. the student sees a masked copy and is trained on pseudo-label
   cross-entropy plus masked L1 reconstruction of the original pixels.

The tuning mode is chosen per instance *before* any state changes, by
comparing the current cross-entropy against an exponential moving average
of its own history: a loss strictly above the running threshold signals a
distribution shift and triggers full tuning (all parameter groups); at or
below it, only the lightweight adapters are updated. The threshold starts
at zero, so the very first instance always takes the full-tuning path.

Per-instance step order (fixed; tests rely on it):

    teacher forward -> mask draw -> student forward (both heads)
    -> tuning decision -> backward + optimizer step
    -> threshold update -> teacher EMA update + counters

A non-finite loss anywhere in the step quarantines the instance: no
parameter, optimizer, threshold, or teacher state changes, the decision is
recorded as "SKIP", and the adapted-step counter does not advance.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as m
from .autodiff import NonFiniteError, Optimizer, Tape, Tensor
from .params import ParamStore

FT = "FT"      # full tuning: every parameter group
ET = "ET"      # efficient tuning: adapters only (configurable)
SKIP = "SKIP"  # quarantined non-finite instance; no state change

TEACHER_GROUPS = ("backbone", "adapter", "seg_head")


def ema_update(teacher: ParamStore, student: ParamStore, alpha: float) -> None:
    """In-place teacher <- alpha * teacher + (1 - alpha) * student."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("ema alpha must lie in [0, 1]")
    for name in teacher.names():
        t = teacher[name].data
        t *= alpha
        t += (1.0 - alpha) * student[name].data


def update_threshold(tau: float, loss: float, alpha_l: float) -> float:
    """Running loss threshold: alpha_l * tau + (1 - alpha_l) * loss."""
    if not 0.0 <= alpha_l <= 1.0:
        raise ValueError("alpha_l must lie in [0, 1]")
    if not math.isfinite(loss):
        raise NonFiniteError("threshold update from non-finite loss")
    return alpha_l * float(tau) + (1.0 - alpha_l) * float(loss)


def decide_shift(loss: float, tau: float) -> bool:
    """True (full tuning) iff loss is STRICTLY above the threshold."""
    if not math.isfinite(loss) or not math.isfinite(tau):
        raise NonFiniteError("shift decision on non-finite values")
    return bool(loss > tau)


@dataclass(frozen=True)
class StepReport:
    t: int                      # caller-supplied stream position
    domain: str
    decision: str               # FT | ET | SKIP
    loss_seg: float             # nan when quarantined
    loss_rec: float
    tau_before: float
    tau_after: float
    wall_ms: float
    teacher_labels: np.ndarray | None   # hard pseudo-labels [num_patches]
    student_labels: np.ndarray | None   # student argmax on the masked input


class AdaptationEngine:
    """Holds student, EMA teacher, optimizer, and the decision threshold.

    The student store must contain every group (it is the source checkpoint);
    the teacher is a deep copy of the backbone, adapter, and segmentation-head
    entries only. `decision_fn(loss_seg, tau) -> bool` may be injected to pin
    the tuning mode (constant True/False gives ft-only/et-only behaviour);
    the default is the thresholded shift detector.
    """

    def __init__(self, params: ParamStore, config: m.ModelConfig, *, lr: float = 1e-4,
                 alpha: float = 0.999, alpha_l: float = 0.9,
                 optimizer_kind: str = "adam", et_groups=("adapter",),
                 ft_lr_mult: float = 1.0, decision_fn=None, mask_seed: int = 0,
                 clock=time.perf_counter):
        if config.task != "segmentation":
            raise ValueError("adaptation requires task='segmentation'")
        if not 0.0 <= alpha <= 1.0 or not 0.0 <= alpha_l <= 1.0:
            raise ValueError("alpha and alpha_l must lie in [0, 1]")
        self.student = params
        self.config = config
        self.lr = float(lr)
        self.alpha = float(alpha)
        self.alpha_l = float(alpha_l)
        self.ft_groups = tuple(params.groups_present())
        self.et_groups = tuple(et_groups)
        for g in self.et_groups:
            if g not in self.ft_groups:
                raise ValueError(f"efficient-tuning group '{g}' not present in parameters")
        self.ft_lr_mult = float(ft_lr_mult)
        self.decision_fn = decide_shift if decision_fn is None else decision_fn
        self.mask_seed = int(mask_seed)
        self.clock = clock
        self.optimizer = Optimizer(optimizer_kind)
        teacher_names = [n for n in params.names()
                         if params.group_of(n) in TEACHER_GROUPS]
        self.teacher = params.subset(teacher_names).clone()
        self.tau = 0.0
        self.ft_count = 0
        self.et_count = 0
        self.skipped = 0
        self.forward_count = 0   # encoder forwards, teacher and student alike

    @property
    def t(self) -> int:
        """Number of instances that actually produced an update."""
        return self.ft_count + self.et_count

    def pseudo_label(self, image) -> np.ndarray:
        """Teacher forward on the unmasked image -> hard labels [num_patches].

        Overridable; subclasses that average several augmented forwards must
        bump forward_count once per encoder pass to keep cost accounting honest.
        """
        self.forward_count += 1
        return m.predict(image, self.teacher, self.config)

    def step(self, image, t_index: int, domain: str = "") -> StepReport:
        """Adapt on one instance; returns the per-instance report."""
        start = self.clock()
        cfg = self.config
        try:
            labels = self.pseudo_label(image)
            patch_mask = m.draw_mask(cfg.num_patches, cfg.mask_ratio,
                                     self.mask_seed, t_index)
            tape = Tape()
            with ad.recording(tape):
                x_img = Tensor(np.asarray(image, dtype=np.float64))
                x_masked = m.apply_mask(x_img, patch_mask,
                                        self.student["mask_token"], cfg)
                self.forward_count += 1
                tokens = m.encode(x_masked, self.student, cfg)
                logits = m.seg_decode(tokens, self.student, cfg)
                loss_seg = ad.cross_entropy(logits, labels)
                recon = m.rec_decode(tokens, self.student, cfg)
                loss_rec = ad.l1_masked(recon, x_img,
                                        Tensor(m.pixel_mask(patch_mask, cfg)))
                loss_total = ad.add(loss_seg, loss_rec)
                use_ft = bool(self.decision_fn(float(loss_seg.data), self.tau))
                ad.backward(loss_total)
            groups = self.ft_groups if use_ft else self.et_groups
            lr = self.lr * self.ft_lr_mult if use_ft else self.lr
            self.optimizer.step(self.student, groups, lr)
        except NonFiniteError:
            self.student.zero_grad()
            self.skipped += 1
            wall_ms = (self.clock() - start) * 1000.0
            return StepReport(t=t_index, domain=domain, decision=SKIP,
                              loss_seg=float("nan"), loss_rec=float("nan"),
                              tau_before=self.tau, tau_after=self.tau,
                              wall_ms=wall_ms, teacher_labels=None,
                              student_labels=None)
        tau_before = self.tau
        self.tau = update_threshold(tau_before, float(loss_seg.data), self.alpha_l)
        ema_update(self.teacher, self.student, self.alpha)
        if use_ft:
            self.ft_count += 1
        else:
            self.et_count += 1
        wall_ms = (self.clock() - start) * 1000.0
        return StepReport(t=t_index, domain=domain, decision=FT if use_ft else ET,
                          loss_seg=float(loss_seg.data), loss_rec=float(loss_rec.data),
                          tau_before=tau_before, tau_after=self.tau, wall_ms=wall_ms,
                          teacher_labels=labels,
                          student_labels=np.argmax(logits.data, axis=-1))


def init_adaptation(params: ParamStore, config: m.ModelConfig,
                    **engine_kwargs) -> AdaptationEngine:
    """Build an engine from checkpoint contents, validating the name set."""
    expected = m.parameter_names(config)
    got = params.names()
    missing = sorted(set(expected) - set(got))
    unexpected = sorted(set(got) - set(expected))
    if missing or unexpected:
        raise ValueError(f"parameter set mismatch: missing {missing}, "
                         f"unexpected {unexpected}")
    return AdaptationEngine(params, config, **engine_kwargs)
