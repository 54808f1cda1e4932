"""Test-time adaptation on a corrupted stream, instance by instance.

Trains a small source model, then walks a short cyclic stream with the
hybrid engine, printing each instance's teacher-student loss, the moving
threshold, and the resulting full/efficient tuning decision. Scoring follows
the benchmark protocol: each instance is predicted by the EMA teacher on the
unmasked image before that instance's update.
"""
import tempfile

import numpy as np

from ttaswitch import model as m
from ttaswitch.adaptation import init_adaptation
from ttaswitch.checkpoint import load_checkpoint
from ttaswitch.metrics import compute_miou
from ttaswitch.source import train_source
from ttaswitch.streams import SceneSpec, build_stream

cfg = m.ModelConfig(image_size=32, embed_dim=32, depth=2, heads=2,
                    adapter_dim=20)
with tempfile.TemporaryDirectory() as tmp:
    print("training a small source model (60 scenes, 12 epochs)...")
    ckpt = train_source(cfg, num_scenes=60, epochs=12, batch_size=8,
                        lr=1e-3, seed=0, out_dir=tmp)
    params, _ = load_checkpoint(ckpt)
frozen = params.clone()

spec = SceneSpec(image_size=cfg.image_size, patch_size=cfg.patch_size,
                 channels=cfg.channels, num_classes=cfg.num_classes)
stream = list(build_stream(spec, domains=("fog", "night", "rain", "snow"),
                           per_domain=6, rounds=2, seed=5, severity=0.8))
engine = init_adaptation(params, cfg)  # defaults: lr 1e-4, EMA 0.999, alpha_l 0.9

print(f"\nadapting over {len(stream)} instances "
      "(FT = full tuning, ET = adapter-only tuning):")
print(f"{'t':>3} {'domain':<6} {'loss':>7} {'tau before':>10} {'decision':>8}")
gts, adapted_preds, frozen_preds = [], [], []
for inst in stream:
    report = engine.step(inst.image, inst.t, domain=inst.domain)
    marker = " <- domain change" if inst.t % 6 == 0 and inst.t > 0 else ""
    print(f"{report.t:>3} {inst.domain:<6} {report.loss_seg:>7.4f} "
          f"{report.tau_before:>10.4f} {report.decision:>8}{marker}")
    gts.append(inst.labels)
    adapted_preds.append(report.teacher_labels)
    frozen_preds.append(m.predict(inst.image, frozen, cfg))

print(f"\ndecisions: {engine.ft_count} FT, {engine.et_count} ET, "
      f"{engine.skipped} quarantined; "
      f"{engine.forward_count} encoder forwards = 2 per instance")
print("while the threshold warms up from zero every instance trips full "
      "tuning; once it\ntracks the running loss level, adapter-only tuning "
      "takes over and full tuning\nfires only when an instance's loss pops "
      "above the running average.")

miou_adapted = compute_miou(gts, adapted_preds)
miou_frozen = compute_miou(gts, frozen_preds)
print(f"\nmean IoU over the stream: adapting teacher {miou_adapted:.4f}, "
      f"frozen model {miou_frozen:.4f}")
print("a 48-instance run is deliberately too short to separate the two - the "
      "teacher is\nan EMA that moves a fraction per step. At full scale "
      "(configs/default.cfg: full-\nwidth model, 480 instances) the hybrid "
      "engine finishes ahead of the frozen\nbaseline and both single-mode "
      "variants; see the benchmark recipe in the README.")
