"""
Training on synthetic scenes
============================

Large rectangles and small squares on noise. A small run here; the full
five-seed comparison is ``run_ablation()`` and takes several minutes.
"""
from gald.ga_heads import GaConfig
from gald.ld_modules import GaldConfig, Ldv2Config
from gald.toy_pipeline import TrainConfig, synth_dataset, train_toy

sample = synth_dataset(0, 1)[0]
print("classes present:", sorted(set(sample.labels.ravel().tolist())))

ga = GaConfig(kind="aspp")
for name, head in (("GA only", GaldConfig(ga=ga, ld=None)), ("GA + LDv2", GaldConfig(ga=ga, ld=Ldv2Config()))):
    report = train_toy(TrainConfig(seed=0, epochs=3, samples=64, eval_samples=16, head=head))
    print(f"{name:10s} loss {report.loss_curve[0]:.3f} -> {report.loss_curve[-1]:.3f}  "
          f"mIoU {report.final_miou:.3f}  boundary F@3 {report.boundary_f['3']:.3f}")
