"""Train the same classifier head on a VAE encoder and on an externally pretrained one.

Both arms freeze the backbone for 30 epochs, then unfreeze its last stage.

Run: python3 demos/03_backbone_comparison.py [out_dir]
"""
import sys
from dataclasses import replace
from pathlib import Path

from dermssl import dynamics, pipeline, plotting
from dermssl.config import ExperimentConfig, SourceConfig
from dermssl.dataset import SplitSpec, split, synth_dataset

out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo-compare")
config = ExperimentConfig.desk_scale()
train, val = split(synth_dataset(300, 16, seed=0), SplitSpec(0.8, seed=0))

pre = pipeline.pretrain(config, train, val, out_dir=out / "pretrain", run_id="desk")
arm_a = replace(config, source=SourceConfig("vae", str(pre.checkpoint)))
arm_b = replace(config, source=SourceConfig("external", None, "standin"))

result = pipeline.compare(arm_a, arm_b, train, val, out_dir=out)
print("head parameters per arm:", result.parity.head_params)

for name, run in (("A (VAE)", result.a), ("B (external)", result.b)):
    unchanged = all(run.checksum_after(e) == run.checksums[0] for e in range(config.stage2.epochs_frozen))
    acc = run.log.series("val_acc")
    print(f"{name:13s} frozen backbone untouched: {unchanged}  val acc @0 {acc[0][1]:.3f} @29 {acc[29][1]:.3f} @70 {acc[70][1]:.3f}")

reports = dynamics.table_report(result.a.log, result.b.log)
print(dynamics.render_table(reports))
print("plot:", plotting.plot_comparison(result.a.log, result.b.log, out / "dynamics.png", unfreeze_epoch=30))
