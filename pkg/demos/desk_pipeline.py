"""Short desk-scale run of the whole pipeline: phantoms, VAE, diffusion, prediction, report.

Step counts are far below the acceptance settings so this finishes in a few
minutes on a CPU; expect a rough dose, not a good one.

    python demos/desk_pipeline.py [workdir]
"""
import sys
from pathlib import Path

from dosediff.constraints import default_constraints
from dosediff.evaluation import evaluate_case, write_report
from dosediff.phantom import phantom_cohort
from dosediff.training import TrainConfig, load_pipeline, predict, pretrain_vae, reconstruction_l1, train_diffusion
from dosediff.volumes import Case

work = Path(sys.argv[1] if len(sys.argv) > 1 else "desk_run")
cases = phantom_cohort(4, seed=0)

vae, vae_hist = pretrain_vae(cases, TrainConfig(stage="vae", desk=True, seed=0, epochs=40), out=work / "vae")
print(f"VAE: {len(vae_hist)} epochs, CT L1 {reconstruction_l1(vae, cases):.4f}, "
      f"dose L1 {reconstruction_l1(vae, cases, 'dose'):.5f}")

cfg = TrainConfig(stage="diffusion", desk=True, seed=0, max_steps=200, val_fraction=0.0)
_, hist = train_diffusion(cases, vae, cfg, out=work / "diffusion")
print(f"diffusion: {len(hist)} epochs, final mse {hist.rows[-1]['mse']:.4f}, cond {hist.rows[-1]['cond']:.4f}")

pipe = load_pipeline(work / "diffusion")
specs = default_constraints()
for c in cases:
    pred = Case(c.id, c.ct, c.structures, predict(pipe, c, seed=0), c.technique, c.site, c.prescription, c.extra)
    rep = evaluate_case(pred, c, specs)
    write_report(rep, work / "reports", pred)
    print(f"{c.id}: MAE {rep.mae:.4f}, Dice {rep.dice:.3f}, HD95 {rep.hd95:.1f} mm, "
          f"compliance {rep.compliance.rate:.2f} (reference {rep.reference_compliance.rate:.2f})")
print(f"reports in {work / 'reports'}")
