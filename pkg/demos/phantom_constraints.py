"""Build a desk lung phantom, check its dose against the constraint table, then overdose it.

    python demos/phantom_constraints.py
"""
from dosediff.constraints import compliance_report, cond_loss, default_constraints
from dosediff.evaluation import ci, dvh, dvh_metric, hi
from dosediff.phantom import desk_spec, generate_phantom


def show(title, dose, case, specs):
    rep = compliance_report(dose, case.structures, specs)
    loss, _ = cond_loss(dose, case.structures, specs, mode="hard")
    print(f"{title}: compliance {rep.rate:.2f}, constraint loss {loss.item():.4f}")
    for r in rep.results:
        if not r.passed:
            print(f"  violated {r.spec.label}: {r.achieved:.2f} vs limit {r.limit:.2f}")


case = generate_phantom(desk_spec("lung", seed=3))
specs = default_constraints()
dose = case.dose.to_gy()
ptv = case.structures.primary_ptv()

print(f"case {case.id}: grid {case.grid.shape}, structures {case.structures.names}")
print(f"PTV D95 {dvh_metric(dose, ptv.mask, 'D95'):.2f} Gy, HI {hi(dose, ptv.mask):.3f}, "
      f"CI {ci(dose, ptv.mask, ptv.prescription):.3f}")
cord = case.structures["SpinalCord"].mask
curve = dvh(dose, cord, 1.0, "SpinalCord")
print("cord DVH (Gy: fraction):", ", ".join(f"{e:.0f}: {f:.2f}" for e, f in zip(curve.edges[::10], curve.fractions[::10])))

show("phantom truth", dose, case, specs)
show("doubled dose", 2 * dose, case, specs)
