"""The constraint engine: what keeps adversarial answers medically plausible.

An attacker perturbs normalized features, but the perturbed record still has
to describe a possible patient.  The catalog encodes bounds (some depending
on other answers), cross-feature correlations, and conditional rules with
declared repairs.  This script walks through checking, repairing, and the
unit conversions between normalized and raw records.
"""

import importlib.resources as res

import numpy as np

from aqrobust import constraints, data

pkg = res.files("aqrobust") / "data"
schema = data.read_schema(pkg / "reference_schema.txt")
cset = constraints.load_catalog_file(pkg / "reference_catalog.txt", schema)
colmap = data.ColumnMap(schema)
names = [f.name for _, f in schema.question_features()]

# ---------------------------------------------------------------------------
# 1. A plausible patient: 45 years old, diabetic, glucose 150.
# ---------------------------------------------------------------------------
patient = np.array([45.0, 1.0, 0.0, 1.0, 150.0, 130.0, 27.0, 0.0, 0.0, 0.0])
report = constraints.check(patient, cset, schema)
print("clean record valid:", report.valid)

# ---------------------------------------------------------------------------
# 2. An adversarial edit can break a conditional rule: pushing glucose down
#    to 90 contradicts the recorded diabetes diagnosis.  The catalog's
#    declared repair clamps glucose back to a diabetic value.
# ---------------------------------------------------------------------------
attacked = patient.copy()
attacked[names.index("glucose")] = 90.0
report = constraints.check(attacked, cset, schema)
print("\nafter the edit:")
for v in report.violations:
    print(f"  {v.ident}: observed {v.observed}, required {v.required}")

repaired, rep = constraints.satisfy(attacked, patient, cset, schema)
print(f"repaired glucose: {repaired[names.index('glucose')]:.0f} "
      f"(resolution: {rep.resolution})")

# ---------------------------------------------------------------------------
# 3. Bounds can depend on other answers.  The systolic ceiling rises with
#    age, so the same pressure reading can be valid for one patient and
#    out of range for another.
# ---------------------------------------------------------------------------
print("\nage-conditional systolic ceiling:")
for age in (45.0, 65.0, 85.0):
    print(f"  age {age:.0f}: sbp <= {constraints.sbp_upper(age):.0f}")

# ---------------------------------------------------------------------------
# 4. Attacks operate on normalized features in [-1, 1]; the catalog speaks
#    raw units.  A normalized offset eps moves a feature by
#    eps * (hi - lo) / 2 raw units.
# ---------------------------------------------------------------------------
norm = constraints.to_norm(patient, schema, colmap)
back = constraints.to_raw(norm, schema, colmap)
print("\nroundtrip error:", float(np.max(np.abs(back - patient))))
for name, eps in [("age", 0.3), ("bmi", 0.5), ("sbp", 0.4)]:
    f = schema.features[schema.index_of(name)]
    print(f"  eps={eps} on {name}: {eps * (f.hi - f.lo) / 2:g} {f.unit}")

# ---------------------------------------------------------------------------
# 5. Contradictory requirements cannot be repaired; the engine reports them
#    as irreconcilable and falls back to the original answers.
# ---------------------------------------------------------------------------
contradictory = constraints.load_catalog(
    "[rules]\n"
    "up: if diabetes == 1 then glucose >= 300 ; clamp glucose 300 _\n"
    "down: if diabetes == 1 then glucose <= 200 ; clamp glucose _ 200\n",
    schema)
_, rep = constraints.satisfy(patient.copy(), patient, contradictory)
print("\ncontradictory catalog resolution:", rep.resolution)
