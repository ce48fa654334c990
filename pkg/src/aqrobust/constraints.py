"""Medical-plausibility constraints: bounds, correlations, conditional rules.

Constraints are declared in a human-editable catalog file with three
sections ([bounds], [correlations], [rules]); see FORMATS.md for the
grammar.  All evaluation happens in raw clinical units; `to_raw` / `to_norm`
bridge to the normalized attack space.

The repair loop (`satisfy`) projects each violating feature to its nearest
feasible value, re-fires rules whose guards may have changed, and falls back
to a single coordinate-wise projection pass when it stops making progress.
Outcomes are tagged automatic / iterative / irreconcilable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

AUTOMATIC = "automatic"
ITERATIVE = "iterative"
IRRECONCILABLE = "irreconcilable"

CATEGORY_TAGS = (
    "physiological_bounds",
    "correlation",
    "conditional",
    "temporal_consistency",
    "demographic_validity",
)


class CatalogError(ValueError):
    """Raised with file:line context when a catalog fails to parse."""


class ConstraintError(ValueError):
    pass


def sbp_upper(age_years):
    """Age-adjusted upper bound for systolic blood pressure (mmHg)."""
    if age_years < 60:
        return 140.0
    if age_years < 80:
        return 150.0
    return 160.0


BUILTIN_FUNCS = {
    "sbp_upper": sbp_upper,
    "min": min,
    "max": max,
    "abs": abs,
}


# ---------------------------------------------------------------------------
# Expression language: arithmetic, comparisons, and/or/not over raw feature
# names.  Parsed once into closures over (record, name->index).
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>==|!=|<=|>=|<|>|[-+*/(),]))"
)

_KEYWORDS = {"and", "or", "not", "if", "then"}


def _tokenize(text, where):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise CatalogError(f"{where}: cannot tokenize near {text[pos:pos+12]!r}")
            break
        if m.lastgroup == "num":
            out.append(("num", float(m.group("num"))))
        elif m.lastgroup == "ident":
            word = m.group("ident")
            out.append(("kw", word) if word in _KEYWORDS else ("ident", word))
        else:
            out.append(("op", m.group("op")))
        pos = m.end()
    return out


class _Parser:
    """Recursive-descent parser producing evaluator closures."""

    def __init__(self, tokens, names, where):
        self.toks = tokens
        self.i = 0
        self.names = names          # feature name -> record index
        self.where = where
        self.referenced = set()

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if kind and tok[0] != kind or value is not None and tok[1] != value:
            raise CatalogError(f"{self.where}: expected {value or kind}, got {tok[1]!r}")
        self.i += 1
        return tok

    def done(self):
        if self.i != len(self.toks):
            raise CatalogError(f"{self.where}: trailing tokens after expression")

    def parse_expr(self):
        return self._or()

    def _or(self):
        node = self._and()
        while self.peek() == ("kw", "or"):
            self.take()
            rhs = self._and()
            node = (lambda a, b: lambda x: bool(a(x)) or bool(b(x)))(node, rhs)
        return node

    def _and(self):
        node = self._not()
        while self.peek() == ("kw", "and"):
            self.take()
            rhs = self._not()
            node = (lambda a, b: lambda x: bool(a(x)) and bool(b(x)))(node, rhs)
        return node

    def _not(self):
        if self.peek() == ("kw", "not"):
            self.take()
            inner = self._not()
            return lambda x: not bool(inner(x))
        return self._comparison()

    def _comparison(self):
        lhs = self._arith()
        kind, op = self.peek()
        if kind == "op" and op in ("==", "!=", "<=", ">=", "<", ">"):
            self.take()
            rhs = self._arith()
            fns = {
                "==": lambda a, b: math.isclose(a, b, rel_tol=0, abs_tol=1e-9),
                "!=": lambda a, b: not math.isclose(a, b, rel_tol=0, abs_tol=1e-9),
                "<=": lambda a, b: a <= b + 1e-12,
                ">=": lambda a, b: a >= b - 1e-12,
                "<": lambda a, b: a < b,
                ">": lambda a, b: a > b,
            }
            cmp = fns[op]
            return (lambda a, b, c: lambda x: c(a(x), b(x)))(lhs, rhs, cmp)
        return lhs

    def _arith(self):
        node = self._term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            rhs = self._term()
            if op == "+":
                node = (lambda a, b: lambda x: a(x) + b(x))(node, rhs)
            else:
                node = (lambda a, b: lambda x: a(x) - b(x))(node, rhs)
        return node

    def _term(self):
        node = self._factor()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            rhs = self._factor()
            if op == "*":
                node = (lambda a, b: lambda x: a(x) * b(x))(node, rhs)
            else:
                node = (lambda a, b: lambda x: a(x) / b(x))(node, rhs)
        return node

    def _factor(self):
        kind, val = self.peek()
        if kind == "op" and val == "-":
            self.take()
            inner = self._factor()
            return lambda x: -inner(x)
        if kind == "op" and val == "(":
            self.take()
            node = self.parse_expr()
            self.take("op", ")")
            return node
        if kind == "num":
            self.take()
            return lambda x, v=val: v
        if kind == "ident":
            self.take()
            if self.peek() == ("op", "("):
                if val not in BUILTIN_FUNCS:
                    raise CatalogError(f"{self.where}: unknown function {val!r}")
                self.take()
                args = [self.parse_expr()]
                while self.peek() == ("op", ","):
                    self.take()
                    args.append(self.parse_expr())
                self.take("op", ")")
                fn = BUILTIN_FUNCS[val]
                return (lambda f, a: lambda x: f(*(g(x) for g in a)))(fn, args)
            if val not in self.names:
                raise CatalogError(f"{self.where}: unknown feature {val!r}")
            self.referenced.add(val)
            idx = self.names[val]
            return lambda x, i=idx: x[i]
        raise CatalogError(f"{self.where}: unexpected token {val!r}")


def compile_expr(text, names, where="<expr>"):
    """Compile an expression into (closure, referenced-feature-names)."""
    parser = _Parser(_tokenize(text, where), names, where)
    fn = parser.parse_expr()
    parser.done()
    return fn, parser.referenced


# ---------------------------------------------------------------------------
# Catalog objects
# ---------------------------------------------------------------------------

@dataclass
class Bound:
    feature: str
    index: int
    lo_text: str
    hi_text: str
    lo_fn: object
    hi_fn: object
    depends: set

    def limits(self, record):
        lo = -math.inf if self.lo_fn is None else float(self.lo_fn(record))
        hi = math.inf if self.hi_fn is None else float(self.hi_fn(record))
        if lo > hi:
            raise ConstraintError(f"bound for {self.feature}: lo > hi ({lo} > {hi})")
        return lo, hi


@dataclass
class CorrelationPair:
    feature_i: str
    feature_j: str
    rho_expected: float
    tolerance: float
    kind: str  # "pearson" | "cramers_v"


@dataclass
class Rule:
    rule_id: str
    guard_text: str
    consequence_text: str
    guard: object
    consequence: object
    repair_kind: str             # "clamp" | "set" | "reject"
    repair_target: str = None
    repair_target_idx: int = None
    repair_lo: object = None
    repair_hi: object = None
    repair_value: object = None
    depends: set = field(default_factory=set)

    def violated(self, record):
        return bool(self.guard(record)) and not bool(self.consequence(record))


@dataclass
class ConstraintSet:
    bounds: list
    correlation_pairs: list
    rules: list
    names: dict                  # feature name -> raw record index

    def bound_for(self, index):
        for b in self.bounds:
            if b.index == index:
                return b
        return None


def _question_names(schema):
    return {f.name: i for i, (_, f) in enumerate(schema.question_features())}


def load_catalog(text, schema, source="<catalog>"):
    """Parse a catalog document against a schema; errors carry line numbers."""
    names = _question_names(schema)
    bounds, correlations, rules = [], [], []
    section = None
    seen_ids = set()
    for ln, rawline in enumerate(text.splitlines(), start=1):
        where = f"{source}:{ln}"
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line not in ("[bounds]", "[correlations]", "[rules]"):
                raise CatalogError(f"{where}: unknown section {line}")
            section = line[1:-1]
            continue
        if section is None:
            raise CatalogError(f"{where}: content before any section header")
        if section == "bounds":
            bounds.append(_parse_bound(line, names, where))
        elif section == "correlations":
            correlations.append(_parse_correlation(line, names, where))
        else:
            rule = _parse_rule(line, names, where)
            if rule.rule_id in seen_ids:
                raise CatalogError(f"{where}: duplicate rule id {rule.rule_id!r}")
            seen_ids.add(rule.rule_id)
            rules.append(rule)
    return ConstraintSet(bounds=bounds, correlation_pairs=correlations, rules=rules, names=names)


def load_catalog_file(path, schema):
    with open(path) as fh:
        return load_catalog(fh.read(), schema, source=str(path))


def _parse_bound(line, names, where):
    toks = line.split(maxsplit=1)
    if len(toks) != 2:
        raise CatalogError(f"{where}: bound needs `feature lo hi`")
    feature, rest = toks
    if feature not in names:
        raise CatalogError(f"{where}: unknown feature {feature!r}")
    parts = _split_bound_exprs(rest, where)
    depends = set()

    def compile_part(part):
        nonlocal depends
        if part == "_":
            return None
        fn, refs = compile_expr(part, names, where)
        depends |= refs
        return fn

    lo_fn = compile_part(parts[0])
    hi_fn = compile_part(parts[1])
    return Bound(
        feature=feature,
        index=names[feature],
        lo_text=parts[0],
        hi_text=parts[1],
        lo_fn=lo_fn,
        hi_fn=hi_fn,
        depends=depends,
    )


def _split_bound_exprs(text, where):
    """Split `lo hi` on whitespace at depth zero (parens may hold spaces)."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch.isspace() and depth == 0:
            if cur:
                parts.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        parts.append("".join(cur))
    if len(parts) != 2:
        raise CatalogError(f"{where}: bound needs exactly lo and hi, got {parts}")
    return parts


def _parse_correlation(line, names, where):
    toks = line.split()
    if len(toks) != 5:
        raise CatalogError(f"{where}: correlation needs `f1 f2 rho tau kind`")
    f1, f2, rho, tau, kind = toks
    for f in (f1, f2):
        if f not in names:
            raise CatalogError(f"{where}: unknown feature {f!r}")
    if kind not in ("pearson", "cramers_v"):
        raise CatalogError(f"{where}: kind must be pearson or cramers_v")
    try:
        rho, tau = float(rho), float(tau)
    except ValueError:
        raise CatalogError(f"{where}: rho/tau must be numeric") from None
    if tau <= 0:
        raise CatalogError(f"{where}: tolerance must be positive")
    return CorrelationPair(f1, f2, rho, tau, kind)


def _parse_rule(line, names, where):
    m = re.match(r"^([A-Za-z_][A-Za-z0-9_]*)\s*:\s*if\s+(.*?)\s+then\s+(.*?)\s*;\s*(.*)$", line)
    if not m:
        raise CatalogError(
            f"{where}: rule must look like `id: if GUARD then CONSEQUENCE ; REPAIR`"
        )
    rule_id, guard_text, cons_text, repair_text = m.groups()
    guard, grefs = compile_expr(guard_text, names, where)
    consequence, crefs = compile_expr(cons_text, names, where)
    rule = Rule(
        rule_id=rule_id,
        guard_text=guard_text,
        consequence_text=cons_text,
        guard=guard,
        consequence=consequence,
        repair_kind=None,
        depends=grefs | crefs,
    )
    rtoks = repair_text.split(maxsplit=2)
    if not rtoks:
        raise CatalogError(f"{where}: missing repair")
    kind = rtoks[0]
    if kind == "reject":
        rule.repair_kind = "reject"
        return rule
    if kind not in ("clamp", "set") or len(rtoks) < 3:
        raise CatalogError(f"{where}: repair must be `clamp f lo hi`, `set f expr`, or `reject`")
    target = rtoks[1]
    if target not in names:
        raise CatalogError(f"{where}: unknown repair target {target!r}")
    if target not in (grefs | crefs):
        raise CatalogError(f"{where}: repair target {target!r} not in the rule")
    rule.repair_kind = kind
    rule.repair_target = target
    rule.repair_target_idx = names[target]
    if kind == "set":
        rule.repair_value, refs = compile_expr(rtoks[2], names, where)
        rule.depends |= refs
    else:
        parts = _split_bound_exprs(rtoks[2], where)
        if parts[0] != "_":
            rule.repair_lo, refs = compile_expr(parts[0], names, where)
            rule.depends |= refs
        if parts[1] != "_":
            rule.repair_hi, refs = compile_expr(parts[1], names, where)
            rule.depends |= refs
    return rule


# ---------------------------------------------------------------------------
# Statistics used by correlation constraints
# ---------------------------------------------------------------------------

def pearson(xs, ys):
    """Sample Pearson correlation (n-1 denominators cancel)."""
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.shape != ys.shape or xs.size < 2:
        raise ConstraintError("pearson needs two equal-length vectors, n >= 2")
    xc, yc = xs - xs.mean(), ys - ys.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0:
        raise ConstraintError("pearson undefined for zero-variance input")
    return float((xc * yc).sum() / denom)


def cramers_v(table):
    """Association strength for a contingency table, in [0, 1]."""
    t = np.asarray(table, float)
    if t.ndim != 2 or (t < 0).any():
        raise ConstraintError("contingency table must be 2-D nonnegative")
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.shape[0] < 2 or t.shape[1] < 2:
        raise ConstraintError("need at least 2x2 after removing empty margins")
    n = t.sum()
    expected = np.outer(t.sum(axis=1), t.sum(axis=0)) / n
    chi2 = ((t - expected) ** 2 / expected).sum()
    return float(np.sqrt(chi2 / n / min(t.shape[0] - 1, t.shape[1] - 1)))


# ---------------------------------------------------------------------------
# Checking and repair
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    kind: str                    # "bound" | "rule"
    ident: str
    feature_indices: tuple
    observed: float
    required: str
    applied_repair: str = ""


@dataclass
class ViolationReport:
    violations: list = field(default_factory=list)
    resolution: str = AUTOMATIC
    rounds: int = 0

    @property
    def valid(self):
        return not self.violations


def check(x_raw, cset, schema=None):
    """Per-record check of bounds and conditional rules."""
    x = np.asarray(x_raw, float)
    if x.shape[0] != len(cset.names):
        raise ConstraintError(
            f"record length {x.shape[0]} != schema question count {len(cset.names)}"
        )
    report = ViolationReport()
    for b in cset.bounds:
        lo, hi = b.limits(x)
        v = x[b.index]
        if v < lo - 1e-9 or v > hi + 1e-9:
            report.violations.append(
                Violation("bound", b.feature, (b.index,), float(v), f"[{lo}, {hi}]")
            )
    for rule in cset.rules:
        if rule.violated(x):
            idxs = tuple(sorted(cset.names[n] for n in rule.depends))
            report.violations.append(
                Violation(
                    "rule",
                    rule.rule_id,
                    idxs,
                    float(x[rule.repair_target_idx]) if rule.repair_target_idx is not None else math.nan,
                    f"if {rule.guard_text} then {rule.consequence_text}",
                )
            )
    return report


def check_batch_correlations(rows_raw, cset):
    """Batch-level correlation drift diagnostics (not per-sample repairs)."""
    rows = np.asarray(rows_raw, float)
    out = []
    for pair in cset.correlation_pairs:
        i, j = cset.names[pair.feature_i], cset.names[pair.feature_j]
        if pair.kind == "pearson":
            observed = pearson(rows[:, i], rows[:, j])
        else:
            xs, ys = rows[:, i].astype(int), rows[:, j].astype(int)
            k, r = xs.max() + 1, ys.max() + 1
            table = np.zeros((k, r))
            np.add.at(table, (xs, ys), 1)
            observed = cramers_v(table)
        out.append(
            {
                "pair": (pair.feature_i, pair.feature_j),
                "kind": pair.kind,
                "expected": pair.rho_expected,
                "observed": observed,
                "tolerance": pair.tolerance,
                "ok": abs(observed - pair.rho_expected) < pair.tolerance,
            }
        )
    return out


def _project_bound(value, lo, hi, original):
    """Nearest feasible value; exact-midpoint ties break toward `original`."""
    if value < lo:
        return lo
    if value > hi:
        return hi
    return value


def _apply_rule_repair(rule, x, x_original):
    """Mutate x per the rule's repair; returns a description string."""
    if rule.repair_kind == "set":
        val = float(rule.repair_value(x))
        x[rule.repair_target_idx] = val
        return f"set {rule.repair_target} = {val:g}"
    lo = -math.inf if rule.repair_lo is None else float(rule.repair_lo(x))
    hi = math.inf if rule.repair_hi is None else float(rule.repair_hi(x))
    old = x[rule.repair_target_idx]
    x[rule.repair_target_idx] = min(max(old, lo), hi)
    return f"clamp {rule.repair_target} to [{lo:g}, {hi:g}]"


def satisfy(x_perturbed, x_original, cset, schema=None, max_rounds=10):
    """Repair a perturbed raw record until it satisfies the constraint set.

    Loop: find violations, project each violating feature to its nearest
    feasible value (bound) or apply the rule's declared repair, then re-check
    so repairs can re-fire dependent rules.  If a round makes no progress,
    fall back to one coordinate-wise projection pass; anything still
    violated is tagged irreconcilable and the affected coordinates revert to
    the original clean values.
    """
    x = np.array(x_perturbed, float)
    x_orig = np.asarray(x_original, float)
    report = ViolationReport()
    rejected = False

    for round_no in range(1, max_rounds + 1):
        found = check(x, cset)
        if found.valid:
            report.rounds = round_no - 1
            report.resolution = AUTOMATIC if round_no <= 2 else ITERATIVE
            return x, report
        before = x.copy()
        for v in found.violations:
            if v.kind == "bound":
                b = cset.bound_for(v.feature_indices[0])
                lo, hi = b.limits(x)
                x[b.index] = _project_bound(x[b.index], lo, hi, x_orig[b.index])
                v.applied_repair = f"project {b.feature} into [{lo:g}, {hi:g}]"
            else:
                rule = next(r for r in cset.rules if r.rule_id == v.ident)
                if not rule.violated(x):
                    continue  # an earlier repair in this round already fixed it
                if rule.repair_kind == "reject":
                    rejected = True
                    v.applied_repair = "reject"
                else:
                    v.applied_repair = _apply_rule_repair(rule, x, x_orig)
            report.violations.append(v)
        if rejected or np.array_equal(x, before):
            break
    else:
        round_no = max_rounds

    # Fallback: single coordinate-wise projection with rule-repair precedence.
    if not rejected:
        for rule in cset.rules:
            if rule.violated(x) and rule.repair_kind != "reject":
                _apply_rule_repair(rule, x, x_orig)
        for b in cset.bounds:
            lo, hi = b.limits(x)
            x[b.index] = _project_bound(x[b.index], lo, hi, x_orig[b.index])
        final = check(x, cset)
        if final.valid:
            report.rounds = round_no
            report.resolution = ITERATIVE
            return x, report

    # Irreconcilable: restore the clean values on the offending coordinates.
    final = check(x, cset)
    offending = sorted({i for v in final.violations for i in v.feature_indices})
    if rejected:
        offending = sorted(set(offending) | {
            i for v in report.violations if v.applied_repair == "reject"
            for i in v.feature_indices
        })
    for i in offending:
        x[i] = x_orig[i]
    # Restoring a coordinate can re-tighten bounds that depend on it (e.g. an
    # age-conditional pressure ceiling), so re-project and widen the restored
    # set until the record checks out; the clean record is the sure fallback.
    for _ in range(x.size + 1):
        for b in cset.bounds:
            lo, hi = b.limits(x)
            x[b.index] = _project_bound(x[b.index], lo, hi, x_orig[b.index])
        final = check(x, cset)
        if final.valid:
            break
        for v in final.violations:
            for i in v.feature_indices:
                x[i] = x_orig[i]
    else:
        x = x_orig.copy()
    report.rounds = round_no
    report.resolution = IRRECONCILABLE
    return x, report


# ---------------------------------------------------------------------------
# Raw <-> normalized mapping (delegates the layout to data.ColumnMap)
# ---------------------------------------------------------------------------

CONTINUOUS_KIND = "continuous"


def to_raw(x_norm, schema, colmap=None, strict=True):
    """Normalized column vector -> raw-unit question record.

    With strict=True, continuous columns outside [-1, 1] raise instead of
    being silently clamped.
    """
    from . import data as _data

    colmap = colmap or _data.ColumnMap(schema)
    x_norm = np.asarray(x_norm, float)
    if strict:
        for qi, (_, f) in enumerate(colmap.questions):
            if f.kind == CONTINUOUS_KIND:
                v = x_norm[colmap.groups[qi][0]]
                if v < -1 - 1e-9 or v > 1 + 1e-9:
                    raise ConstraintError(
                        f"{f.name}: normalized value {v} outside [-1, 1]"
                    )
    return colmap.to_raw_row(x_norm)


def to_norm(x_raw, schema, colmap=None):
    """Raw-unit question record -> normalized column vector."""
    from . import data as _data

    colmap = colmap or _data.ColumnMap(schema)
    return colmap.to_norm_row(np.asarray(x_raw, float))
