"""Dataset ingestion, preprocessing, and a synthetic tabular generator.

The pipeline is: raw CSV -> typed RawTable -> imputation -> encoding and
min-max normalization to [-1, 1] -> Dataset.  Categorical features with two
categories map to a single +-1 column; wider categoricals one-hot into one
+-1 column per category.  A question may own several derived columns; the
`question_groups` map keeps the reveal semantics (one mask bit per original
question).
"""

from __future__ import annotations

import csv
import re
import io
import json
from dataclasses import dataclass, field

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
YEAR = "year"

MISSING_TOKENS = {"", "na", "nan", "none", "null", "?"}


class DataError(ValueError):
    pass


class SchemaError(DataError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    lo: float = None
    hi: float = None
    cardinality: int = None
    unit: str = ""
    is_label: bool = False

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if self.lo is None or self.hi is None or not (self.lo < self.hi):
                raise SchemaError(f"{self.name}: continuous feature needs lo < hi")
        elif self.kind == CATEGORICAL:
            if not self.cardinality or self.cardinality < 2:
                raise SchemaError(f"{self.name}: categorical needs cardinality >= 2")
        elif self.kind != YEAR:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class Schema:
    features: tuple

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if sum(f.is_label for f in self.features) != 1:
            raise SchemaError("schema needs exactly one label feature")
        if sum(f.kind == YEAR for f in self.features) > 1:
            raise SchemaError("at most one year feature")

    @property
    def names(self):
        return [f.name for f in self.features]

    @property
    def label_index(self):
        return next(i for i, f in enumerate(self.features) if f.is_label)

    @property
    def year_index(self):
        for i, f in enumerate(self.features):
            if f.kind == YEAR:
                return i
        return None

    def question_features(self):
        """(schema index, FeatureSpec) for everything the agent can ask."""
        return [
            (i, f)
            for i, f in enumerate(self.features)
            if not f.is_label and f.kind != YEAR
        ]

    def index_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature {name!r}") from None


class ColumnMap:
    """Layout of normalized columns derived from a schema's questions.

    - continuous and binary-categorical questions own one column;
    - categorical questions with k > 2 own k one-hot columns.
    """

    def __init__(self, schema):
        self.schema = schema
        self.questions = schema.question_features()
        self.col_names = []
        self.groups = []            # per question: list of column indices
        self.col_feature = []       # per column: index into self.questions
        for qi, (_, f) in enumerate(self.questions):
            width = 1 if f.kind == CONTINUOUS or f.cardinality == 2 else f.cardinality
            start = len(self.col_names)
            self.groups.append(list(range(start, start + width)))
            if width == 1:
                self.col_names.append(f.name)
            else:
                self.col_names.extend(f"{f.name}={c}" for c in range(width))
            self.col_feature.extend([qi] * width)

    @property
    def n_cols(self):
        return len(self.col_names)

    @property
    def n_questions(self):
        return len(self.questions)

    def to_norm_row(self, raw):
        """Raw question-feature vector (raw units) -> normalized columns."""
        out = np.zeros(self.n_cols)
        for qi, (_, f) in enumerate(self.questions):
            cols = self.groups[qi]
            v = raw[qi]
            if f.kind == CONTINUOUS:
                out[cols[0]] = 2.0 * (v - f.lo) / (f.hi - f.lo) - 1.0
            elif f.cardinality == 2:
                out[cols[0]] = 2.0 * v - 1.0
            else:
                out[cols] = -1.0
                out[cols[int(round(v))]] = 1.0
        return out

    def to_raw_row(self, norm):
        """Normalized columns -> raw question-feature vector."""
        out = np.zeros(self.n_questions)
        for qi, (_, f) in enumerate(self.questions):
            cols = self.groups[qi]
            if f.kind == CONTINUOUS:
                out[qi] = f.lo + (norm[cols[0]] + 1.0) / 2.0 * (f.hi - f.lo)
            elif f.cardinality == 2:
                out[qi] = (norm[cols[0]] + 1.0) / 2.0
            else:
                out[qi] = int(np.argmax(norm[cols]))
        return out


@dataclass
class RawTable:
    """Typed raw-unit values, one row per record, one column per feature.

    Missing cells are NaN.  `flagged` lists (line, feature, message) for
    values outside the declared raw range; they are kept, not silently
    clamped.
    """

    schema: Schema
    values: np.ndarray
    flagged: list = field(default_factory=list)


def read_schema(path):
    """Parse a schema file; see FORMATS.md for the grammar."""
    feats = []
    with open(path) as fh:
        lines = fh.readlines()
    in_section = False
    for ln, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if text.startswith("["):
            if text != "[features]":
                raise SchemaError(f"{path}:{ln}: unknown section {text}")
            in_section = True
            continue
        if not in_section:
            raise SchemaError(f"{path}:{ln}: feature line before [features]")
        feats.append(_parse_feature_line(text, f"{path}:{ln}"))
    return Schema(tuple(feats))


def _parse_feature_line(text, where):
    toks = text.split()
    name = toks[0]
    rest = toks[1:]
    is_label = "label" in rest
    rest = [t for t in rest if t != "label"]
    if not rest:
        raise SchemaError(f"{where}: feature {name} has no kind")
    kind = rest[0]
    try:
        if kind == CONTINUOUS:
            lo, hi = float(rest[1]), float(rest[2])
            unit = rest[3] if len(rest) > 3 else ""
            return FeatureSpec(name, CONTINUOUS, lo=lo, hi=hi, unit=unit, is_label=is_label)
        if kind == CATEGORICAL:
            return FeatureSpec(name, CATEGORICAL, cardinality=int(rest[1]), is_label=is_label)
        if kind == YEAR:
            return FeatureSpec(name, YEAR)
    except (IndexError, ValueError) as exc:
        raise SchemaError(f"{where}: bad feature line {text!r} ({exc})") from None
    raise SchemaError(f"{where}: unknown kind {kind!r}")


def write_schema(schema, path):
    with open(path, "w") as fh:
        fh.write("[features]\n")
        for f in schema.features:
            if f.kind == CONTINUOUS:
                parts = [f.name, f.kind, repr(f.lo), repr(f.hi)]
                if f.unit:
                    parts.append(f.unit)
            elif f.kind == CATEGORICAL:
                parts = [f.name, f.kind, str(f.cardinality)]
            else:
                parts = [f.name, f.kind]
            if f.is_label:
                parts.append("label")
            fh.write(" ".join(parts) + "\n")


def load_csv(path, schema):
    """Parse a CSV into a RawTable; malformed cells abort with locations."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if sorted(header) != sorted(schema.names):
            raise DataError(f"{path}: header does not match schema: {header}")
        order = [header.index(n) for n in schema.names]

        rows, flagged, errors = [], [], []
        for ln, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                errors.append(f"{path}:{ln}: expected {len(header)} cells, got {len(cells)}")
                continue
            row = np.full(len(schema.features), np.nan)
            for fi, f in enumerate(schema.features):
                cell = cells[order[fi]].strip()
                if cell.lower() in MISSING_TOKENS:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    errors.append(f"{path}:{ln}: column {f.name!r}: not a number: {cell!r}")
                    continue
                if f.kind == CATEGORICAL:
                    if v != int(v) or not 0 <= v < f.cardinality:
                        errors.append(
                            f"{path}:{ln}: column {f.name!r}: invalid category {cell!r}"
                        )
                        continue
                elif f.kind == CONTINUOUS and not (f.lo <= v <= f.hi):
                    flagged.append((ln, f.name, f"value {v} outside [{f.lo}, {f.hi}]"))
                row[fi] = v
            rows.append(row)
        if errors:
            raise DataError("; ".join(errors[:20]))
    values = np.array(rows) if rows else np.zeros((0, len(schema.features)))
    return RawTable(schema=schema, values=values, flagged=flagged)


def write_csv(table, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.schema.names)
        for row in table.values:
            out = []
            for f, v in zip(table.schema.features, row):
                if np.isnan(v):
                    out.append("")
                elif f.kind == CONTINUOUS:
                    out.append(repr(float(v)))
                else:
                    out.append(str(int(v)))
            writer.writerow(out)


def impute(table, schema, stats=None):
    """Fill missing cells: median (continuous), mode (categorical).

    `stats` maps feature name -> fill value; pass the training result when
    imputing a test partition so no test information leaks in.  Returns
    (table, stats).
    """
    values = table.values.copy()
    if stats is None:
        stats = {}
        for fi, f in enumerate(schema.features):
            col = values[:, fi]
            present = col[~np.isnan(col)]
            if present.size == 0:
                raise DataError(f"column {f.name!r} is entirely missing")
            if f.kind == CONTINUOUS:
                stats[f.name] = float(np.median(present))
            else:
                cats, counts = np.unique(present, return_counts=True)
                stats[f.name] = float(cats[np.argmax(counts)])
    for fi, f in enumerate(schema.features):
        col = values[:, fi]
        col[np.isnan(col)] = stats[f.name]
    return RawTable(schema=schema, values=values, flagged=list(table.flagged)), stats


@dataclass
class Dataset:
    """Normalized rows in [-1, 1], binary labels, optional year column."""

    schema: Schema
    rows: np.ndarray
    labels: np.ndarray
    years: np.ndarray = None
    colmap: ColumnMap = None

    def __post_init__(self):
        if self.colmap is None:
            self.colmap = ColumnMap(self.schema)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]


def encode_and_normalize(table, schema):
    """Imputed RawTable -> Dataset of [-1, 1] columns plus labels/years."""
    if np.isnan(table.values).any():
        raise DataError("table has missing values; impute first")
    colmap = ColumnMap(schema)
    qi_slots = [i for i, _ in schema.question_features()]
    raw_q = table.values[:, qi_slots]
    rows = np.stack([colmap.to_norm_row(r) for r in raw_q]) if table.values.size else np.zeros((0, colmap.n_cols))
    labels = table.values[:, schema.label_index].astype(int)
    years = None
    if schema.year_index is not None:
        years = table.values[:, schema.year_index].astype(int)
    return Dataset(schema=schema, rows=rows, labels=labels, years=years, colmap=colmap)


def drop_correlated(dataset, threshold=0.95):
    """Drop the later feature of any pair whose |Pearson rho| > threshold.

    Works at the question level: if any column of feature B correlates past
    the threshold with any column of an earlier feature A, all of B goes.
    Returns (new dataset, dropped feature names).
    """
    if dataset.colmap.n_questions < 2:
        return dataset, []
    rows = dataset.rows
    std = rows.std(axis=0)
    keep_col = std > 0
    corr = np.zeros((dataset.d, dataset.d))
    idx = np.where(keep_col)[0]
    if idx.size >= 2:
        corr[np.ix_(idx, idx)] = np.corrcoef(rows[:, idx].T)
    dropped = set()
    groups = dataset.colmap.groups
    for qa in range(len(groups)):
        if qa in dropped:
            continue
        for qb in range(qa + 1, len(groups)):
            if qb in dropped:
                continue
            block = np.abs(corr[np.ix_(groups[qa], groups[qb])])
            if block.size and block.max() > threshold:
                dropped.add(qb)
    if not dropped:
        return dataset, []
    questions = dataset.colmap.questions
    dropped_names = [questions[q][1].name for q in sorted(dropped)]
    kept_feats = tuple(
        f
        for i, f in enumerate(dataset.schema.features)
        if f.name not in dropped_names
    )
    new_schema = Schema(kept_feats)
    keep_cols = [
        c for q, cols in enumerate(groups) if q not in dropped for c in cols
    ]
    new = Dataset(
        schema=new_schema,
        rows=rows[:, keep_cols],
        labels=dataset.labels,
        years=dataset.years,
    )
    return new, dropped_names


def temporal_split(dataset, train_years, test_years):
    """Partition rows by year membership; rows in neither set are dropped."""
    if dataset.years is None:
        raise DataError("dataset has no year feature")
    train_years, test_years = set(train_years), set(test_years)
    if not test_years or not train_years:
        raise DataError("year sets must be nonempty")
    if train_years & test_years:
        raise DataError(f"overlapping year sets: {sorted(train_years & test_years)}")
    in_train = np.isin(dataset.years, sorted(train_years))
    in_test = np.isin(dataset.years, sorted(test_years))
    excluded = int((~in_train & ~in_test).sum())

    def subset(mask):
        return Dataset(
            schema=dataset.schema,
            rows=dataset.rows[mask],
            labels=dataset.labels[mask],
            years=dataset.years[mask],
            colmap=dataset.colmap,
        )

    return subset(in_train), subset(in_test), excluded


def save_dataset(dataset, path):
    meta = {
        "schema": [
            {
                "name": f.name,
                "kind": f.kind,
                "lo": f.lo,
                "hi": f.hi,
                "cardinality": f.cardinality,
                "unit": f.unit,
                "is_label": f.is_label,
            }
            for f in dataset.schema.features
        ]
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        rows=dataset.rows,
        labels=dataset.labels,
        years=dataset.years if dataset.years is not None else np.zeros(0, dtype=int),
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        schema = Schema(tuple(FeatureSpec(**d) for d in meta["schema"]))
        years = data["years"]
        return Dataset(
            schema=schema,
            rows=data["rows"],
            labels=data["labels"],
            years=years if years.size else None,
        )


# ---------------------------------------------------------------------------
# Synthetic generator: a desk-scale stand-in with clinically named features
# so every constraint path (bounds, conditional rules, planted correlation)
# is exercisable without restricted data.
# ---------------------------------------------------------------------------

CLINICAL_FEATURES = [
    FeatureSpec("age", CONTINUOUS, lo=18, hi=85, unit="years"),
    FeatureSpec("sex", CATEGORICAL, cardinality=2),          # 0=male, 1=female
    FeatureSpec("pregnant", CATEGORICAL, cardinality=2),
    FeatureSpec("diabetes", CATEGORICAL, cardinality=2),
    FeatureSpec("glucose", CONTINUOUS, lo=60, hi=400, unit="mg/dL"),
    FeatureSpec("sbp", CONTINUOUS, lo=80, hi=200, unit="mmHg"),
    FeatureSpec("bmi", CONTINUOUS, lo=15, hi=45, unit="kg/m2"),
    FeatureSpec("smoking", CATEGORICAL, cardinality=2),
    FeatureSpec("copd", CATEGORICAL, cardinality=2),
    FeatureSpec("occupational_exposure", CATEGORICAL, cardinality=2),
]


@dataclass
class SynthResult:
    dataset: Dataset
    table: RawTable
    weights: np.ndarray          # ground-truth logits weights, one per column
    catalog_text: str            # matching constraint catalog


def synth_schema(d):
    """Schema with `d` question features plus a label and a year column."""
    if d < 2:
        raise DataError("need at least 2 features")
    feats = []
    if d >= len(CLINICAL_FEATURES) + 2:
        feats.extend(CLINICAL_FEATURES)
    k = len(feats)
    g = 0
    while len(feats) < d:
        if g % 4 == 3 and k == 0:
            feats.append(FeatureSpec(f"flag_{g}", CATEGORICAL, cardinality=2))
        else:
            feats.append(FeatureSpec(f"g{g}", CONTINUOUS, lo=0.0, hi=1.0))
        g += 1
    feats.append(FeatureSpec("high_risk", CATEGORICAL, cardinality=2, is_label=True))
    feats.append(FeatureSpec("survey_year", YEAR))
    return Schema(tuple(feats))


def _sbp_upper(age):
    return np.where(age < 60, 140.0, np.where(age < 80, 150.0, 160.0))


def synth_generate(d, n, seed, difficulty=0.0):
    """Generate a synthetic cohort.

    Plants a strongly correlated continuous pair and the conditional
    structures the reference catalog checks (diabetes -> elevated glucose,
    pregnancy only for women of child-bearing age, COPD only with smoking or
    occupational exposure).  Labels come from a sparse logistic score;
    `difficulty` scales the label noise (0 = cleanly separable).
    """
    schema = synth_schema(d)
    rng = np.random.default_rng(seed)
    colmap = ColumnMap(schema)
    qnames = [f.name for _, f in schema.question_features()]
    raw = np.zeros((n, len(qnames)))
    col = {name: i for i, name in enumerate(qnames)}

    clinical = "age" in col
    if clinical:
        age = rng.uniform(18, 85, n)
        sex = (rng.random(n) < 0.5).astype(float)
        preg = ((sex == 1) & (age >= 15) & (age <= 50) & (rng.random(n) < 0.15)).astype(float)
        diab = (rng.random(n) < 0.2).astype(float)
        glucose = np.where(diab == 1, rng.uniform(130, 300, n), rng.uniform(70, 124, n))
        sbp = rng.uniform(90, _sbp_upper(age) - 2.0)
        bmi = np.where(age <= 30, rng.uniform(22.5, 44, n), rng.uniform(16, 44, n))
        smoke = (rng.random(n) < 0.35).astype(float)
        occ = (rng.random(n) < 0.2).astype(float)
        copd = (((smoke == 1) | (occ == 1)) & (rng.random(n) < 0.35)).astype(float)
        for name, vals in [
            ("age", age), ("sex", sex), ("pregnant", preg), ("diabetes", diab),
            ("glucose", glucose), ("sbp", sbp), ("bmi", bmi), ("smoking", smoke),
            ("copd", copd), ("occupational_exposure", occ),
        ]:
            raw[:, col[name]] = vals

    generics = [name for name in qnames if re.fullmatch(r"g\d+|flag_\d+", name)]
    for name in generics:
        if name.startswith("flag_"):
            raw[:, col[name]] = (rng.random(n) < 0.4).astype(float)
        else:
            raw[:, col[name]] = rng.uniform(0, 1, n)
    # planted correlated pair: the last two generic continuous features
    cont_gen = [name for name in generics if not name.startswith("flag_")]
    if len(cont_gen) >= 2:
        a, b = cont_gen[-2], cont_gen[-1]
        noise = rng.uniform(0, 1, n)
        raw[:, col[b]] = np.clip(0.92 * raw[:, col[a]] + 0.08 * noise, 0, 1)

    rows = np.stack([colmap.to_norm_row(r) for r in raw])

    # sparse ground-truth weights over normalized columns
    weights = np.zeros(colmap.n_cols)
    informative = []
    if clinical:
        informative += ["age", "bmi", "glucose", "diabetes", "smoking"]
    informative += cont_gen[:4]
    cname = {name: i for i, name in enumerate(colmap.col_names)}
    w_rng = np.random.default_rng(seed + 1)
    for name in informative:
        if name in cname:
            weights[cname[name]] = w_rng.choice([-1.0, 1.0]) * w_rng.uniform(1.0, 2.0)
    score = rows @ weights
    score = score - np.median(score)
    labels = (score + difficulty * rng.normal(size=n) > 0).astype(int)

    years = rng.integers(2005, 2012, size=n)
    full = np.zeros((n, len(schema.features)))
    qi_slots = [i for i, _ in schema.question_features()]
    full[:, qi_slots] = raw
    full[:, schema.label_index] = labels
    full[:, schema.year_index] = years
    table = RawTable(schema=schema, values=full)
    dataset = Dataset(schema=schema, rows=rows, labels=labels, years=years, colmap=colmap)
    return SynthResult(
        dataset=dataset,
        table=table,
        weights=weights,
        catalog_text=synth_catalog_text(schema),
    )


def synth_catalog_text(schema):
    """Constraint catalog covering the structures the generator plants."""
    lines = ["[bounds]"]
    for _, f in schema.question_features():
        if f.kind == CONTINUOUS:
            if f.name == "sbp":
                lines.append("sbp 80 sbp_upper(age)")
            else:
                lines.append(f"{f.name} {f.lo!r} {f.hi!r}")
    lines.append("")
    lines.append("[correlations]")
    names = [f.name for _, f in schema.question_features()]
    cont_gen = [n for n in names if re.fullmatch(r"g\d+", n)]
    if len(cont_gen) >= 2:
        lines.append(f"{cont_gen[-2]} {cont_gen[-1]} 0.9 0.25 pearson")
    lines.append("")
    lines.append("[rules]")
    if "diabetes" in names:
        lines.append(
            "diabetic_glucose: if diabetes == 1 then glucose >= 126 ; clamp glucose 140 _"
        )
        lines.append(
            "pregnancy_gender: if pregnant == 1 then sex == 1 and age >= 15 and age <= 50 ; set pregnant 0"
        )
        lines.append(
            "copd_exposure: if copd == 1 then smoking == 1 or occupational_exposure == 1 ; set smoking 1"
        )
        lines.append(
            "young_adult_bmi: if age <= 30 then bmi >= 22.5 ; clamp bmi 22.5 _"
        )
    return "\n".join(lines) + "\n"
