"""Cohort construction, demographics, patient-grouped splits and leakage checks."""
from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class CohortError(ValueError):
    """Base class for cohort construction failures."""


class SchemaError(CohortError):
    def __init__(self, column: str, source: str = "metadata"):
        super().__init__(f"{source}: missing required column {column!r}")
        self.column = column
        self.source = source


class EmptyCohortError(CohortError):
    pass


class Label(str, Enum):
    REDUCED = "reduced"
    PRESERVED = "preserved"

    @property
    def display(self) -> str:
        return "Reduced EF" if self is Label.REDUCED else "Preserved EF"


class Sex(str, Enum):
    MALE = "M"
    FEMALE = "F"
    UNKNOWN = ""

    @property
    def display(self) -> str:
        return {"M": "Male", "F": "Female", "": "Unknown"}[self.value]


class Race(str, Enum):
    # reporting categories, in display order
    AMERICAN_INDIAN = "American Indian/Alaska Native"
    ASIAN = "Asian"
    BLACK = "Black"
    HISPANIC = "Hispanic/Latino"
    OTHER = "Other"
    UNKNOWN = "Unknown"
    UNABLE = "Unable to Obtain"
    MULTIPLE = "Multiple Race/Ethnicity"
    DECLINED = "Declined to answer"
    WHITE = "White/Caucasian"

    @property
    def display(self) -> str:
        return self.value


# MIMIC race strings are "GROUP - SUBGROUP"; matched by prefix after upper-casing.
_RACE_PREFIXES = [
    ("AMERICAN INDIAN", Race.AMERICAN_INDIAN),
    ("ASIAN", Race.ASIAN),
    ("BLACK", Race.BLACK),
    ("HISPANIC", Race.HISPANIC),
    ("SOUTH AMERICAN", Race.HISPANIC),
    ("WHITE", Race.WHITE),
    ("PORTUGUESE", Race.WHITE),
    ("UNABLE TO OBTAIN", Race.UNABLE),
    ("MULTIPLE RACE", Race.MULTIPLE),
    ("PATIENT DECLINED", Race.DECLINED),
    ("DECLINED", Race.DECLINED),
    ("UNKNOWN", Race.UNKNOWN),
    ("OTHER", Race.OTHER),
]


def parse_race(value: str | None) -> Race:
    """Map a source race/ethnicity string onto the fixed category list.

    Empty values are ``Unknown``; unrecognised strings become ``Other``
    with a warning.
    """
    if value is None:
        return Race.UNKNOWN
    text = str(value).strip()
    if not text:
        return Race.UNKNOWN
    for race in Race:
        if text == race.value:
            return race
    upper = text.upper()
    for prefix, race in _RACE_PREFIXES:
        if upper.startswith(prefix):
            return race
    logger.warning("unrecognised race/ethnicity %r mapped to Other", text)
    return Race.OTHER


def parse_sex(value: str | None) -> Sex:
    text = "" if value is None else str(value).strip().upper()
    if text in ("M", "MALE"):
        return Sex.MALE
    if text in ("F", "FEMALE"):
        return Sex.FEMALE
    return Sex.UNKNOWN


def parse_label(value: str) -> Label:
    text = str(value).strip().lower()
    aliases = {"reduced": Label.REDUCED, "hfref": Label.REDUCED,
               "preserved": Label.PRESERVED, "hfpef": Label.PRESERVED}
    try:
        return aliases[text]
    except KeyError:
        raise CohortError(f"unresolvable EF label {value!r}") from None


def _parse_age(value) -> int | None:
    if value is None:
        return None
    text = str(value).strip()
    if not text:
        return None
    return int(round(float(text)))


@dataclass(frozen=True)
class CohortRecord:
    study_id: str
    patient_id: str
    image_ref: str
    label: Label
    age: int | None = None
    sex: Sex = Sex.UNKNOWN
    race_ethnicity: Race = Race.UNKNOWN


@dataclass
class CohortManifest:
    records: list[CohortRecord]
    provenance: str = ""
    created_at: str = field(
        default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.study_id in seen:
                raise CohortError(f"duplicate study_id {rec.study_id!r}")
            seen.add(rec.study_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_study(self) -> dict[str, CohortRecord]:
        return {r.study_id: r for r in self.records}

    def label_counts(self) -> dict[Label, int]:
        counts = Counter(r.label for r in self.records)
        return {lab: counts.get(lab, 0) for lab in Label}

    def subset(self, study_ids: Iterable[str]) -> list[CohortRecord]:
        wanted = set(study_ids)
        return [r for r in self.records if r.study_id in wanted]


def normalize_icd(code: str) -> str:
    return str(code).strip().upper().replace(".", "")


@dataclass(frozen=True)
class IcdLabelMap:
    reduced_codes: frozenset[str]
    preserved_codes: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "reduced_codes", frozenset(normalize_icd(c) for c in self.reduced_codes))
        object.__setattr__(self, "preserved_codes", frozenset(normalize_icd(c) for c in self.preserved_codes))
        overlap = self.reduced_codes & self.preserved_codes
        if overlap:
            raise CohortError(f"ICD codes mapped to both labels: {sorted(overlap)}")

    @classmethod
    def read_csv(cls, path) -> "IcdLabelMap":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"ICD map file not found: {path}")
        reduced, preserved = set(), set()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for col in ("code", "label"):
                if col not in (reader.fieldnames or []):
                    raise SchemaError(col, source=str(path))
            for row in reader:
                label = parse_label(row["label"])
                (reduced if label is Label.REDUCED else preserved).add(row["code"])
        return cls(frozenset(reduced), frozenset(preserved))


METADATA_COLUMNS = ("study_id", "patient_id", "image_ref", "icd_codes", "age", "sex", "race_ethnicity")


def _split_codes(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple, set, frozenset)):
        return [normalize_icd(c) for c in value if str(c).strip()]
    text = str(value)
    for sep in ("|", ","):
        text = text.replace(sep, ";")
    return [normalize_icd(c) for c in text.split(";") if c.strip()]


@dataclass
class CohortBuildResult:
    manifest: CohortManifest
    conflicts: int
    unmatched: int
    conflict_study_ids: list[str]


def build_cohort(rows: Iterable[Mapping], icd_map: IcdLabelMap, provenance: str = "") -> CohortBuildResult:
    """Keep studies whose code list hits exactly one of the two code sets.

    ``rows`` need the columns in ``METADATA_COLUMNS``; ``icd_codes`` is a
    ``;``-separated string or a sequence.  Studies carrying codes from both
    sets are excluded and tallied, never resolved.
    """
    records: list[CohortRecord] = []
    conflict_ids: list[str] = []
    unmatched = 0
    checked = False
    for row in rows:
        if not checked:
            for col in METADATA_COLUMNS:
                if col not in row:
                    raise SchemaError(col)
            checked = True
        codes = set(_split_codes(row["icd_codes"]))
        hit_reduced = bool(codes & icd_map.reduced_codes)
        hit_preserved = bool(codes & icd_map.preserved_codes)
        if hit_reduced and hit_preserved:
            conflict_ids.append(str(row["study_id"]))
            continue
        if not (hit_reduced or hit_preserved):
            unmatched += 1
            continue
        records.append(CohortRecord(
            study_id=str(row["study_id"]),
            patient_id=str(row["patient_id"]),
            image_ref=str(row["image_ref"]),
            label=Label.REDUCED if hit_reduced else Label.PRESERVED,
            age=_parse_age(row["age"]),
            sex=parse_sex(row["sex"]),
            race_ethnicity=parse_race(row["race_ethnicity"]),
        ))
    if not checked:
        raise EmptyCohortError("metadata has no rows")
    if not records:
        raise EmptyCohortError(
            f"no study matched exactly one ICD code set ({len(conflict_ids)} conflicts, {unmatched} unmatched)")
    manifest = CohortManifest(records, provenance=provenance)
    return CohortBuildResult(manifest, len(conflict_ids), unmatched, conflict_ids)


def read_metadata_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metadata file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in METADATA_COLUMNS:
            if col not in (reader.fieldnames or []):
                raise SchemaError(col, source=str(path))
        return list(reader)


def mimic_metadata_rows(record_list, diagnoses, patients, admissions) -> list[dict]:
    """Flatten MIMIC-CXR-JPG + MIMIC-IV tables into metadata rows.

    ``record_list`` is ``cxr-record-list.csv(.gz)`` (subject_id, study_id,
    dicom_id, path); ``diagnoses`` is ``hosp/diagnoses_icd``; ``patients``
    and ``admissions`` supply gender/anchor_age and race.  Diagnoses are
    linked per subject unless the record list carries ``hadm_id``, in which
    case they are linked per admission.  Only the first image of each study
    is kept.
    """
    import pandas as pd

    rec = pd.read_csv(record_list, dtype=str)
    dx = pd.read_csv(diagnoses, dtype=str)
    pts = pd.read_csv(patients, dtype=str)
    adm = pd.read_csv(admissions, dtype=str)

    rec = rec.sort_values(["study_id", "dicom_id"]).drop_duplicates("study_id")
    key = "hadm_id" if "hadm_id" in rec.columns and "hadm_id" in dx.columns else "subject_id"
    codes = (dx.assign(icd_code=dx["icd_code"].map(normalize_icd))
               .groupby(key)["icd_code"].agg(lambda s: ";".join(sorted(set(s)))))
    race = adm.sort_values("admittime").groupby("subject_id")["race"].last() if "race" in adm.columns \
        else adm.groupby("subject_id")["ethnicity"].last()
    pts = pts.set_index("subject_id")

    rows = []
    for r in rec.itertuples(index=False):
        sid = r.subject_id
        rows.append({
            "study_id": f"s{r.study_id}" if not str(r.study_id).startswith("s") else str(r.study_id),
            "patient_id": str(sid),
            "image_ref": str(r.path).replace(".dcm", ".jpg"),
            "icd_codes": codes.get(getattr(r, key), ""),
            "age": pts["anchor_age"].get(sid, "") if "anchor_age" in pts.columns else "",
            "sex": pts["gender"].get(sid, "") if "gender" in pts.columns else "",
            "race_ethnicity": race.get(sid, ""),
        })
    return rows


# -- manifest / split files -------------------------------------------------

MANIFEST_HEADER = ["study_id", "patient_id", "image_ref", "label", "age", "sex", "race_ethnicity"]


def manifest_to_csv(manifest: CohortManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        race = "" if r.race_ethnicity is Race.UNKNOWN else r.race_ethnicity.value
        writer.writerow([r.study_id, r.patient_id, r.image_ref, r.label.value,
                         "" if r.age is None else r.age, r.sex.value, race])
    return buf.getvalue()


def write_manifest(manifest: CohortManifest, path) -> None:
    Path(path).write_text(manifest_to_csv(manifest), encoding="utf-8", newline="")


def read_manifest(path, provenance: str | None = None) -> CohortManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for col in MANIFEST_HEADER:
            if col not in (reader.fieldnames or []):
                raise SchemaError(col, source=str(path))
        records = [
            CohortRecord(
                study_id=row["study_id"], patient_id=row["patient_id"], image_ref=row["image_ref"],
                label=parse_label(row["label"]), age=_parse_age(row["age"]),
                sex=parse_sex(row["sex"]), race_ethnicity=parse_race(row["race_ethnicity"]),
            )
            for row in reader
        ]
    return CohortManifest(records, provenance=provenance if provenance is not None else str(path))


# -- demographics --------------------------------------------------------------

def _pct(count: int, total: int) -> float:
    # round-half-up on one decimal; float round() would send 19.45 -> 19.4
    return math.floor(1000.0 * count / total + 0.5) / 10.0


@dataclass
class DemographicsSummary:
    total: int
    race_counts: dict[Race, int]
    race_pct: dict[Race, float]
    sex_counts: dict[Sex, int]
    sex_pct: dict[Sex, float]
    label_counts: dict[Label, int]
    age_median: float | None
    age_iqr: tuple[float, float] | None

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "race": {r.value: {"count": self.race_counts[r], "pct": self.race_pct[r]} for r in Race},
            "sex": {s.display: {"count": self.sex_counts[s], "pct": self.sex_pct[s]} for s in Sex},
            "label": {lab.value: self.label_counts[lab] for lab in Label},
            "age": {"median": self.age_median,
                    "iqr": list(self.age_iqr) if self.age_iqr else None},
        }

    def render(self) -> str:
        lines = ["Race / Ethnicity                 Number in data (% of data)"]
        for r in Race:
            lines.append(f"{r.value:<32} {self.race_counts[r]} ({self.race_pct[r]:g}%)")
        lines.append("")
        for s in Sex:
            lines.append(f"{s.display:<32} {self.sex_counts[s]} ({self.sex_pct[s]:g}%)")
        lines.append("")
        for lab in Label:
            lines.append(f"{lab.display:<32} {self.label_counts[lab]}")
        if self.age_median is not None:
            lo, hi = self.age_iqr
            lines.append(f"{'Age median (IQR)':<32} {self.age_median:g} ({lo:g}-{hi:g})")
        return "\n".join(lines) + "\n"


def summarize_demographics(manifest: CohortManifest) -> DemographicsSummary:
    n = len(manifest.records)
    if n == 0:
        raise EmptyCohortError("cannot summarise an empty manifest")
    race = Counter(r.race_ethnicity for r in manifest.records)
    sex = Counter(r.sex for r in manifest.records)
    ages = [r.age for r in manifest.records if r.age is not None]
    if ages:
        q1, med, q3 = np.percentile(ages, [25, 50, 75])
        age_median, age_iqr = float(med), (float(q1), float(q3))
    else:
        age_median, age_iqr = None, None
    race_counts = {r: race.get(r, 0) for r in Race}
    sex_counts = {s: sex.get(s, 0) for s in Sex}
    return DemographicsSummary(
        total=n,
        race_counts=race_counts,
        race_pct={r: _pct(c, n) for r, c in race_counts.items()},
        sex_counts=sex_counts,
        sex_pct={s: _pct(c, n) for s, c in sex_counts.items()},
        label_counts=manifest.label_counts(),
        age_median=age_median,
        age_iqr=age_iqr,
    )


# -- splitting -----------------------------------------------------------------

class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# train 65%, test 25%, val 10%: the 25% share is what yields 872 test images of 3,488
DEFAULT_FRACTIONS = (0.65, 0.10, 0.25)


@dataclass
class SplitAssignment:
    assignment: dict[str, Split]
    fractions: tuple[float, float, float]
    seed: int

    def studies(self, split: Split) -> list[str]:
        return [s for s, v in self.assignment.items() if v is split]

    def counts(self) -> dict[Split, int]:
        c = Counter(self.assignment.values())
        return {s: c.get(s, 0) for s in Split}

    def realized_fractions(self) -> tuple[float, float, float]:
        n = len(self.assignment)
        c = self.counts()
        return tuple(c[s] / n for s in Split)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["study_id", "split"])
        for sid, split in self.assignment.items():
            writer.writerow([sid, split.value])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="")

    @classmethod
    def read(cls, path, fractions=(math.nan,) * 3, seed: int = -1) -> "SplitAssignment":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"split file not found: {path}")
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for col in ("study_id", "split"):
                if col not in (reader.fieldnames or []):
                    raise SchemaError(col, source=str(path))
            assignment = {}
            for row in reader:
                if row["study_id"] in assignment:
                    raise CohortError(f"{path}: study {row['study_id']!r} listed twice")
                assignment[row["study_id"]] = Split(row["split"])
        return cls(assignment, tuple(fractions), seed)


def split_cohort(manifest: CohortManifest, fractions: Sequence[float] = DEFAULT_FRACTIONS,
                 seed: int = 0) -> SplitAssignment:
    """Patient-grouped split into (train, val, test).

    Patients are shuffled with ``seed`` and each is given, whole, to the
    split currently furthest below its target study count.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 or not math.isfinite(f) for f in fr):
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions!r}")
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fr)!r}")

    by_patient: dict[str, list[str]] = defaultdict(list)
    for rec in manifest.records:
        by_patient[rec.patient_id].append(rec.study_id)
    patients = sorted(by_patient)
    active = sum(1 for f in fr if f > 0)
    if len(patients) < active:
        raise CohortError(f"{len(patients)} distinct patients cannot fill {active} splits")

    order = np.random.default_rng(seed).permutation(len(patients))
    n = len(manifest.records)
    targets = [f * n for f in fr]
    filled = [0, 0, 0]
    splits = list(Split)
    patient_split: dict[str, Split] = {}
    for idx in order:
        pid = patients[idx]
        deficits = [targets[k] - filled[k] if fr[k] > 0 else -math.inf for k in range(3)]
        k = int(np.argmax(deficits))
        patient_split[pid] = splits[k]
        filled[k] += len(by_patient[pid])

    assignment = {rec.study_id: patient_split[rec.patient_id] for rec in manifest.records}
    return SplitAssignment(assignment, fr, seed)


@dataclass
class LeakageReport:
    patients_crossing: list[str]
    duplicate_refs_crossing: list[str]

    @property
    def clean(self) -> bool:
        return not self.patients_crossing and not self.duplicate_refs_crossing

    def to_dict(self) -> dict:
        return {"clean": self.clean, "patients_crossing": self.patients_crossing,
                "duplicate_refs_crossing": self.duplicate_refs_crossing}


def check_leakage(assignment: SplitAssignment, manifest: CohortManifest) -> LeakageReport:
    studies = manifest.by_study()
    for sid in assignment.assignment:
        if sid not in studies:
            raise CohortError(f"study {sid!r} in split assignment is absent from the manifest")
    missing = [sid for sid in studies if sid not in assignment.assignment]
    if missing:
        raise CohortError(f"{len(missing)} manifest studies have no split (first: {missing[0]!r})")

    patient_splits: dict[str, set] = defaultdict(set)
    ref_splits: dict[str, set] = defaultdict(set)
    for sid, split in assignment.assignment.items():
        rec = studies[sid]
        patient_splits[rec.patient_id].add(split)
        ref_splits[rec.image_ref].add(split)
    return LeakageReport(
        patients_crossing=sorted(p for p, s in patient_splits.items() if len(s) > 1),
        duplicate_refs_crossing=sorted(r for r, s in ref_splits.items() if len(s) > 1),
    )


# -- synthetic cohort ----------------------------------------------------------

# reference cohort race counts, used to draw synthetic race labels
REFERENCE_RACE_COUNTS = {
    Race.AMERICAN_INDIAN: 22, Race.ASIAN: 100, Race.BLACK: 680, Race.HISPANIC: 187,
    Race.OTHER: 169, Race.UNKNOWN: 144, Race.UNABLE: 20, Race.MULTIPLE: 11,
    Race.DECLINED: 41, Race.WHITE: 2095,
}
FEMALE_FRACTION = 1579 / 3488


def central_region_mean(image: np.ndarray, frac: float = 0.5) -> float:
    """Mean intensity over the centred box covering ``frac`` of each side."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    bh, bw = max(1, int(round(h * frac))), max(1, int(round(w * frac)))
    top, left = (h - bh) // 2, (w - bw) // 2
    return float(img[top:top + bh, left:left + bw].mean())


def render_synthetic_image(size: int, reduced: bool, class_signal: float, rng: np.random.Generator):
    """Draw one grayscale CXR surrogate and the parameters used.

    A bright central ellipse on a dark field stands in for the cardiac
    silhouette; reduced-EF images get its radius scaled by ``1 + class_signal``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy = (yy + 0.5) / size - 0.5
    xx = (xx + 0.5) / size - 0.5
    background = rng.uniform(0.05, 0.15)
    base_radius = rng.uniform(0.15, 0.18)
    radius = base_radius * (1.0 + class_signal) if reduced else base_radius
    aspect = rng.uniform(0.8, 1.0)
    cy, cx = rng.uniform(-0.03, 0.03, size=2)
    brightness = rng.uniform(0.8, 0.9)
    ellipse = (((xx - cx) / radius) ** 2 + ((yy - cy) / (radius * aspect)) ** 2) <= 1.0
    img = np.where(ellipse, brightness, background)
    img = np.clip(img + rng.normal(0.0, 0.03, size=img.shape), 0.0, 1.0)
    params = {"radius": float(radius), "aspect": float(aspect), "center": [float(cy), float(cx)],
              "brightness": float(brightness), "background": float(background)}
    return np.round(img * 255.0).astype(np.uint8), params


@dataclass
class SyntheticCohort:
    manifest: CohortManifest
    image_dir: Path
    ground_truth: dict


def generate_synthetic_cohort(n: int, class_signal: float, seed: int, out_dir, *,
                              image_size: int = 64, max_studies_per_patient: int = 3) -> SyntheticCohort:
    """Write ``n`` synthetic studies (PNG) plus a manifest under ``out_dir``.

    Labels are exactly balanced (``n // 2`` reduced).  Patients own between
    one and ``max_studies_per_patient`` studies, all with the patient's label.
    Ground truth goes to ``out_dir/ground_truth.json``.
    """
    from PIL import Image as PILImage

    if n < 10:
        raise ValueError(f"synthetic cohort needs n >= 10, got {n}")
    if not 0.0 <= class_signal <= 1.0:
        raise ValueError(f"class_signal must be in [0, 1], got {class_signal}")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    labels = np.array([Label.REDUCED] * (n // 2) + [Label.PRESERVED] * (n - n // 2), dtype=object)
    labels = labels[rng.permutation(n)]

    races = list(REFERENCE_RACE_COUNTS)
    race_p = np.array([REFERENCE_RACE_COUNTS[r] for r in races], dtype=np.float64)
    race_p /= race_p.sum()

    # group consecutive same-label studies into patients
    records, truth = [], []
    patient_no, i = 0, 0
    while i < n:
        size = int(rng.integers(1, max_studies_per_patient + 1))
        label = labels[i]
        j = i
        while j < n and j - i < size and labels[j] == label:
            j += 1
        pid = f"p{patient_no:05d}"
        age = int(np.clip(round(rng.normal(71, 14)), 18, 100))
        sex = Sex.FEMALE if rng.random() < FEMALE_FRACTION else Sex.MALE
        race = races[int(rng.choice(len(races), p=race_p))]
        for k in range(i, j):
            sid = f"s{k:06d}"
            pixels, params = render_synthetic_image(image_size, label is Label.REDUCED, class_signal, rng)
            ref = f"images/{sid}.png"
            PILImage.fromarray(pixels, mode="L").save(out_dir / ref)
            records.append(CohortRecord(sid, pid, ref, label, age, sex, race))
            truth.append({"study_id": sid, "label": label.value, **params})
        patient_no += 1
        i = j

    manifest = CohortManifest(records, provenance=f"synthetic(n={n}, class_signal={class_signal}, seed={seed})")
    ground_truth = {
        "n": n, "class_signal": class_signal, "seed": seed, "image_size": image_size,
        "label_counts": {lab.value: c for lab, c in manifest.label_counts().items()},
        "race_counts": {r.value: sum(1 for rec in records if rec.race_ethnicity is r) for r in Race},
        "sex_counts": {s.display: sum(1 for rec in records if rec.sex is s) for s in Sex},
        "patients": patient_no,
        "studies": truth,
    }
    (out_dir / "ground_truth.json").write_text(json.dumps(ground_truth, indent=1), encoding="utf-8")
    write_manifest(manifest, out_dir / "manifest.csv")
    return SyntheticCohort(manifest, image_dir, ground_truth)
