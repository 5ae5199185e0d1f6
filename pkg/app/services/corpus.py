"""
Corpus Service for inpatient visits.
Loads and saves cohort files, builds the vocabulary, filters visits,
reports dataset statistics and splits cohorts into train/valid/test.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from services.errors import CohortFormatError, ConfigError, InputError

logger = logging.getLogger(__name__)

SCHEMA_NAME = "inpatient2vec-cohort"
SCHEMA_VERSION = 1
MAX_DAY_CAPACITY = 50
SPECIAL_TOKENS = ("[CLS]", "[MASK]", "[PAD]")

# (visit_id, diagnosis code, days as lists of activity codes)
VisitCodes = Tuple[str, str, List[List[str]]]


@dataclass(frozen=True)
class DayRecord:
    """One hospital day: a non-empty set of activity ids, kept sorted."""

    activities: Tuple[int, ...]

    def __post_init__(self):
        if not self.activities:
            raise ValueError("a day must contain at least one activity")
        if len(set(self.activities)) != len(self.activities):
            raise ValueError("duplicate activity in day")
        if list(self.activities) != sorted(self.activities):
            object.__setattr__(self, "activities", tuple(sorted(self.activities)))

    @classmethod
    def of(cls, ids) -> "DayRecord":
        return cls(tuple(sorted(set(int(i) for i in ids))))

    def __len__(self) -> int:
        return len(self.activities)


@dataclass(frozen=True)
class VisitRecord:
    visit_id: str
    diagnosis: int
    days: Tuple[DayRecord, ...]

    @property
    def los(self) -> int:
        return len(self.days)


@dataclass(frozen=True)
class Vocabulary:
    """
    Activity and diagnosis code spaces.

    Activity ids are 0..|A|-1; [CLS], [MASK] and [PAD] follow as |A|, |A|+1, |A|+2.
    `max_los[g]` is N_g, the largest LOS observed for diagnosis g (capped at 50).
    """

    activity_codes: Tuple[str, ...]
    diagnosis_codes: Tuple[str, ...]
    max_los: Tuple[int, ...]

    @cached_property
    def _activity_index(self) -> Dict[str, int]:
        return {code: i for i, code in enumerate(self.activity_codes)}

    @cached_property
    def _diagnosis_index(self) -> Dict[str, int]:
        return {code: i for i, code in enumerate(self.diagnosis_codes)}

    @property
    def n_activities(self) -> int:
        return len(self.activity_codes)

    @property
    def n_diagnoses(self) -> int:
        return len(self.diagnosis_codes)

    @property
    def cls_id(self) -> int:
        return self.n_activities

    @property
    def mask_id(self) -> int:
        return self.n_activities + 1

    @property
    def pad_id(self) -> int:
        return self.n_activities + 2

    @property
    def n_tokens(self) -> int:
        return self.n_activities + len(SPECIAL_TOKENS)

    def activity_id(self, code: str) -> int:
        try:
            return self._activity_index[code]
        except KeyError:
            raise InputError(f"Unknown activity code: {code}") from None

    def diagnosis_id(self, code: str) -> int:
        try:
            return self._diagnosis_index[code]
        except KeyError:
            raise InputError(f"Unknown diagnosis code: {code}") from None

    def to_dict(self) -> Dict:
        return {
            "activity_codes": list(self.activity_codes),
            "diagnosis_codes": list(self.diagnosis_codes),
            "max_los": list(self.max_los),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Vocabulary":
        return cls(
            tuple(data["activity_codes"]),
            tuple(data["diagnosis_codes"]),
            tuple(int(n) for n in data["max_los"]),
        )

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Cohort:
    visits: Tuple[VisitRecord, ...]
    vocabulary: Vocabulary
    provenance: Mapping = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.visits)

    @property
    def n_tokens(self) -> int:
        return sum(len(day) for visit in self.visits for day in visit.days)

    def to_codes(self) -> List[VisitCodes]:
        vocab = self.vocabulary
        return [
            (
                visit.visit_id,
                vocab.diagnosis_codes[visit.diagnosis],
                [[vocab.activity_codes[a] for a in day.activities] for day in visit.days],
            )
            for visit in self.visits
        ]

    def subset(self, indices: Sequence[int], tag: str) -> "Cohort":
        """Visits at `indices`, sharing this cohort's vocabulary."""
        provenance = dict(self.provenance)
        provenance["subset"] = tag
        return Cohort(tuple(self.visits[i] for i in indices), self.vocabulary, provenance)


@dataclass(frozen=True)
class StatsReport:
    """The six rows of the dataset summary table."""

    n_visits: int
    n_days: int
    n_diagnoses: int
    n_activities: int
    mean_activities_per_day: float
    mean_los: float

    def rows(self) -> List[Tuple[str, str]]:
        return [
            ("# of visits", f"{self.n_visits:,}"),
            ("# of days", f"{self.n_days:,}"),
            ("# of diagnosis codes", f"{self.n_diagnoses:,}"),
            ("# of medical codes", f"{self.n_activities:,}"),
            ("Avg. # of activities per day", f"{self.mean_activities_per_day:.2f}"),
            ("Avg. of length of stay", f"{self.mean_los:.2f}"),
        ]

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class FilterConfig:
    """
    Visit filter bounds. `scale` multiplies the diagnosis-frequency bounds
    so desk-sized cohorts can use the same rule.
    """

    min_los: int = 2
    max_los: int = MAX_DAY_CAPACITY
    min_diag_visits: int = 100
    max_diag_visits: int = 3000
    scale: float = 1.0

    def diag_bounds(self) -> Tuple[int, int]:
        return (
            int(math.ceil(self.min_diag_visits * self.scale)),
            int(math.floor(self.max_diag_visits * self.scale)),
        )

    def apply(self, cohort: Cohort) -> Cohort:
        low, high = self.diag_bounds()
        return filter_cohort(cohort, self.min_los, self.max_los, low, high)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def build_cohort(records: Sequence[VisitCodes], provenance: Mapping = None) -> Cohort:
    """
    Build a cohort and its vocabulary from code-level records.

    Args:
        records: (visit_id, diagnosis code, days) tuples
        provenance: Free-form metadata (source path or generator seed)

    Returns:
        Cohort whose vocabulary is built from exactly these records
    """
    activity_codes = sorted({code for _, _, days in records for day in days for code in day})
    diagnosis_codes = sorted({diag for _, diag, _ in records})
    longest: Dict[str, int] = {}
    for _, diag, days in records:
        longest[diag] = max(longest.get(diag, 1), len(days))
    vocab = Vocabulary(
        tuple(activity_codes),
        tuple(diagnosis_codes),
        tuple(min(longest[d], MAX_DAY_CAPACITY) for d in diagnosis_codes),
    )
    visits = tuple(
        VisitRecord(
            visit_id,
            vocab.diagnosis_id(diag),
            tuple(DayRecord.of(vocab.activity_id(c) for c in day) for day in days),
        )
        for visit_id, diag, days in records
    )
    return Cohort(visits, vocab, dict(provenance or {}))


def _parse_visit(obj, line_number: int) -> Tuple[VisitCodes, int]:
    if not isinstance(obj, dict):
        raise CohortFormatError("visit line must be a JSON object", line_number)
    visit_id, diagnosis, days = obj.get("visit_id"), obj.get("diagnosis"), obj.get("days")
    if not isinstance(visit_id, str) or not visit_id:
        raise CohortFormatError("'visit_id' must be a non-empty string", line_number)
    if not isinstance(diagnosis, str) or not diagnosis:
        raise CohortFormatError("'diagnosis' must be a non-empty string", line_number)
    if not isinstance(days, list):
        raise CohortFormatError("'days' must be a list of activity lists", line_number)
    merged = 0
    parsed_days = []
    for day in days:
        if not isinstance(day, list) or not day or not all(isinstance(c, str) for c in day):
            raise CohortFormatError("each day must be a non-empty list of activity codes", line_number)
        unique = sorted(set(day))
        merged += len(day) - len(unique)
        parsed_days.append(unique)
    return (visit_id, diagnosis, parsed_days), merged


def load_cohort(path) -> Cohort:
    """
    Load a cohort from a JSON Lines file.

    Args:
        path: Cohort file; line 1 is the schema header

    Returns:
        Cohort with vocabulary built from the file contents
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Cohort file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        raise CohortFormatError("cohort file is empty")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CohortFormatError(f"invalid header JSON ({e.msg})", 1) from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_NAME:
        raise CohortFormatError(f"header must declare schema '{SCHEMA_NAME}'", 1)
    if header.get("version") != SCHEMA_VERSION:
        raise CohortFormatError(f"unknown schema version: {header.get('version')}", 1)

    records: List[VisitCodes] = []
    seen_ids = set()
    merged_total = 0
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise CohortFormatError(f"malformed JSON ({e.msg})", line_number) from None
        record, merged = _parse_visit(obj, line_number)
        if record[0] in seen_ids:
            raise CohortFormatError(f"duplicate visit_id '{record[0]}'", line_number)
        seen_ids.add(record[0])
        merged_total += merged
        records.append(record)

    if not records:
        raise CohortFormatError("cohort file has no visits")
    if merged_total:
        logger.warning(f"Merged {merged_total} duplicate activities while loading {path.name}")

    provenance = dict(header.get("provenance", {}))
    provenance["source"] = str(path)
    logger.info(f"Loaded {len(records)} visits from {path}")
    return build_cohort(records, provenance)


def save_cohort(cohort: Cohort, path) -> Path:
    """
    Write a cohort as JSON Lines (inverse of load_cohort).

    Returns:
        Path where the file was saved
    """
    path = Path(path)
    provenance = {k: v for k, v in cohort.provenance.items() if k != "source"}
    header = {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION}
    if provenance:
        header["provenance"] = provenance
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for visit_id, diagnosis, days in cohort.to_codes():
                line = {"visit_id": visit_id, "diagnosis": diagnosis, "days": days}
                f.write(json.dumps(line, ensure_ascii=False) + "\n")
    except OSError as e:
        raise InputError(f"Cannot write cohort to {path}: {e}") from e
    return path


def filter_cohort(
    cohort: Cohort,
    min_los: int = 2,
    max_los: int = MAX_DAY_CAPACITY,
    min_diag_visits: int = 100,
    max_diag_visits: int = 3000,
) -> Cohort:
    """
    Drop visits with LOS outside [min_los, max_los], then drop every visit whose
    diagnosis (counted after the LOS rule) has a visit count outside
    [min_diag_visits, max_diag_visits]. The vocabulary is rebuilt.
    """
    records = [r for r in cohort.to_codes() if min_los <= len(r[2]) <= max_los]
    counts: Dict[str, int] = {}
    for _, diag, _ in records:
        counts[diag] = counts.get(diag, 0) + 1
    kept = [r for r in records if min_diag_visits <= counts[r[1]] <= max_diag_visits]
    logger.info(f"Filter kept {len(kept)} of {len(cohort)} visits")
    provenance = dict(cohort.provenance)
    provenance["filter"] = [min_los, max_los, min_diag_visits, max_diag_visits]
    return build_cohort(kept, provenance)


def cohort_stats(cohort: Cohort) -> StatsReport:
    if not len(cohort):
        raise InputError("Cannot compute statistics of an empty cohort")
    n_days = sum(v.los for v in cohort.visits)
    return StatsReport(
        n_visits=len(cohort),
        n_days=n_days,
        n_diagnoses=len({v.diagnosis for v in cohort.visits}),
        n_activities=len({a for v in cohort.visits for d in v.days for a in d.activities}),
        mean_activities_per_day=cohort.n_tokens / n_days if n_days else 0.0,
        mean_los=n_days / len(cohort),
    )


def split_cohort(
    cohort: Cohort,
    ratios: Tuple[float, float, float] = (0.75, 0.1, 0.15),
    seed: int = 0,
) -> Tuple[Cohort, Cohort, Cohort]:
    """
    Random visit-level partition into train/valid/test.
    All three parts share the full cohort's vocabulary.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}", "ratios")
    n = len(cohort)
    if n < 3:
        raise InputError(f"Cannot split a cohort of {n} visits (need at least 3)")
    n_train = round_half_up(ratios[0] * n)
    n_valid = min(round_half_up(ratios[1] * n), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    train, valid, test = (
        cohort.subset(sorted(int(i) for i in part), tag)
        for part, tag in zip(parts, ("train", "valid", "test"))
    )
    return train, valid, test


def diagnosis_families_from_codes(vocabulary: Vocabulary, prefix_length: int = 3) -> np.ndarray:
    """Group diagnosis ids by the literal code prefix (ICD-10 top 3 characters)."""
    prefixes = [code[:prefix_length] for code in vocabulary.diagnosis_codes]
    family_of = {p: i for i, p in enumerate(sorted(set(prefixes)))}
    return np.array([family_of[p] for p in prefixes], dtype=np.int64)
