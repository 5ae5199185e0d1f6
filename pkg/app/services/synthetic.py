"""
Synthetic Cohort Service.
Generates inpatient cohorts with planted structure (activity clusters,
diagnosis families, phase-dependent treatment) and the matching ground truth,
used in place of the private claims data for automated evaluation.
"""
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
from scipy.stats import poisson

from services.corpus import MAX_DAY_CAPACITY, Cohort, Vocabulary, build_cohort
from services.errors import ConfigError, InputError

logger = logging.getLogger(__name__)

N_PHASES = 3
MIN_LOS = 2


@dataclass(frozen=True)
class SyntheticSpec:
    """
    Generator parameters. The per-diagnosis LOS means, phase-conditioned cluster
    weights and cluster assignments are derived deterministically from these
    scalars and the seed (see `design`).
    """

    n_visits: int = 2000
    n_activities: int = 200
    n_clusters: int = 10
    n_diagnoses: int = 20
    n_families: int = 5
    mean_los: float = 8.0
    los_spread: float = 2.0
    mean_activities_per_day: float = 6.0
    day_cohesion: float = 0.8
    phase_focus: float = 0.7
    seed: int = 0

    def validate(self) -> None:
        positive = ("n_visits", "n_activities", "n_clusters", "n_diagnoses", "n_families")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be positive", name)
        if self.n_clusters > self.n_activities:
            raise ConfigError("synth.n_clusters cannot exceed n_activities", "n_clusters")
        if self.n_families > self.n_diagnoses:
            raise ConfigError("synth.n_families cannot exceed n_diagnoses", "n_families")
        if not MIN_LOS < self.mean_los <= MAX_DAY_CAPACITY:
            raise ConfigError(f"synth.mean_los must be in ({MIN_LOS}, {MAX_DAY_CAPACITY}]", "mean_los")
        if self.los_spread < 0:
            raise ConfigError("synth.los_spread must be non-negative", "los_spread")
        if not 1.0 <= self.mean_activities_per_day <= self.n_activities:
            raise ConfigError("synth.mean_activities_per_day must be in [1, n_activities]", "mean_activities_per_day")
        if not 0.0 <= self.day_cohesion < 1.0:
            raise ConfigError("synth.day_cohesion must be in [0, 1)", "day_cohesion")
        if not 0.0 <= self.phase_focus <= 1.0:
            raise ConfigError("synth.phase_focus must be in [0, 1]", "phase_focus")

    @classmethod
    def from_dict(cls, data: Dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown synth key: {key}", key)
        return cls(**data)

    def to_dict(self) -> Dict:
        return asdict(self)

    def design(self) -> "SyntheticDesign":
        self.validate()
        rng = np.random.default_rng([self.seed, 0])
        activity_cluster = np.arange(self.n_activities) * self.n_clusters // self.n_activities
        diagnosis_family = np.arange(self.n_diagnoses) * self.n_families // self.n_diagnoses

        within = rng.gamma(2.0, 1.0, size=self.n_activities)
        for c in range(self.n_clusters):
            members = activity_cluster == c
            within[members] /= within[members].sum()

        family_phase_cluster = np.stack(
            [rng.choice(self.n_clusters, size=N_PHASES, replace=self.n_clusters < N_PHASES)
             for _ in range(self.n_families)]
        )
        phase_weights = np.empty((self.n_diagnoses, N_PHASES, self.n_clusters))
        for g in range(self.n_diagnoses):
            for phase in range(N_PHASES):
                weights = (1.0 - self.phase_focus) * rng.dirichlet(np.ones(self.n_clusters))
                weights[family_phase_cluster[diagnosis_family[g], phase]] += self.phase_focus
                phase_weights[g, phase] = weights / weights.sum()

        center = (self.n_families - 1) / 2.0
        los_means = (
            self.mean_los
            + self.los_spread * (diagnosis_family - center)
            + rng.normal(0.0, 0.5, size=self.n_diagnoses)
        )
        los_means = np.clip(los_means, MIN_LOS + 0.5, MAX_DAY_CAPACITY)
        return SyntheticDesign(activity_cluster, diagnosis_family, within, phase_weights, los_means)

    def expected_stats(self) -> Dict[str, float]:
        """Analytic mean LOS and mean activities per day under this spec."""
        design = self.design()
        mean_los = float(np.mean([_expected_clamped_poisson(m - MIN_LOS, MIN_LOS, MAX_DAY_CAPACITY)
                                  for m in design.los_means]))
        mean_apd = _expected_clamped_poisson(self.mean_activities_per_day - 1.0, 1, self.n_activities)
        return {"n_visits": float(self.n_visits), "mean_los": mean_los, "mean_activities_per_day": mean_apd}


@dataclass(frozen=True)
class SyntheticDesign:
    activity_cluster: np.ndarray
    diagnosis_family: np.ndarray
    within_cluster: np.ndarray
    phase_weights: np.ndarray
    los_means: np.ndarray

    def cluster_distribution(self, cluster: int) -> np.ndarray:
        return np.where(self.activity_cluster == cluster, self.within_cluster, 0.0)

    def mixture(self, diagnosis: int, phase: int) -> np.ndarray:
        """Activity distribution of the phase-conditioned cluster mixture."""
        return self.phase_weights[diagnosis, phase][self.activity_cluster] * self.within_cluster


@dataclass(frozen=True)
class GroundTruth:
    activity_clusters: Dict[str, int]
    diagnosis_families: Dict[str, int]

    def activity_labels(self, vocabulary: Vocabulary) -> np.ndarray:
        return np.array([self.activity_clusters[c] for c in vocabulary.activity_codes], dtype=np.int64)

    def diagnosis_labels(self, vocabulary: Vocabulary) -> np.ndarray:
        return np.array([self.diagnosis_families[c] for c in vocabulary.diagnosis_codes], dtype=np.int64)

    def covers(self, vocabulary: Vocabulary) -> bool:
        return (all(c in self.activity_clusters for c in vocabulary.activity_codes)
                and all(c in self.diagnosis_families for c in vocabulary.diagnosis_codes))

    @property
    def n_families(self) -> int:
        return len(set(self.diagnosis_families.values()))


def activity_code(i: int) -> str:
    return f"A{i:04d}"


def diagnosis_code(g: int, family: int) -> str:
    # the first three characters name the family, like an ICD-10 category
    return f"D{family:02d}.{g:03d}"


def day_phase(t: int, los: int) -> int:
    """Early/middle/late phase of 1-based day t in a stay of length los."""
    return min(N_PHASES - 1, N_PHASES * (t - 1) // los)


def _expected_clamped_poisson(lam: float, low: int, high: int) -> float:
    k = np.arange(0, high - low)
    pmf = poisson.pmf(k, lam)
    return float(np.sum((low + k) * pmf) + high * (1.0 - pmf.sum()))


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Cohort, GroundTruth]:
    """
    Sample visits i.i.d.: diagnosis, LOS, then each day's activity set.

    Each day picks a cluster from the diagnosis' phase weights and draws a
    distinct activity set from a blend of that cluster (day_cohesion) and the
    full phase mixture.
    """
    design = spec.design()
    rng = np.random.default_rng([spec.seed, 1])
    n_act = spec.n_activities
    records = []
    for n in range(spec.n_visits):
        g = int(rng.integers(spec.n_diagnoses))
        los = int(np.clip(MIN_LOS + rng.poisson(design.los_means[g] - MIN_LOS), MIN_LOS, MAX_DAY_CAPACITY))
        days = []
        for t in range(1, los + 1):
            phase = day_phase(t, los)
            cluster = int(rng.choice(spec.n_clusters, p=design.phase_weights[g, phase]))
            p_day = (spec.day_cohesion * design.cluster_distribution(cluster)
                     + (1.0 - spec.day_cohesion) * design.mixture(g, phase))
            # a fully focused phase leaves only one cluster in the support
            k = int(min(1 + rng.poisson(spec.mean_activities_per_day - 1.0), np.count_nonzero(p_day)))
            chosen = rng.choice(n_act, size=k, replace=False, p=p_day / p_day.sum())
            days.append([activity_code(int(a)) for a in sorted(chosen)])
        records.append((f"V{n:06d}", diagnosis_code(g, int(design.diagnosis_family[g])), days))

    truth = GroundTruth(
        {activity_code(i): int(c) for i, c in enumerate(design.activity_cluster)},
        {diagnosis_code(g, int(f)): int(f) for g, f in enumerate(design.diagnosis_family)},
    )
    provenance = {"generator": "synthetic", "seed": spec.seed, "spec": spec.to_dict()}
    logger.info(f"Generated {spec.n_visits} synthetic visits (seed {spec.seed})")
    return build_cohort(records, provenance), truth


def ground_truth_path(cohort_path) -> Path:
    path = Path(cohort_path)
    return path.with_name(path.stem + ".truth.json")


def save_ground_truth(truth: GroundTruth, path) -> Path:
    path = Path(path)
    payload = {"activity_clusters": truth.activity_clusters, "diagnosis_families": truth.diagnosis_families}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as e:
        raise InputError(f"Cannot write ground truth to {path}: {e}") from e
    return path


def load_ground_truth(path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"Ground-truth file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return GroundTruth(
            {str(k): int(v) for k, v in data["activity_clusters"].items()},
            {str(k): int(v) for k, v in data["diagnosis_families"].items()},
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise InputError(f"Invalid ground-truth file {path}: {e}") from e
