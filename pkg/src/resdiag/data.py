"""Response logs, Q-matrices, splits, label noise and synthetic data.

File formats
------------
Response logs are CSV with header ``student_id,exercise_id,score`` where
score is 0 or 1.  The Q-matrix is CSV with header
``exercise_id,concept_id``, one row per exercise-concept relation.  Ids
may be arbitrary strings; they are remapped to dense indices in order of
first appearance (students from the log file, exercises and concepts
from the Q-matrix file) and the mapping is kept on the dataset.

Duplicate ``(student, exercise)`` log rows keep the first occurrence;
the number dropped is recorded.  An exercise that appears in the logs
but not in the Q-matrix has no concepts and is rejected.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError
from .seeding import substream

# triplet array columns
STUDENT, EXERCISE, SCORE = 0, 1, 2


@dataclass(frozen=True, eq=False)
class Dataset:
    """Dense-id response logs plus the exercise-concept matrix."""

    n_students: int
    n_exercises: int
    n_concepts: int
    triplets: np.ndarray  # (T, 3) int64, columns student/exercise/score
    q_matrix: np.ndarray  # (M, Z) int8, binary
    student_ids: tuple[str, ...] = ()
    exercise_ids: tuple[str, ...] = ()
    concept_ids: tuple[str, ...] = ()
    duplicates_dropped: int = 0

    def __post_init__(self):
        if min(self.n_students, self.n_exercises, self.n_concepts) < 1:
            raise DataError("dataset needs at least one student, exercise and concept")
        t = self.triplets
        if t.ndim != 2 or t.shape[1] != 3:
            raise DataError(f"triplets must be (T, 3), got {t.shape}")
        if self.q_matrix.shape != (self.n_exercises, self.n_concepts):
            raise DataError(
                f"q_matrix shape {self.q_matrix.shape} does not match "
                f"({self.n_exercises}, {self.n_concepts})"
            )
        if not np.isin(self.q_matrix, (0, 1)).all():
            raise DataError("q_matrix entries must be 0 or 1")
        empty = np.flatnonzero(self.q_matrix.sum(axis=1) == 0)
        if empty.size:
            raise DataError(f"exercises with empty concept sets: {empty[:10].tolist()}")
        if t.shape[0]:
            if t[:, STUDENT].min() < 0 or t[:, STUDENT].max() >= self.n_students:
                raise DataError("student index out of range")
            if t[:, EXERCISE].min() < 0 or t[:, EXERCISE].max() >= self.n_exercises:
                raise DataError("exercise index out of range")
            if not np.isin(t[:, SCORE], (0, 1)).all():
                raise DataError("scores must be 0 or 1")
            keys = t[:, STUDENT].astype(np.int64) * self.n_exercises + t[:, EXERCISE]
            if np.unique(keys).size != keys.size:
                raise DataError("duplicate (student, exercise) pairs in triplets")

    @property
    def n_logs(self) -> int:
        return self.triplets.shape[0]

    def id_maps(self) -> dict:
        return {
            "students": list(self.student_ids),
            "exercises": list(self.exercise_ids),
            "concepts": list(self.concept_ids),
        }


def _read_csv_rows(path: Path, expected_header: list[str]):
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected_header:
            raise DataError(f"{path}: expected header {expected_header}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected_header) or any(not f.strip() for f in row):
                raise DataError(f"{path}:{line_no}: malformed row {row}")
            yield line_no, [f.strip() for f in row]


def load_dataset(logs_path: str | Path, q_path: str | Path) -> Dataset:
    """Load a dataset from a response-log CSV and a Q-matrix CSV."""
    logs_path, q_path = Path(logs_path), Path(q_path)

    exercise_map: dict[str, int] = {}
    concept_map: dict[str, int] = {}
    q_entries: list[tuple[int, int]] = []
    for line_no, (ex, concept) in _read_csv_rows(q_path, ["exercise_id", "concept_id"]):
        e = exercise_map.setdefault(ex, len(exercise_map))
        k = concept_map.setdefault(concept, len(concept_map))
        q_entries.append((e, k))
    if not q_entries:
        raise DataError(f"{q_path}: no exercise-concept relations")
    q = np.zeros((len(exercise_map), len(concept_map)), dtype=np.int8)
    for e, k in q_entries:
        q[e, k] = 1

    student_map: dict[str, int] = {}
    rows: list[tuple[int, int, int]] = []
    seen: set[tuple[int, int]] = set()
    duplicates = 0
    for line_no, (student, ex, score) in _read_csv_rows(
        logs_path, ["student_id", "exercise_id", "score"]
    ):
        if score not in ("0", "1"):
            raise DataError(f"{logs_path}:{line_no}: score must be 0 or 1, got {score!r}")
        if ex not in exercise_map:
            raise DataError(
                f"{logs_path}:{line_no}: exercise {ex!r} has no Q-matrix entry, "
                "so its concept set would be empty"
            )
        s = student_map.setdefault(student, len(student_map))
        e = exercise_map[ex]
        if (s, e) in seen:
            duplicates += 1
            continue
        seen.add((s, e))
        rows.append((s, e, int(score)))
    if not rows:
        raise DataError(f"{logs_path}: no response logs")

    return Dataset(
        n_students=len(student_map),
        n_exercises=len(exercise_map),
        n_concepts=len(concept_map),
        triplets=np.array(rows, dtype=np.int64),
        q_matrix=q,
        student_ids=tuple(student_map),
        exercise_ids=tuple(exercise_map),
        concept_ids=tuple(concept_map),
        duplicates_dropped=duplicates,
    )


def save_dataset(dataset: Dataset, logs_path: str | Path, q_path: str | Path) -> None:
    """Write a dataset back out in the CSV formats ``load_dataset`` reads."""
    ids = dataset.student_ids or tuple(str(i) for i in range(dataset.n_students))
    ex_ids = dataset.exercise_ids or tuple(str(i) for i in range(dataset.n_exercises))
    c_ids = dataset.concept_ids or tuple(str(i) for i in range(dataset.n_concepts))
    with open(q_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["exercise_id", "concept_id"])
        for e in range(dataset.n_exercises):
            for k in np.flatnonzero(dataset.q_matrix[e]):
                writer.writerow([ex_ids[e], c_ids[k]])
    with open(logs_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["student_id", "exercise_id", "score"])
        for s, e, r in dataset.triplets:
            writer.writerow([ids[s], ex_ids[e], int(r)])


def build_interaction_matrix(dataset: Dataset, subset: np.ndarray | None = None) -> sp.csr_matrix:
    """Signed student-exercise matrix: +1 correct, -1 incorrect, 0 unobserved."""
    t = dataset.triplets if subset is None else np.asarray(subset)
    if t.ndim != 2 or t.shape[1] != 3:
        raise DataError(f"triplet subset must be (T, 3), got {t.shape}")
    values = np.where(t[:, SCORE] == 1, 1.0, -1.0)
    mat = sp.coo_matrix(
        (values, (t[:, STUDENT], t[:, EXERCISE])),
        shape=(dataset.n_students, dataset.n_exercises),
    ).tocsr()
    mat.sort_indices()
    return mat


@dataclass(frozen=True, eq=False)
class Split:
    """Per-student train/valid/test partition of the response logs."""

    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    ratios: tuple[float, float, float]
    seed: int
    noise_ratio: float = 0.0
    students_without_logs: int = 0

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (self.train.shape[0], self.valid.shape[0], self.test.shape[0])


def _allocate(n: int, ratios: tuple[float, float, float]) -> list[int]:
    """Largest-remainder split of n items over three buckets, at least one in train."""
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    # stable order: ties go to the earlier bucket (train, then valid)
    order = sorted(range(3), key=lambda i: (-remainders[i], i))
    for i in range(n - sum(counts)):
        counts[order[i]] += 1
    if counts[0] == 0 and n > 0:
        donor = max(range(1, 3), key=lambda i: counts[i])
        counts[donor] -= 1
        counts[0] += 1
    return counts


def split_dataset(
    dataset: Dataset, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0
) -> Split:
    """Split each student's logs by the given ratios.

    Counts per student use largest-remainder rounding, every student with
    at least one log keeps at least one log in train, and the valid or
    test ratio may be zero.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ConfigError(f"need three split ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or ratios[0] <= 0:
        raise ConfigError(f"split ratios must be non-negative with train > 0, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")

    rng = substream(seed, "split")
    t = dataset.triplets
    by_student: list[list[int]] = [[] for _ in range(dataset.n_students)]
    for i, s in enumerate(t[:, STUDENT]):
        by_student[s].append(i)

    buckets: list[list[int]] = [[], [], []]
    without_logs = 0
    for s in range(dataset.n_students):
        idx = np.array(by_student[s], dtype=np.int64)
        if idx.size == 0:
            without_logs += 1
            continue
        rng.shuffle(idx)
        n_train, n_valid, n_test = _allocate(idx.size, ratios)
        buckets[0].extend(idx[:n_train])
        buckets[1].extend(idx[n_train : n_train + n_valid])
        buckets[2].extend(idx[n_train + n_valid :])
    if without_logs:
        warnings.warn(f"{without_logs} students have no logs and are excluded from the split")

    parts = [t[np.array(sorted(b), dtype=np.int64)].copy() if b else np.empty((0, 3), np.int64) for b in buckets]
    return Split(
        train=parts[0],
        valid=parts[1],
        test=parts[2],
        ratios=ratios,
        seed=seed,
        students_without_logs=without_logs,
    )


def inject_noise(split: Split, noise_ratio: float, seed: int) -> Split:
    """Flip each train score with probability ``noise_ratio``; valid/test untouched."""
    if not 0.0 <= noise_ratio <= 1.0:
        raise ConfigError(f"noise ratio must be in [0, 1], got {noise_ratio}")
    train = split.train.copy()
    if noise_ratio > 0.0 and train.shape[0]:
        rng = substream(seed, "noise")
        flip = rng.random(train.shape[0]) < noise_ratio
        train[flip, SCORE] = 1 - train[flip, SCORE]
    return Split(
        train=train,
        valid=split.valid,
        test=split.test,
        ratios=split.ratios,
        seed=split.seed,
        noise_ratio=noise_ratio,
        students_without_logs=split.students_without_logs,
    )


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    """Ground-truth description of a synthetic population.

    Responses are Bernoulli with success probability
    ``sigmoid(slope * disc_e * mean_k(mas[s,k] - diff[e,k]))`` where the
    mean runs over the exercise's concepts.  ``slope`` sharpens the
    probabilities so mastery differences stay visible through sampling.
    """

    n_students: int
    n_exercises: int
    n_concepts: int
    mastery: np.ndarray  # (N, Z) in [0, 1]
    difficulty: np.ndarray  # (M, Z) in [0, 1]
    discrimination: np.ndarray  # (M,) in (0, 1]
    concepts_per_exercise: float = 1.2
    logs_per_student: int = 40
    slope: float = 4.0
    seed: int = 0

    def __post_init__(self):
        n, m, z = self.n_students, self.n_exercises, self.n_concepts
        if min(n, m, z) < 1:
            raise ConfigError("synthetic sizes must all be at least 1")
        if not (1.0 <= self.concepts_per_exercise <= z):
            raise ConfigError(
                f"concepts_per_exercise must lie in [1, {z}], got {self.concepts_per_exercise}"
            )
        if not 1 <= self.logs_per_student <= m:
            raise ConfigError(
                f"logs_per_student must lie in [1, {m}] to sample without replacement"
            )
        if self.slope <= 0:
            raise ConfigError(f"slope must be positive, got {self.slope}")
        if self.mastery.shape != (n, z) or self.difficulty.shape != (m, z):
            raise ConfigError("mastery/difficulty shapes do not match the sizes")
        if self.discrimination.shape != (m,):
            raise ConfigError("discrimination must be one value per exercise")
        for name, arr in (("mastery", self.mastery), ("difficulty", self.difficulty)):
            if arr.min() < 0 or arr.max() > 1:
                raise ConfigError(f"{name} values must lie in [0, 1]")
        if self.discrimination.min() <= 0 or self.discrimination.max() > 1:
            raise ConfigError("discrimination values must lie in (0, 1]")

    @classmethod
    def random(
        cls,
        n_students: int,
        n_exercises: int,
        n_concepts: int,
        concepts_per_exercise: float = 1.2,
        logs_per_student: int = 40,
        slope: float = 4.0,
        seed: int = 0,
        ability_weight: float = 0.0,
    ) -> "SyntheticSpec":
        """Draw a random ground-truth population.

        ``ability_weight`` blends a shared per-student ability level into
        every concept: mastery becomes ``w * ability + (1 - w) * uniform``.
        At 0 (the default) concepts are independent; near 1 a student's
        mastery row is dominated by one scalar skill, which mimics the
        strong cross-concept correlation of real response data.
        """
        if not 0.0 <= ability_weight <= 1.0:
            raise ConfigError(
                f"ability_weight must lie in [0, 1], got {ability_weight}"
            )
        rng = substream(seed, "synthetic-truth")
        mastery = rng.uniform(0.0, 1.0, size=(n_students, n_concepts))
        difficulty = rng.uniform(0.0, 1.0, size=(n_exercises, n_concepts))
        discrimination = rng.uniform(0.5, 1.0, size=n_exercises)
        if ability_weight > 0.0:
            # Drawn after the iid fields so ability_weight=0 reproduces the
            # exact datasets generated before this knob existed.
            ability = rng.uniform(0.0, 1.0, size=(n_students, 1))
            mastery = ability_weight * ability + (1.0 - ability_weight) * mastery
        return cls(
            n_students=n_students,
            n_exercises=n_exercises,
            n_concepts=n_concepts,
            mastery=mastery,
            difficulty=difficulty,
            discrimination=discrimination,
            concepts_per_exercise=concepts_per_exercise,
            logs_per_student=logs_per_student,
            slope=slope,
            seed=seed,
        )


def synthetic_q_matrix(spec: SyntheticSpec) -> np.ndarray:
    """Random binary Q-matrix with the requested mean concepts per exercise."""
    rng = substream(spec.seed, "synthetic-q")
    m, z = spec.n_exercises, spec.n_concepts
    q = np.zeros((m, z), dtype=np.int8)
    extra_p = (spec.concepts_per_exercise - 1.0) / max(z - 1, 1)
    for e in range(m):
        count = 1 + (rng.binomial(z - 1, extra_p) if z > 1 else 0)
        q[e, rng.choice(z, size=count, replace=False)] = 1
    return q


def synthetic_success_probability(spec: SyntheticSpec, q_matrix: np.ndarray) -> np.ndarray:
    """(N, M) matrix of ground-truth correct-response probabilities."""
    probs = np.empty((spec.n_students, spec.n_exercises))
    for e in range(spec.n_exercises):
        concepts = np.flatnonzero(q_matrix[e])
        gap = (spec.mastery[:, concepts] - spec.difficulty[e, concepts]).mean(axis=1)
        logit = spec.slope * spec.discrimination[e] * gap
        probs[:, e] = 1.0 / (1.0 + np.exp(-logit))
    return probs


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample a dataset from the spec; ground truth stays on the spec object."""
    q = synthetic_q_matrix(spec)
    probs = synthetic_success_probability(spec, q)
    rng = substream(spec.seed, "synthetic-logs")
    rows = np.empty((spec.n_students * spec.logs_per_student, 3), dtype=np.int64)
    pos = 0
    for s in range(spec.n_students):
        exercises = rng.choice(spec.n_exercises, size=spec.logs_per_student, replace=False)
        draws = rng.random(spec.logs_per_student)
        for e, u in zip(exercises, draws):
            rows[pos] = (s, e, int(u < probs[s, e]))
            pos += 1
    return Dataset(
        n_students=spec.n_students,
        n_exercises=spec.n_exercises,
        n_concepts=spec.n_concepts,
        triplets=rows,
        q_matrix=q,
    )
