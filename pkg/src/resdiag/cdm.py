"""Base diagnosis models that turn node embeddings into predictions.

Both models read student and exercise rows out of one stacked embedding
matrix (students first, then exercises, then concepts) and emit a
correct-response probability per (student, exercise) pair.

``IrtModel`` is a two-parameter logistic model on latent traits; its
proficiency has no concept axis, so concept-level mastery requests are
rejected.  ``MonotoneMlpModel`` is an interaction-function model over
concept-indexed mastery whose MLP weights are clamped non-negative
after every optimizer step, which keeps predictions non-decreasing in
every mastery coordinate.
"""

from __future__ import annotations

import abc

import numpy as np

from . import autodiff as ad
from .errors import LatentMasteryError


class DiagnosisModel(abc.ABC):
    """Shared surface: prediction from embeddings, mastery extraction."""

    #: True when the embedding columns are concepts and mastery is per concept.
    concept_indexed: bool = False

    def __init__(self, n_students: int, n_exercises: int):
        self.n_students = n_students
        self.n_exercises = n_exercises

    @abc.abstractmethod
    def input_dim(self) -> int:
        """Embedding width the model expects."""

    @abc.abstractmethod
    def tensors(self) -> dict[str, ad.Tensor]:
        """Named trainable parameters, deterministic order."""

    @abc.abstractmethod
    def predict(self, embedding: ad.Tensor, students: np.ndarray, exercises: np.ndarray) -> ad.Tensor:
        """Correct-response probabilities, shape (batch, 1), values in (0, 1)."""

    @abc.abstractmethod
    def proficiency(self, embedding_values: np.ndarray) -> np.ndarray:
        """Per-student proficiency: (N, Z) mastery or (N, 1) latent ability."""

    def clamp_weights(self) -> None:
        """Hook run after every optimizer step; default does nothing."""

    def mastery(self, embedding_values: np.ndarray) -> np.ndarray:
        """Concept-level mastery matrix; rejected for latent-trait models."""
        if not self.concept_indexed:
            raise LatentMasteryError(
                f"{type(self).__name__} diagnoses a latent ability without concept "
                "structure; concept-level mastery (and DOA/MND over it) is undefined"
            )
        return self.proficiency(embedding_values)

    def _check_batch(self, embedding: ad.Tensor, students: np.ndarray, exercises: np.ndarray):
        students = np.asarray(students, dtype=np.int64)
        exercises = np.asarray(exercises, dtype=np.int64)
        if students.shape != exercises.shape or students.ndim != 1:
            raise ValueError("students and exercises must be matching 1-d index arrays")
        if embedding.shape[1] != self.input_dim():
            raise ValueError(
                f"embedding width {embedding.shape[1]} does not match "
                f"model input width {self.input_dim()}"
            )
        if students.size:
            if students.min() < 0 or students.max() >= self.n_students:
                raise IndexError("student index out of range")
            if exercises.min() < 0 or exercises.max() >= self.n_exercises:
                raise IndexError("exercise index out of range")
        return students, exercises


class IrtModel(DiagnosisModel):
    """Two-parameter logistic model on projected embeddings.

    Ability, difficulty and log-discrimination are linear projections of
    the student/exercise embedding rows; the prediction is
    ``sigmoid(exp(a) * (theta - b))``.  The exponential keeps the
    discrimination positive without constraining the projection.
    """

    concept_indexed = False

    def __init__(self, n_students: int, n_exercises: int, dim: int, rng: np.random.Generator):
        super().__init__(n_students, n_exercises)
        self.dim = dim
        self.w_ability = ad.xavier_init(dim, 1, rng)
        self.w_difficulty = ad.xavier_init(dim, 1, rng)
        self.w_log_disc = ad.xavier_init(dim, 1, rng)

    def input_dim(self) -> int:
        return self.dim

    def tensors(self) -> dict[str, ad.Tensor]:
        return {
            "irt_w_ability": self.w_ability,
            "irt_w_difficulty": self.w_difficulty,
            "irt_w_log_disc": self.w_log_disc,
        }

    def predict(self, embedding: ad.Tensor, students: np.ndarray, exercises: np.ndarray) -> ad.Tensor:
        students, exercises = self._check_batch(embedding, students, exercises)
        student_rows = ad.gather_rows(embedding, students)
        exercise_rows = ad.gather_rows(embedding, self.n_students + exercises)
        theta = ad.matmul(student_rows, self.w_ability)
        b = ad.matmul(exercise_rows, self.w_difficulty)
        a = ad.exp(ad.matmul(exercise_rows, self.w_log_disc))
        return ad.sigmoid(ad.elementwise_mul(a, ad.sub(theta, b)))

    def proficiency(self, embedding_values: np.ndarray) -> np.ndarray:
        return embedding_values[: self.n_students] @ self.w_ability.value


def _positive_init(rows: int, cols: int, rng: np.random.Generator) -> ad.Tensor:
    """Xavier-scaled init folded onto the non-negative orthant."""
    tensor = ad.xavier_init(rows, cols, rng)
    np.abs(tensor.value, out=tensor.value)
    return tensor


class MonotoneMlpModel(DiagnosisModel):
    """Concept-indexed interaction model with a non-negative MLP.

    Mastery and difficulty are sigmoids of the student/exercise rows of
    a concept-wide embedding; discrimination is a sigmoid of a learned
    projection.  The input to the tower is
    ``q_row * (mastery - difficulty) * discrimination`` and the tower is
    a two-hidden-layer sigmoid MLP whose weight matrices (not biases)
    are clamped to be element-wise non-negative after every step.
    """

    concept_indexed = True

    def __init__(
        self,
        n_students: int,
        n_exercises: int,
        q_matrix: np.ndarray,
        rng: np.random.Generator,
        hidden: tuple[int, int] = (512, 256),
    ):
        super().__init__(n_students, n_exercises)
        n_concepts = q_matrix.shape[1]
        if q_matrix.shape[0] != n_exercises:
            raise ValueError("q_matrix rows must match the exercise count")
        if len(hidden) != 2 or min(hidden) < 1:
            raise ValueError(f"hidden sizes must be two positive ints, got {hidden}")
        self.n_concepts = n_concepts
        self.hidden = (int(hidden[0]), int(hidden[1]))
        self.q = ad.constant(np.asarray(q_matrix, dtype=np.float64))
        self.w_disc = ad.xavier_init(n_concepts, 1, rng)
        h1, h2 = self.hidden
        # The tower weights live in the non-negative orthant.  Folding the
        # init there keeps every entry alive; zeroing the negative half
        # instead can kill a narrow final layer outright, and a dead last
        # layer blocks all upstream gradients permanently.
        self.w1 = _positive_init(n_concepts, h1, rng)
        self.b1 = ad.Tensor(np.zeros((1, h1)), requires_grad=True)
        self.w2 = _positive_init(h1, h2, rng)
        self.b2 = ad.Tensor(np.zeros((1, h2)), requires_grad=True)
        self.w3 = _positive_init(h2, 1, rng)
        self.b3 = ad.Tensor(np.zeros((1, 1)), requires_grad=True)

    def input_dim(self) -> int:
        return self.n_concepts

    def tensors(self) -> dict[str, ad.Tensor]:
        return {
            "mlp_w_disc": self.w_disc,
            "mlp_w1": self.w1,
            "mlp_b1": self.b1,
            "mlp_w2": self.w2,
            "mlp_b2": self.b2,
            "mlp_w3": self.w3,
            "mlp_b3": self.b3,
        }

    def interaction(
        self, mastery: ad.Tensor, difficulty: ad.Tensor, discrimination: ad.Tensor, q_rows: ad.Tensor
    ) -> ad.Tensor:
        """Tower forward from explicit diagnosis factors; all (batch, *)."""
        gap = ad.elementwise_mul(q_rows, ad.sub(mastery, difficulty))
        x = ad.mul_colvec(gap, discrimination)
        h = ad.sigmoid(ad.add_bias(ad.matmul(x, self.w1), self.b1))
        h = ad.sigmoid(ad.add_bias(ad.matmul(h, self.w2), self.b2))
        return ad.sigmoid(ad.add_bias(ad.matmul(h, self.w3), self.b3))

    def predict(self, embedding: ad.Tensor, students: np.ndarray, exercises: np.ndarray) -> ad.Tensor:
        students, exercises = self._check_batch(embedding, students, exercises)
        mastery = ad.sigmoid(ad.gather_rows(embedding, students))
        exercise_rows = ad.gather_rows(embedding, self.n_students + exercises)
        difficulty = ad.sigmoid(exercise_rows)
        discrimination = ad.sigmoid(ad.matmul(exercise_rows, self.w_disc))
        q_rows = ad.gather_rows(self.q, exercises)
        return self.interaction(mastery, difficulty, discrimination, q_rows)

    def clamp_weights(self) -> None:
        for w in (self.w1, self.w2, self.w3):
            np.maximum(w.value, 0.0, out=w.value)

    def proficiency(self, embedding_values: np.ndarray) -> np.ndarray:
        rows = np.clip(embedding_values[: self.n_students], -40.0, 40.0)
        return 1.0 / (1.0 + np.exp(-rows))


def monotonicity_check(
    model: MonotoneMlpModel,
    rng: np.random.Generator,
    n_points: int = 100,
    delta: float = 0.1,
) -> bool:
    """Probe the interaction function for mastery monotonicity.

    Requires the weights to be in their clamped (non-negative) state.
    Draws random diagnosis factors, bumps one covered-concept mastery
    coordinate per point, and checks the prediction never decreases;
    bumping an uncovered concept must leave it unchanged.
    """
    z = model.n_concepts
    for w in (model.w1, model.w2, model.w3):
        if w.value.min() < 0:
            raise ValueError("monotonicity is only guaranteed after clamp_weights()")
    mastery = rng.uniform(0.0, 1.0, size=(n_points, z))
    difficulty = rng.uniform(0.0, 1.0, size=(n_points, z))
    discrimination = rng.uniform(0.1, 1.0, size=(n_points, 1))
    q_rows = (rng.random((n_points, z)) < 0.5).astype(np.float64)
    q_rows[np.arange(n_points), rng.integers(0, z, n_points)] = 1.0

    def forward(mas):
        return model.interaction(
            ad.constant(mas),
            ad.constant(difficulty),
            ad.constant(discrimination),
            ad.constant(q_rows),
        ).value

    base = forward(mastery)
    for point in range(n_points):
        covered = np.flatnonzero(q_rows[point])
        concept = covered[rng.integers(0, covered.size)]
        bumped = mastery.copy()
        bumped[point, concept] = min(bumped[point, concept] + delta, 1.0)
        if forward(bumped)[point, 0] < base[point, 0] - 1e-12:
            return False
        uncovered = np.flatnonzero(q_rows[point] == 0)
        if uncovered.size:
            sideways = mastery.copy()
            sideways[point, uncovered[0]] = min(sideways[point, uncovered[0]] + delta, 1.0)
            if abs(forward(sideways)[point, 0] - base[point, 0]) > 1e-12:
                return False
    return True
