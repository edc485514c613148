"""Adaptive-testing harness on top of a frozen diagnosis model.

Students are split 7:2:1 into a cohort that trains the base model, a
held-out cohort, and the testees.  A testee starts as a brand-new
node appended to the trained response graph; at every step a selection
strategy picks one exercise from the testee's candidate pool, the true
response is revealed and attached as a graph edge, and only the
testee's base-embedding row is re-fit (the rest of the model stays
bit-identical).  Prediction quality on the testee's held-back
evaluation exercises, pooled over all testees, is reported at the
requested step counts.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .cdm import DiagnosisModel
from .data import Dataset
from .errors import DataError
from .graph import build_response_graph, normalize_adjacency
from .metrics import accuracy, auc
from .rgc import RgcParams, propagate, propagate_plain
from .seeding import substream
from .training import TrainedModel


@dataclass(frozen=True)
class StudentSplit:
    """Disjoint student cohorts; ids refer to the source dataset."""

    train: np.ndarray
    held_out: np.ndarray
    testees: np.ndarray


def split_students(
    dataset: Dataset, ratios: tuple[float, float, float] = (0.7, 0.2, 0.1), seed: int = 0
) -> StudentSplit:
    """Shuffle students with logs and cut them into the three cohorts."""
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0 or ratios[0] <= 0 or ratios[2] <= 0:
        raise DataError(f"student ratios must sum to 1 with train and testee shares positive, got {ratios}")
    with_logs = np.unique(dataset.triplets[:, 0])
    rng = substream(seed, "cat-cohorts")
    order = with_logs[rng.permutation(with_logs.size)]
    quotas = [with_logs.size * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    for i in sorted(range(3), key=lambda i: (-remainders[i], i))[: with_logs.size - sum(counts)]:
        counts[i] += 1
    if counts[2] == 0:
        counts[0] -= 1
        counts[2] += 1
    if counts[0] < 1:
        raise DataError(f"too few students ({with_logs.size}) for a {ratios} cohort split")
    a, b = counts[0], counts[0] + counts[1]
    return StudentSplit(
        train=np.sort(order[:a]), held_out=np.sort(order[a:b]), testees=np.sort(order[b:])
    )


def restrict_to_students(dataset: Dataset, students: np.ndarray) -> Dataset:
    """Sub-dataset containing only the given students, reindexed densely."""
    students = np.asarray(students, dtype=np.int64)
    index = {s: i for i, s in enumerate(students)}
    mask = np.isin(dataset.triplets[:, 0], students)
    triplets = dataset.triplets[mask].copy()
    triplets[:, 0] = [index[s] for s in triplets[:, 0]]
    return Dataset(
        n_students=students.size,
        n_exercises=dataset.n_exercises,
        n_concepts=dataset.n_concepts,
        triplets=triplets,
        q_matrix=dataset.q_matrix,
    )


class SelectionStrategy(Protocol):
    """Picks the next exercise to administer; the extension point for CAT."""

    name: str

    def choose(self, rng: np.random.Generator, candidates: list[int], session: "CatSession") -> int:
        ...


class RandomStrategy:
    name = "random"

    def choose(self, rng: np.random.Generator, candidates: list[int], session: "CatSession") -> int:
        return int(candidates[rng.integers(len(candidates))])


def _frozen_cdm(model: DiagnosisModel, n_students: int) -> DiagnosisModel:
    """Shallow clone with constant parameters and an adjusted student count."""
    clone = copy.copy(model)
    clone.n_students = n_students
    for name, value in vars(model).items():
        if isinstance(value, ad.Tensor) and value.requires_grad:
            setattr(clone, name, ad.constant(value.value))
    return clone


class CatSession:
    """One testee against a frozen model.

    The testee's embedding row is the only trainable tensor.  After
    every administered exercise it is re-fit by a short Adam run on the
    BCE over all responses revealed so far; the optimizer state is
    fresh each time, the row warm-starts from its previous value.
    """

    def __init__(
        self,
        model: TrainedModel,
        truth: dict[int, int],
        candidates: list[int],
        eval_exercises: list[int],
        rng: np.random.Generator,
        fit_steps: int = 25,
        fit_lr: float = 1e-2,
    ):
        self.model = model
        self.truth = dict(truth)
        self.remaining = sorted(candidates)
        self.eval_exercises = list(eval_exercises)
        self.rng = rng
        self.fit_steps = fit_steps
        self.fit_lr = fit_lr
        self.administered: list[tuple[int, int]] = []

        config = model.config
        base = model.base_embedding.value
        n = model.dataset.n_students
        width = base.shape[1]
        self.row = ad.xavier_init(1, width, rng)
        self._head = ad.constant(base[:n])
        self._tail = ad.constant(base[n:])
        self._new_index = n
        self._cdm = _frozen_cdm(model.cdm_model, n + 1)

        if config.ablation != "ol":
            block = model.graph.response_block(True) - model.graph.response_block(False)
            self._train_interactions = block.tocsr()
        if model.transform_params is not None:
            bias = model.transform_params.bias.value
            self._transform_weight = ad.constant(model.transform_params.weight.value)
            # the appended node gets a zero projection bias
            self._transform_bias = ad.constant(
                np.vstack([bias[:n], np.zeros((1, 1)), bias[n:]])
            )
        if model.rgc_params is not None:
            self._w_right = ad.constant(model.rgc_params.w_right.value)
            self._w_wrong = ad.constant(model.rgc_params.w_wrong.value)
        self._adjacencies = self._extended_adjacencies()

    def _extended_interactions(self) -> sp.csr_matrix:
        extra = sp.lil_matrix((1, self.model.dataset.n_exercises))
        for e, r in self.administered:
            extra[0, e] = 1.0 if r == 1 else -1.0
        return sp.vstack([self._train_interactions, extra.tocsr()]).tocsr()

    def _extended_adjacencies(self):
        config = self.model.config
        if config.ablation == "ol":
            return ()
        graph = build_response_graph(self._extended_interactions(), self.model.dataset.q_matrix)
        if config.ablation == "or-wo-rgc":
            union = (graph.a_right + graph.a_wrong).tocsr()
            union.data[:] = 1.0
            return (normalize_adjacency(union),)
        return (normalize_adjacency(graph.a_right), normalize_adjacency(graph.a_wrong))

    def _embedding(self) -> ad.Tensor:
        config = self.model.config
        h0 = ad.concat_rows([self._head, self.row, self._tail])
        if config.ablation == "ol":
            pooled = h0
        elif config.ablation == "or-wo-rgc":
            pooled = propagate_plain(h0, self._adjacencies[0], config.n_layers).pooled
        else:
            params = RgcParams(
                h0=h0,
                w_right=self._w_right,
                w_wrong=self._w_wrong,
                n_layers=config.n_layers,
                activation=config.activation,
            )
            pooled = propagate(params, *self._adjacencies).pooled
        if self.model.transform_params is not None:
            return ad.add_colvec(
                ad.matmul(pooled, self._transform_weight), self._transform_bias
            )
        return pooled

    def _refit(self) -> None:
        if not self.administered:
            return
        exercises = np.array([e for e, _ in self.administered])
        labels = np.array([r for _, r in self.administered])
        students = np.full(exercises.size, self._new_index)
        optimizer = ad.Adam([self.row], self.fit_lr)
        from .training import bce_loss

        for _ in range(self.fit_steps):
            with ad.Tape() as tape:
                preds = self._cdm.predict(self._embedding(), students, exercises)
                loss = bce_loss(preds, labels)
            tape.backward(loss)
            optimizer.step()

    def step(self, strategy: SelectionStrategy) -> tuple[int, int]:
        """Administer one exercise; returns (exercise, revealed response)."""
        if not self.remaining:
            raise DataError("candidate pool exhausted")
        exercise = strategy.choose(self.rng, self.remaining, self)
        self.remaining.remove(exercise)
        response = self.truth[exercise]
        self.administered.append((exercise, response))
        self._adjacencies = self._extended_adjacencies()
        self._refit()
        return exercise, response

    def predictions(self, exercises: list[int]) -> np.ndarray:
        exercises = np.asarray(exercises, dtype=np.int64)
        students = np.full(exercises.size, self._new_index)
        return self._cdm.predict(self._embedding(), students, exercises).value.ravel()


@dataclass
class CatStepReport:
    step: int
    auc: float
    accuracy: float
    n_testees: int
    n_predictions: int


def run_cat(
    model: TrainedModel,
    dataset: Dataset,
    testees: np.ndarray,
    steps: tuple[int, ...] = (5, 10, 15),
    seed: int = 0,
    strategy: SelectionStrategy | None = None,
    candidate_fraction: float = 0.6,
    fit_steps: int = 25,
    fit_lr: float = 1e-2,
) -> list[CatStepReport]:
    """Run adaptive sessions for all testees and pool metrics per step.

    ``model`` was trained on a dataset that excludes the testees;
    ``dataset`` is the full source of their true responses.  Each
    testee's logged exercises split into a candidate pool (administered
    from) and an evaluation set (scored).  A testee whose pool runs out
    before the last requested step keeps contributing its final state.
    """
    if strategy is None:
        strategy = RandomStrategy()
    if not steps or min(steps) < 0:
        raise DataError(f"steps must be non-negative, got {steps}")
    if not 0.0 < candidate_fraction < 1.0:
        raise DataError(f"candidate_fraction must be in (0, 1), got {candidate_fraction}")
    fingerprint = {k: t.value.copy() for k, t in model.parameter_tensors().items()}

    steps = tuple(sorted(set(int(s) for s in steps)))
    collected: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {s: [] for s in steps}
    n_testees = 0
    for sid in np.asarray(testees, dtype=np.int64):
        logs = dataset.triplets[dataset.triplets[:, 0] == sid]
        if logs.shape[0] < 2:
            warnings.warn(f"testee {sid} has fewer than two logs; skipped")
            continue
        rng = substream(seed, f"cat-testee:{sid}")
        exercises = logs[:, 1].copy()
        rng.shuffle(exercises)
        n_candidates = max(1, min(exercises.size - 1, round(candidate_fraction * exercises.size)))
        candidates = exercises[:n_candidates].tolist()
        eval_exercises = exercises[n_candidates:].tolist()
        truth = {int(e): int(r) for _, e, r in logs}

        session = CatSession(
            model, truth, candidates, eval_exercises, rng, fit_steps=fit_steps, fit_lr=fit_lr
        )
        n_testees += 1
        labels = np.array([truth[e] for e in eval_exercises])
        for target in range(max(steps) + 1):
            if target > 0 and session.remaining:
                session.step(strategy)
            if target in collected:
                collected[target].append((session.predictions(eval_exercises), labels))

    if n_testees == 0:
        raise DataError("no testee had enough logs for a session")

    reports = []
    for s in steps:
        scores = np.concatenate([p for p, _ in collected[s]])
        labels = np.concatenate([l for _, l in collected[s]])
        reports.append(
            CatStepReport(
                step=s,
                auc=auc(scores, labels),
                accuracy=accuracy(scores, labels),
                n_testees=n_testees,
                n_predictions=int(labels.size),
            )
        )

    after = model.parameter_tensors()
    for key, before in fingerprint.items():
        if not np.array_equal(before, after[key].value):
            raise RuntimeError(f"CAT session mutated frozen parameter {key!r}")
    return reports
