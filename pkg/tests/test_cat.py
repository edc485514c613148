"""Adaptive-testing harness: cohort splits, sessions, pooled reports."""

import numpy as np
import pytest

from resdiag.cat import (
    CatSession,
    RandomStrategy,
    restrict_to_students,
    run_cat,
    split_students,
)
from resdiag.data import SyntheticSpec, generate_synthetic, split_dataset
from resdiag.errors import DataError
from resdiag.seeding import substream
from resdiag.training import TrainConfig, train


@pytest.fixture(scope="module")
def cat_world():
    """Full dataset, cohorts, and a base model trained without the testees."""
    spec = SyntheticSpec.random(
        60, 80, 4, logs_per_student=24, slope=8.0, concepts_per_exercise=1.2, seed=21
    )
    dataset = generate_synthetic(spec)
    cohorts = split_students(dataset, seed=3)
    base = restrict_to_students(dataset, cohorts.train)
    split = split_dataset(base, seed=0)
    config = TrainConfig(
        dim=4,
        n_layers=2,
        mlp_hidden=(8, 4),
        batch_size=512,
        max_epochs=6,
        learning_rate=0.02,
        seed=0,
    ).validate()
    model = train(base, split, config)
    return dataset, cohorts, model


def test_split_students_partitions(cat_world):
    dataset, cohorts, _ = cat_world
    groups = [cohorts.train, cohorts.held_out, cohorts.testees]
    merged = np.concatenate(groups)
    assert np.unique(merged).size == merged.size  # disjoint
    np.testing.assert_array_equal(np.sort(merged), np.unique(dataset.triplets[:, 0]))
    assert len(cohorts.train) == 42 and len(cohorts.held_out) == 12 and len(cohorts.testees) == 6

    again = split_students(dataset, seed=3)
    np.testing.assert_array_equal(again.testees, cohorts.testees)
    other = split_students(dataset, seed=4)
    assert not np.array_equal(other.testees, cohorts.testees)
    with pytest.raises(DataError):
        split_students(dataset, ratios=(0.5, 0.5, 0.0), seed=0)


def test_restrict_to_students(cat_world):
    dataset, cohorts, _ = cat_world
    base = restrict_to_students(dataset, cohorts.train)
    assert base.n_students == cohorts.train.size
    assert base.n_exercises == dataset.n_exercises
    expected = np.isin(dataset.triplets[:, 0], cohorts.train).sum()
    assert base.n_logs == expected
    # reindexing preserves each student's logs
    original = cohorts.train[5]
    theirs = dataset.triplets[dataset.triplets[:, 0] == original]
    mapped = base.triplets[base.triplets[:, 0] == 5]
    np.testing.assert_array_equal(np.sort(theirs[:, 1]), np.sort(mapped[:, 1]))


def _session_for(dataset, model, sid, seed=0, fit_steps=8):
    logs = dataset.triplets[dataset.triplets[:, 0] == sid]
    truth = {int(e): int(r) for _, e, r in logs}
    exercises = list(truth)
    return (
        CatSession(
            model,
            truth,
            candidates=exercises[: len(exercises) // 2],
            eval_exercises=exercises[len(exercises) // 2 :],
            rng=substream(seed, f"test-session:{sid}"),
            fit_steps=fit_steps,
        ),
        truth,
    )


def test_session_step_mechanics(cat_world):
    dataset, cohorts, model = cat_world
    session, truth = _session_for(dataset, model, cohorts.testees[0])
    pool_before = list(session.remaining)
    preds0 = session.predictions(session.eval_exercises)
    assert ((preds0 > 0) & (preds0 < 1)).all()

    exercise, response = session.step(RandomStrategy())
    assert exercise in pool_before and exercise not in session.remaining
    assert response == truth[exercise]
    assert session.administered == [(exercise, response)]


def test_refit_fits_administered_evidence(cat_world):
    dataset, cohorts, model = cat_world
    session, _ = _session_for(dataset, model, cohorts.testees[1], fit_steps=25)
    strategy = RandomStrategy()
    initial_row = session.row.value.copy()
    for _ in range(5):
        session.step(strategy)
    administered = [e for e, _ in session.administered]
    labels = np.array([r for _, r in session.administered], dtype=float)
    fitted_error = np.abs(session.predictions(administered) - labels).mean()

    # same administered set scored from the untouched initial row
    session.row.value[...] = initial_row
    cold_error = np.abs(session.predictions(administered) - labels).mean()
    assert fitted_error < cold_error


def test_run_cat_reports_and_frozen_model(cat_world):
    dataset, cohorts, model = cat_world
    before = {k: t.value.copy() for k, t in model.parameter_tensors().items()}
    reports = run_cat(
        model, dataset, cohorts.testees, steps=(0, 3), seed=5, fit_steps=8
    )
    assert [r.step for r in reports] == [0, 3]
    for report in reports:
        assert 0.0 <= report.auc <= 1.0
        assert 0.0 <= report.accuracy <= 1.0
        assert report.n_testees == cohorts.testees.size
        assert report.n_predictions > 0
    after = model.parameter_tensors()
    for key, value in before.items():
        np.testing.assert_array_equal(value, after[key].value)


def test_run_cat_deterministic(cat_world):
    dataset, cohorts, model = cat_world
    first = run_cat(model, dataset, cohorts.testees[:3], steps=(2,), seed=7, fit_steps=6)
    second = run_cat(model, dataset, cohorts.testees[:3], steps=(2,), seed=7, fit_steps=6)
    assert first[0].auc == second[0].auc
    assert first[0].accuracy == second[0].accuracy
    third = run_cat(model, dataset, cohorts.testees[:3], steps=(2,), seed=8, fit_steps=6)
    assert third[0].auc != first[0].auc or third[0].accuracy != first[0].accuracy


def test_run_cat_argument_validation(cat_world):
    dataset, cohorts, model = cat_world
    with pytest.raises(DataError):
        run_cat(model, dataset, cohorts.testees, steps=(), seed=0)
    with pytest.raises(DataError):
        run_cat(model, dataset, cohorts.testees, steps=(1,), candidate_fraction=1.5)
    lonely = np.array([cohorts.testees[0]])
    thin = dataset.triplets[dataset.triplets[:, 0] != lonely[0]]
    import dataclasses

    pruned = dataclasses.replace(dataset, triplets=thin)
    with pytest.warns(UserWarning, match="skipped"), pytest.raises(DataError):
        run_cat(model, pruned, lonely, steps=(1,), seed=0)


@pytest.mark.parametrize("ablation,cdm", [("ol", "ncdm"), ("or-wo-rgc", "ncdm"), ("or", "irt")])
def test_sessions_across_ablations(ablation, cdm):
    spec = SyntheticSpec.random(30, 40, 3, logs_per_student=12, slope=8.0, seed=9)
    dataset = generate_synthetic(spec)
    cohorts = split_students(dataset, seed=1)
    base = restrict_to_students(dataset, cohorts.train)
    config = TrainConfig(
        ablation=ablation,
        cdm=cdm,
        dim=3,
        n_layers=1,
        mlp_hidden=(6, 3),
        batch_size=512,
        max_epochs=3,
        learning_rate=0.02,
        seed=0,
    ).validate()
    model = train(base, split_dataset(base, seed=0), config)
    reports = run_cat(model, dataset, cohorts.testees[:3], steps=(0, 2), seed=2, fit_steps=6)
    assert len(reports) == 2
    assert np.isfinite([r.auc for r in reports]).all()


def test_more_evidence_does_not_hurt(cat_world):
    """Median over seeds: AUC after 8 steps is at least AUC after 1 step."""
    dataset, cohorts, model = cat_world
    early, late = [], []
    for seed in range(9):
        reports = run_cat(
            model, dataset, cohorts.testees, steps=(1, 8), seed=seed, fit_steps=12
        )
        early.append(reports[0].auc)
        late.append(reports[1].auc)
    assert np.median(late) >= np.median(early) - 0.01
