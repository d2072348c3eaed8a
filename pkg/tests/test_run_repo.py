import pytest
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker

from app.core.errors import RegistryError
from app.db.session import make_session_factory
from app.repositories.run_repo import METRIC_COLUMNS, RunRepository


@pytest.fixture
def repo():
    session = make_session_factory("sqlite://")()
    try:
        yield RunRepository(session)
    finally:
        session.close()


def _row(value, stage="refined", slice_id=0):
    return {"pattern": 1, "stage": stage, "metric": "PSNR", "volume_id": 3, "slice_id": slice_id, "value": value}


def test_run_lifecycle(repo):
    run = repo.create_run("toy", "abc123", {"eval": {"folds": 4}}, "runs/toy")
    assert run.status == "running"
    assert run.config["eval"]["folds"] == 4

    repo.complete_run(run.id)
    done = repo.get_run(run.id)
    assert done.status == "completed"
    assert done.completed_at is not None


def test_failed_run_records_the_stage(repo):
    run = repo.create_run("toy", "abc123", {}, "runs/toy")
    repo.fail_run(run.id, "refine", "non-finite stage-2 loss")
    failed = repo.get_run(run.id)
    assert (failed.status, failed.failed_stage) == ("failed", "refine")
    assert "non-finite" in failed.error


def test_latest_run_per_directory(repo):
    first = repo.create_run("a", "d1", {}, "runs/a")
    repo.create_run("b", "d2", {}, "runs/b")
    second = repo.create_run("a", "d3", {}, "runs/a")
    assert repo.latest_run("runs/a").id == second.id != first.id
    assert repo.latest_run("runs/none") is None


def test_replacing_metrics_is_idempotent(repo):
    run = repo.create_run("toy", "abc", {}, "runs/toy")
    assert repo.replace_metrics(run.id, [_row(30.0), _row(31.0, slice_id=1)]) == 2
    assert repo.replace_metrics(run.id, [_row(32.0)]) == 1
    frame = repo.metric_frame(run.id)
    assert list(frame.columns) == METRIC_COLUMNS
    assert frame["value"].tolist() == [32.0]


def test_update_of_missing_run_is_a_no_op(repo):
    assert repo.update_run(999, status="failed") is None
    assert repo.metric_frame(999).empty


def test_missing_tables_raise_registry_errors():
    bare = sessionmaker(bind=create_engine("sqlite://"))()
    try:
        with pytest.raises(RegistryError):
            RunRepository(bare).create_run("toy", "abc", {}, "runs/toy")
    finally:
        bare.close()
