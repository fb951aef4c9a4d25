import pytest

from pixelpilot.state import Outcome, ProgressVerdict, Status, TaskState


def test_complete_needs_answer():
    with pytest.raises(ValueError):
        TaskState(Status.COMPLETE)
    with pytest.raises(ValueError):
        TaskState(Status.STUCK, answer="x")
    assert TaskState(Status.COMPLETE, answer="42").answer == "42"


def test_completion_implies_advanced():
    with pytest.raises(ValueError):
        ProgressVerdict(Outcome.STALLED, task_complete=True)


@pytest.mark.parametrize(
    "outcome,start,expected",
    [(Outcome.ADVANCED, 2, 3), (Outcome.STALLED, 2, 2), (Outcome.REGRESSED, 2, 1), (Outcome.REGRESSED, 0, 0)],
)
def test_successor(outcome, start, expected):
    assert TaskState(step_index=start).successor(ProgressVerdict(outcome)).step_index == expected


def test_terminal_states_are_final():
    done = TaskState().finish(Status.TIMED_OUT)
    assert done.terminal
    with pytest.raises(ValueError):
        done.finish(Status.COMPLETE, "late")


def test_dict_round_trip():
    s = TaskState(Status.COMPLETE, 3, "yes")
    assert TaskState.from_dict(s.to_dict()) == s
    v = ProgressVerdict(Outcome.ADVANCED, "why", True)
    assert ProgressVerdict.from_dict(v.to_dict()) == v
