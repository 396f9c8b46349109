import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_transform
from lidarloc.errors import AlignmentError, InvalidInputError, ParseError
from lidarloc.geometry import RigidTransform
from lidarloc.trajectory import (
    CORRECTED,
    TrajectoryNode,
    eval_abs_error,
    format_node,
    read_trajectory,
    write_error_csv,
    write_trajectory,
)


def line(points):
    return [TrajectoryNode(round(0.1 * i, 6), RigidTransform.from_translation(p)) for i, p in enumerate(points)]


def test_identity_line():
    assert format_node(TrajectoryNode(0.0, RigidTransform.identity())) == "0.000000 0 0 0 0 0 0 1"


def test_round_trip(tmp_path, rng):
    nodes = [TrajectoryNode(round(0.1 * i, 6), random_transform(rng, 100.0)) for i in range(100)]
    p = tmp_path / "t.txt"
    write_trajectory(nodes, p)
    back = read_trajectory(p)
    assert [n.timestamp for n in back] == [n.timestamp for n in nodes]
    for a, b in zip(nodes, back):
        np.testing.assert_allclose(b.pose.as_matrix(), a.pose.as_matrix(), atol=1e-9)


def test_empty_file(tmp_path):
    p = tmp_path / "t.txt"
    write_trajectory([], p)
    assert p.read_text() == ""
    assert read_trajectory(p) == []


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_trajectory(line([(0, 0, 0)]), tmp_path / "missing" / "t.txt")


def test_write_rejects_bad_timestamps(tmp_path):
    nodes = line([(0, 0, 0), (1, 0, 0)])
    with pytest.raises(InvalidInputError):
        write_trajectory(nodes[::-1], tmp_path / "t.txt")
    with pytest.raises(InvalidInputError):
        TrajectoryNode(0.0, RigidTransform.identity(), source="guess")
    assert TrajectoryNode(0.0, RigidTransform.identity(), CORRECTED).source == CORRECTED


def test_read_errors(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 1 2 3\n")
    with pytest.raises(ParseError, match=":1:"):
        read_trajectory(p)
    p.write_text("# header\n0 0 0 0 0 0 0 x\n")
    with pytest.raises(ParseError, match=":2:"):
        read_trajectory(p)


def test_eval_identity_is_zero():
    nodes = line([(i, 0, 0) for i in range(5)])
    s = eval_abs_error(nodes, nodes)
    assert s.mean == 0 and s.max == 0 and s.rmse == 0


def test_eval_three_four_five():
    s = eval_abs_error(line([(3, 4, 0)]), line([(0, 0, 0)]))
    assert s.mean == pytest.approx(5.0) and s.max == pytest.approx(5.0)
    assert int(s.hist_counts.sum()) == 1
    assert s.hist_edges[0] <= 5.0 <= s.hist_edges[-1]


def test_eval_oracle(rng, tmp_path):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    s = eval_abs_error(line(a), line(b))
    e = np.linalg.norm(a - b, axis=1)
    np.testing.assert_allclose(s.errors, e)
    assert s.mean == pytest.approx(e.mean()) and s.rmse == pytest.approx(np.sqrt(np.mean(e**2)))
    p = tmp_path / "e.csv"
    write_error_csv(s, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "timestamp,error_m" and len(rows) == 31


def test_eval_missing_timestamp():
    with pytest.raises(AlignmentError):
        eval_abs_error(line([(0, 0, 0), (1, 0, 0)]), line([(0, 0, 0)]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eval_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = line(rng.normal(size=(10, 3))), line(rng.normal(size=(10, 3)))
    np.testing.assert_allclose(eval_abs_error(a, b).errors, eval_abs_error(b, a).errors)
