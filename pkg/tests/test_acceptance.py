"""Acceptance criteria 1-10 on one shared run, then a second run for the
byte-identical determinism check (criterion 11). Takes about 20 minutes."""
import pytest

from jmflow.acceptance import CRITERIA, compare_dirs, run_criteria

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

RUNTIME_LIMITS = {1: 5.0, 2: 600.0}  # seconds
TOTAL_LIMIT = 1800.0


def _echo(line):
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)


@pytest.fixture(scope="module")
def first_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify")
    return out, {r.number: r for r in run_criteria(out, seed=0, threads=1, echo=_echo)}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(first_run, number):
    r = first_run[1][number]
    assert r.passed, r.line()
    if number in RUNTIME_LIMITS:
        assert r.seconds <= RUNTIME_LIMITS[number], r.line()


def test_total_runtime(first_run):
    assert sum(r.seconds for r in first_run[1].values()) <= TOTAL_LIMIT


def test_criterion_11_determinism(first_run, tmp_path_factory):
    out_a = first_run[0]
    out_b = tmp_path_factory.mktemp("verify-repeat")
    run_criteria(out_b, seed=0, threads=1)
    diff = compare_dirs(out_a, out_b)
    n = len(list(out_a.iterdir()))
    _echo(f"criterion 11 {'PASS' if not diff else 'FAIL'}  determinism  "
          f"[files={n}, differing={diff}]")
    assert not diff
