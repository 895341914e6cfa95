import pytest

from zssbir import gradcheck


@pytest.fixture(scope="module")
def clean():
    return gradcheck.run(seed=0)


def test_every_check_passes(clean):
    failed = [(r.name, r.error) for r in clean if not r.passed]
    assert not failed


def test_suite_covers_every_level(clean):
    prefixes = {r.name.split("/")[0] for r in clean}
    assert prefixes == {"op", "layer", "flow", "loss", "objective"}
    assert "objective/generator" in {r.name for r in clean}


def test_suite_runs_within_budget(clean):
    assert sum(r.seconds for r in clean) < 60


def test_corrupted_sigmoid_detected_throughout():
    failed = {r.name for r in gradcheck.run(seed=1, fault="sigmoid") if not r.passed}
    assert {"op/sigmoid", "layer/linear-sigmoid", "objective/generator"} <= failed


@pytest.mark.parametrize("rule", ["exp", "log", "softplus", "square", "relu", "sqrt"])
def test_corrupted_rule_detected_at_op_level(rule, monkeypatch):
    monkeypatch.setattr(gradcheck, "SUITES", (gradcheck.op_checks,))
    results = gradcheck.run(seed=1, fault=rule)
    assert not next(r for r in results if r.name == f"op/{rule}").passed


def test_table_format(clean):
    table = gradcheck.format_table(clean)
    assert table.splitlines()[0].startswith("check")
    assert len(table.splitlines()) == len(clean) + 1
