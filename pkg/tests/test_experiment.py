import csv
import json
import math

import pytest
from pydantic import ValidationError

from histprune.agent import CSV_COLUMNS
from histprune.assistant import ASSISTANT_COLUMNS
from histprune.errors import InvalidArgumentError, LibraryError
from histprune.experiment import (
    ExperimentConfig,
    convergence_trial,
    final_smoothed,
    report,
    report_curves,
    run,
    scenario_from_document,
)
from histprune.scenarios import reference_4layer, reference_8layer
from histprune.transfer import ModelLibrary

from conftest import equal_cost


def config(tmp_path, name="out", **kw):
    doc = {"scenario": equal_cost(3, 0.5).to_dict(), "trials": 12, "seed": 3, "agent": {"batch_size": 8},
           "library": str(tmp_path / "lib"), "output_dir": str(tmp_path / name)}
    doc.update(kw)
    return ExperimentConfig.model_validate(doc)


def test_scratch_single_trial(tmp_path):
    res = run(config(tmp_path, trials=1))
    lines = res.csv_path.read_bytes().split(b"\n")
    assert lines[0].decode() == ",".join(CSV_COLUMNS)
    assert len([ln for ln in lines[1:] if ln]) == 1 and b"\r" not in res.csv_path.read_bytes()
    assert len(ModelLibrary(tmp_path / "lib")) == 1
    policy = json.loads(res.policy_path.read_text())
    assert len(policy["actions"]) == 3 and policy["realized_preservation"] <= 0.5 + 1e-9
    assert json.loads((tmp_path / "out" / "run.json").read_text())["mode"] == "scratch"


def test_same_config_and_seed_is_bitwise_reproducible(tmp_path):
    a = run(config(tmp_path, "a"))
    b = run(config(tmp_path, "b"))
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.policy_path.read_bytes() == b.policy_path.read_bytes()
    c = run(config(tmp_path, "c", seed=4))
    assert c.csv_path.read_bytes() != a.csv_path.read_bytes()


@pytest.mark.parametrize("mode", ["vanilla-transfer", "augmented-transfer", "assistant"])
def test_transfer_modes_add_one_record(tmp_path, mode):
    src = run(config(tmp_path, "src"))
    before = len(ModelLibrary(tmp_path / "lib"))
    res = run(config(tmp_path, mode, mode=mode, source_ids=[src.record_id], trials=35))
    assert res.source_id == src.record_id
    assert len(ModelLibrary(tmp_path / "lib")) == before + 1
    with open(res.csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 35
    if mode == "assistant":
        assert list(rows[0]) == CSV_COLUMNS + ASSISTANT_COLUMNS
        assert {r["action_source"] for r in rows[:30]} == {"assistant"}
        assert {r["action_source"] for r in rows[30:]} == {"agent"}
    if mode != "vanilla-transfer":
        assert res.seeded_transitions == 12 * 3


def test_auto_selection_does_not_touch_library(tmp_path):
    for name in ("s1", "s2"):
        run(config(tmp_path, name, seed=len(name) + int(name[1])))
    lib = ModelLibrary(tmp_path / "lib")
    ids = lib.ids()
    opts = {"selection_trials": 31, "min_trials": 30}
    res = run(config(tmp_path, "auto", mode="vanilla-transfer", source_ids="auto", transfer=opts, trials=3))
    assert res.source_id in ids and set(ids) < set(lib.ids()) and len(lib.ids()) == 3


def test_config_validation(tmp_path):
    with pytest.raises(ValidationError):
        config(tmp_path, mode="vanilla-transfer")
    with pytest.raises(ValidationError):
        config(tmp_path, agent={"learning_rate": 1})
    with pytest.raises(ValidationError):
        config(tmp_path, bogus=1)
    with pytest.raises(LibraryError):
        run(config(tmp_path, mode="vanilla-transfer", source_ids=["missing"]))
    path = tmp_path / "cfg.json"
    path.write_text(config(tmp_path).model_dump_json())
    assert ExperimentConfig.load(path, seed=9, trials=None).seed == 9


def test_reference_scenario_documents():
    assert scenario_from_document({"reference": "ref8", "p": 0.4}) == reference_8layer(0.4)
    assert scenario_from_document({"reference": "ref4", "variant": 1}) == reference_4layer(1)
    with pytest.raises(InvalidArgumentError):
        scenario_from_document({"reference": "nope"})


def planted(convergence_at, n=200, low=0.2, high=0.9):
    return [low] * (convergence_at - 1) + [high] * (n - convergence_at + 1)


def test_convergence_and_final_smoothed():
    # EMA of a step from 0.2 to 0.9 first reaches 0.55 exactly at the step
    assert convergence_trial(planted(100), 0.55) == 100
    assert convergence_trial([0.1, 0.2], 0.9) is None
    assert final_smoothed([0.0] * 10 + [1.0] * 21) == 1.0
    assert final_smoothed([0.5, 0.7]) == 0.6
    assert math.isnan(final_smoothed([]))


def test_report_examples():
    base = planted(100)
    rows, thr = report_curves(["base", "self"], [base, base], 0.55)
    assert [r.speedup for r in rows] == [1.0, 1.0]
    rows, _ = report_curves(["base", "vanilla"], [base, planted(50)], 0.55)
    assert rows[1].speedup == 2.0
    # ratios of convergence trials 100:55 and 75:55
    rows, _ = report_curves(["b", "t"], [base, planted(55)], 0.55)
    assert abs(rows[1].speedup - 1.82) < 0.01
    rows, _ = report_curves(["b", "t"], [planted(75), planted(55)], 0.55)
    assert abs(rows[1].speedup - 1.36) < 0.01
    assert report_curves([], []) == ([], None)
    assert report([]) == ([], None)


def test_report_no_converge(tmp_path):
    rows, thr = report_curves(["base", "flat"], [planted(40), [0.2] * 200])
    assert thr == pytest.approx(0.98 * 0.9)
    assert rows[1].convergence_trial is None and rows[1].speedup is None
    assert rows[1].as_dict()["convergence_trial"] == "no-converge"
    rows, _ = report_curves(["flat", "base"], [[0.2] * 200, planted(40)])
    assert rows[1].speedup == math.inf


def test_report_reads_csvs(tmp_path):
    paths = []
    for name, k in (("a", 100), ("b", 50)):
        p = tmp_path / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for t, acc in enumerate(planted(k)):
                w.writerow([t, acc, "", 0, 0.1, "agent"])
        paths.append(p)
    rows, _ = report(paths, 0.55)
    assert rows[1].speedup == 2.0 and rows[0].trials == 200
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    with pytest.raises(InvalidArgumentError):
        report([bad])
