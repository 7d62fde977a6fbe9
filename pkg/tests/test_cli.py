import re
import subprocess
import sys

import pytest

from lowrank_nas import checkpoint as ckpt
from lowrank_nas import pipeline
from lowrank_nas.cli import main
from lowrank_nas.vit import LowRankLinear, evaluate

SMALL = """\
data.samples_per_class = 60
train.base_epochs = 6
supernet.epochs = 2
filter.top_k = 3
filter.local_epochs = 1
filter.exhaustive_cap = 64
ea.population = 8
ea.generations = 2
window.lower = 0.3
window.upper = 0.6
"""

STAGE_ARTIFACTS = [
    ("gen-data", [pipeline.DATA]),
    ("train-base", [pipeline.BASE, pipeline.BASE_TRACE]),
    ("decompose", [pipeline.DECOMPOSED]),
    ("filter", [pipeline.FILTER_REPORT]),
    ("train-supernet", [pipeline.SUPERNET, pipeline.SUPERNET_TRACE]),
    ("search", [pipeline.SEARCH_REPORT]),
]


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def fields(line):
    return dict(tok.split("=", 1) for tok in line.split() if "=" in tok)


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.txt"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def staged(tmp_path_factory, small_config):
    """Run the stages one at a time, recording eval output right after decompose."""
    out = tmp_path_factory.mktemp("run")
    record = {}
    for stage, artifacts in STAGE_ARTIFACTS:
        argv = [stage, "--out", str(out)]
        if stage == "gen-data":
            argv += ["--config", str(small_config)]
        assert main(argv) == 0, stage
        record[stage] = [(out / a).exists() for a in artifacts]
        if stage == "decompose":
            record["eval-after-decompose"] = _eval_fields(out, "full")
    return out, record


def _eval_fields(out, spec):
    line = pipeline.run_eval(pipeline_config(out), out, spec)
    return fields(line)


def pipeline_config(out):
    from lowrank_nas.config import load_config
    return load_config(out / "config.txt")


def test_each_stage_writes_its_artifacts(staged):
    _, record = staged
    for stage, _ in STAGE_ARTIFACTS:
        assert all(record[stage]), stage


def test_full_rank_eval_after_decompose_matches_base(staged):
    out, record = staged
    ds, sp = pipeline.load_data(out)
    base_acc = evaluate(ckpt.load_model(out / pipeline.BASE), ds, sp["val"])
    acc = float(record["eval-after-decompose"]["acc"])
    assert abs(acc - base_acc) <= 0.005


def test_summary_lines_and_config_persistence(staged, capsys):
    out, _ = staged
    code, stdout, _ = run(capsys, "eval", "--out", str(out), "--rank-config", "uniform:4")
    assert code == 0
    f = fields(stdout.strip())
    assert set(f) == {"config", "acc", "flops", "params"}
    assert f["config"] == ",".join(["4"] * 12)
    # stored config keeps the small overrides for later stages
    assert "data.samples_per_class = 60" in (out / "config.txt").read_text()


def test_search_report_records(staged):
    out, _ = staged
    lines = (out / pipeline.SEARCH_REPORT).read_text().splitlines()
    gens = [fields(x) for x in lines if x.startswith("gen=")]
    ranked = [fields(x) for x in lines if x.startswith("rank=")]
    assert [int(g["gen"]) for g in gens] == [0, 1, 2]
    assert ranked and all({"config", "acc", "flops", "params"} <= set(r) for r in ranked)
    accs = [float(r["acc"]) for r in ranked]
    assert accs == sorted(accs, reverse=True)


def test_eval_best_and_export(staged, capsys):
    out, _ = staged
    code, stdout, _ = run(capsys, "eval", "--out", str(out), "--rank-config", "best")
    assert code == 0
    best = fields(stdout.strip())
    code, stdout, _ = run(capsys, "export", "--out", str(out), "--rank-config", "best", "--name", "best.flra")
    assert code == 0 and "best.flra" in stdout
    model = ckpt.load_model(out / "best.flra")
    ranks = [int(r) for r in best["config"].split(",")]
    slots = [s.slot_id for s in model.cfg.slots()]
    for sid, r in zip(slots, ranks):
        assert isinstance(model.slots[sid], LowRankLinear)
        assert model.slots[sid].U.shape[1] == r
    ds, sp = pipeline.load_data(out)
    assert repr(evaluate(model, ds, sp["val"])) == best["acc"]


def test_report_has_pareto_table(staged, capsys):
    out, _ = staged
    code, stdout, _ = run(capsys, "report", "--out", str(out))
    assert code == 0
    assert "filter block 0" in stdout and "filter block 1" in stdout
    assert "pareto" in stdout
    rows = [line.split() for line in stdout.splitlines() if re.match(r"^\s+\d+\s+[01]\.\d+\s+[\d,]+$", line)]
    assert rows
    flops = [int(r[0]) for r in rows]
    accs = [float(r[1]) for r in rows]
    assert flops == sorted(flops) and accs == sorted(accs)


def test_missing_prerequisite_names_file(tmp_path, capsys):
    code, _, err = run(capsys, "decompose", "--out", str(tmp_path))
    assert code == 3
    assert pipeline.BASE in err or pipeline.DATA in err
    code, _, err = run(capsys, "search", "--out", str(tmp_path))
    assert code == 3 and ".flra" in err


def test_unknown_key_exits_with_config_code(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path), "--bogus.key", "1")
    assert code == 2 and "bogus.key" in err
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path), "--model.width=3")
    assert code == 2 and "model.width" in err
    bad = tmp_path / "bad.txt"
    bad.write_text("ea.population = many\n")
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path / "x"), "--config", str(bad))
    assert code == 2 and "ea.population" in err


def test_bad_rank_config(staged, capsys):
    out, _ = staged
    code, _, err = run(capsys, "eval", "--out", str(out), "--rank-config", "uniform:x")
    assert code == 2 and "rank-config" in err


def test_infeasible_window_exit_code(tmp_path, staged, capsys):
    out, _ = staged
    for name in [pipeline.DATA, pipeline.DECOMPOSED, pipeline.FILTER_REPORT, pipeline.SUPERNET, "config.txt"]:
        (tmp_path / name).write_bytes((out / name).read_bytes())
    code, _, err = run(capsys, "search", "--out", str(tmp_path), "--window.lower", "0.01", "--window.upper", "0.02")
    assert code == 5 and "window" in err.lower()


def test_keys_command(capsys):
    code, stdout, _ = run(capsys, "keys")
    assert code == 0 and "ea.population" in stdout and "supernet.sampling" in stdout


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lowrank_nas", "search", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 3
    assert proc.stderr.startswith("error:")
