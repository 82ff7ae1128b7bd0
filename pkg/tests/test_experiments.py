import csv
import json

import numpy as np
import pytest

from helpers import zscore
from metaneuron.cli import main
from metaneuron.config import ConfigError, load_config
from metaneuron.datasets import EncodedDataset, save_encoded
from metaneuron.dynamics import ProbeConfig, builtin_types, read_params_file
from metaneuron.experiments import (AccuracyMatrix, capability, emit_traces, layer_for,
                                    neuron_table, read_summaries, run_experiment, summary_std)
from metaneuron.training import read_records

TINY = """
[experiment]
out = results
seeds = 0 1

[task:temporal]
dataset = synthetic_temporal
layer_sizes = 30 12 4
T = 30
batch_size = 20
epochs = 2
lr_w = 1e-2
train_limit = 80
test_limit = 40
temporal_samples_per_class = 20
neuron_types = 1st-order 2nd-SDS

[probe]
horizon = 120

[meta]
source = temporal
epochs = 1
lr_d = 1e-4
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_config_defaults_and_paths(tiny_config):
    cfg = load_config(tiny_config)
    task = cfg.tasks["temporal"]
    assert task.layer_sizes == (30, 12, 4)
    assert task.seeds == (0, 1)
    assert task.out_dir == tiny_config.parent / "results"
    assert task.temporal == {"samples_per_class": 20}
    assert cfg.probe.horizon == 120 and cfg.probe.std == 0.723
    assert cfg.meta.source == "temporal" and cfg.meta.lr_d == 1e-4


def test_table1_defaults_apply(tmp_path):
    save_encoded(EncodedDataset(np.zeros((2, 784, 3)), [0, 1], 10), tmp_path / "d.spk")
    (tmp_path / "c.ini").write_text(
        "[task:mnist]\ndataset = encoded\ntrain_path = d.spk\ntest_path = d.spk\n")
    task = load_config(tmp_path / "c.ini").tasks["mnist"]
    assert (task.layer_sizes, task.batch_size, task.epochs, task.lr_w) == (
        (784, 500, 10), 100, 20, 1e-3)


def test_missing_path_fails_validation(tmp_path):
    (tmp_path / "c.ini").write_text(
        "[task:x]\ndataset = encoded\nlayer_sizes = 2 2 2\n"
        "train_path = nope.spk\ntest_path = nope.spk\n")
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "c.ini")


def test_empty_seeds_rejected(tmp_path):
    (tmp_path / "c.ini").write_text(
        "[task:x]\ndataset = synthetic_temporal\nlayer_sizes = 30 4 4\nseeds =\n")
    with pytest.raises(ConfigError, match="seed"):
        load_config(tmp_path / "c.ini")


def test_seed_and_out_overrides(tiny_config, tmp_path):
    cfg = load_config(tiny_config, out_override=tmp_path / "elsewhere", seed_override=7)
    assert cfg.tasks["temporal"].seeds == (7,)
    assert cfg.out_dir == tmp_path / "elsewhere"


def test_mixed_layer_blocks():
    layer = layer_for("2nd-FS+1st-order", neuron_table(), 6)
    assert list(layer.types) == [0, 0, 0, 1, 1, 1]
    with pytest.raises(KeyError):
        layer_for("2nd-XX", neuron_table(), 3)


def test_run_experiment_outputs(tiny_config):
    task = load_config(tiny_config).tasks["temporal"]
    res = run_experiment(task)
    rows = list(csv.DictReader(res.summary_path.open()))
    assert [r["neuron_type"] for r in rows] == ["1st-order", "2nd-SDS"]
    for row in rows:
        finals = [read_records(task.out_dir / "temporal" / row["neuron_type"] / f"seed{s}.csv")[-1]
                  .test_acc for s in (0, 1)]
        assert float(row["mean_acc"]) == pytest.approx(np.mean(finals), abs=1e-12)
        assert float(row["std_acc"]) == pytest.approx(np.std(finals, ddof=1), abs=1e-12)
        assert row["seeds"] == "0 1"
    assert (task.out_dir / "temporal" / "2nd-SDS" / "seed1.ckpt").exists()


def test_summary_std_counts_every_seed():
    acc = [90.0, 91.0, 92.0, 93.0, 94.0]
    assert summary_std(acc) == pytest.approx(np.sqrt(2.5))
    assert summary_std([90.0]) == 0.0


def test_capability_matches_hand_oracle():
    col = [98.67, 98.33, 94.87, 95.34, 98.69]
    m = AccuracyMatrix([f"t{i}" for i in range(5)], ["mnist"], np.array(col)[:, None])
    cap = capability(m)[:, 0]
    np.testing.assert_allclose(cap, zscore(col), atol=1e-12)
    assert abs(cap.sum() / len(cap)) < 1e-9


def test_capability_errors():
    with pytest.raises(ValueError):
        capability(AccuracyMatrix(["a"], ["t"], [[90.0]]))
    with pytest.raises(ValueError):
        capability(AccuracyMatrix(["a", "b"], ["t"], [[90.0], [90.0]]))
    with pytest.raises(ValueError):
        AccuracyMatrix(["a"], ["t"], [[101.0]])


def test_read_summaries_requires_full_grid(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("task,neuron_type,mean_acc,std_acc,seeds\n"
                 "a,x,90,1,0\na,y,80,1,0\nb,x,70,1,0\n")
    with pytest.raises(ValueError):
        read_summaries([p])


def test_emit_traces_five_files(tmp_path):
    written = emit_traces(builtin_types(), ProbeConfig(), tmp_path)
    assert len(written) == 5 and all(p.exists() for p in written.values())
    rows = list(csv.DictReader((tmp_path / "traces_summary.csv").open()))
    spikes = {r["neuron_type"]: int(r["spikes"]) for r in rows}
    assert spikes["2nd-FS"] > spikes["2nd-RS"]


def test_emit_traces_records_divergence(tmp_path):
    from metaneuron.dynamics import DynamicParams
    named = {"bad": DynamicParams.second_order(0.0, 0.0, -0.1, 0.0, v_th=1e9),
             "ok": builtin_types()["2nd-RS"]}
    written = emit_traces(named, ProbeConfig(), tmp_path)
    assert written["bad"] is None and written["ok"].exists()
    status = {r["neuron_type"]: r["status"]
              for r in csv.DictReader((tmp_path / "traces_summary.csv").open())}
    assert status["bad"].startswith("diverged")


def test_cli_train_twice_is_byte_identical(tiny_config, tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["--config", str(tiny_config), "--out", str(out), "--seed", "3",
                     "train", "--types", "2nd-FS"]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel


def test_cli_eval_matches_training_record(tiny_config, tmp_path, capsys):
    out = tmp_path / "o"
    main(["--config", str(tiny_config), "--out", str(out), "--seed", "0", "train",
          "--types", "2nd-RS"])
    capsys.readouterr()
    main(["--config", str(tiny_config), "eval", str(out / "temporal" / "2nd-RS" / "seed0.ckpt"),
          "--task", "temporal"])
    printed = float(capsys.readouterr().out.strip())
    final = read_records(out / "temporal" / "2nd-RS" / "seed0.csv")[-1].test_acc
    assert printed == pytest.approx(final, abs=0.005)


def test_cli_capability(tmp_path, capsys):
    s = tmp_path / "summary.csv"
    s.write_text("task,neuron_type,mean_acc,std_acc,seeds\n"
                 "mnist,a,98.67,0,0\nmnist,b,98.33,0,0\nmnist,c,94.87,0,0\n")
    assert main(["capability", str(s), "-o", str(tmp_path / "cap.csv")]) == 0
    rows = list(csv.DictReader((tmp_path / "cap.csv").open()))
    np.testing.assert_allclose([float(r["cap"]) for r in rows], zscore([98.67, 98.33, 94.87]))


def test_cli_traces(tmp_path):
    assert main(["--out", str(tmp_path), "traces"]) == 0
    assert len(list(tmp_path.glob("trace_*.csv"))) == 5


def test_cli_encode_synthetic(tmp_path):
    from metaneuron.datasets import load_encoded
    out = tmp_path / "t.spk"
    assert main(["--seed", "2", "encode", "--synthetic", "-T", "30", "-o", str(out)]) == 0
    ds = load_encoded(out)
    assert ds.spikes.shape == (400, 30, 30) and ds.descriptor["seed"] == 2


def test_cli_meta_writes_params_and_report(tiny_config, tmp_path):
    out = tmp_path / "m"
    code = main(["--config", str(tiny_config), "--out", str(out), "meta"])
    report = json.loads((out / "meta" / "meta_report.json").read_text())
    assert len(report["candidates"]) == report["m_ab"] * report["m_cd"]
    assert all("reason" in d for d in report["discarded"])
    if code == 0:
        params = read_params_file(out / "meta" / "meta_params.csv")
        assert len(params) == len(report["selected"])
        assert all(label.startswith("meta-") for label in params)
    else:
        assert code == 2 and not report["selected"]


def test_cli_requires_config(capsys):
    with pytest.raises(SystemExit):
        main(["train"])
