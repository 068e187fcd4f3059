import json

import pytest

from sci.cli import build_parser, main
from sci.sigsim import read_stream


def test_gen_writes_readable_stream(tmp_path, capsys):
    out = tmp_path / "s.ndjson"
    rc = main(["gen", "--preset", "synthetic-class", "--windows", "6",
               "--seed", "3", "--out", str(out)])
    assert rc == 0
    cfg, windows = read_stream(str(out))
    assert len(windows) == 6
    assert cfg.kind == "tones"
    assert cfg.seed == 3
    assert [w.seq for w in windows] == list(range(6))
    assert "wrote 6 windows" in capsys.readouterr().out


def test_gen_start_seq_offsets_sequence(tmp_path):
    out = tmp_path / "s.ndjson"
    main(["gen", "--preset", "bearing", "--windows", "3",
          "--seed", "1", "--start-seq", "40", "--out", str(out)])
    _, windows = read_stream(str(out))
    assert [w.seq for w in windows] == [40, 41, 42]


def test_report_renders_saved_run(tmp_path, capsys):
    report = {
        "preset": "demo", "seeds": [1],
        "aggregate": {
            "mean_error_rate": 0.1, "pooled_errors": 4, "mean_auroc": 0.9,
            "mean_steps_correct": 5.0, "mean_steps_wrong": 15.0,
            "allocation_ratio": 3.0, "error_at_half_coverage": 0.05,
            "error_at_full_coverage": 0.1, "mean_sci_accuracy": 0.93,
            "mean_sci_steps": 6.0, "mean_fixed16_accuracy": 0.92,
            "mean_abstention_rate": 0.02,
            "mean_descent_violation_fraction": 0.0,
        },
        "per_seed": {
            "1": {"error_rate": 0.1, "n_errors": 4, "auroc": 0.9,
                  "allocation": {"ratio": 3.0},
                  "sci": {"accuracy": 0.93, "mean_steps": 6.0},
                  "abstention_rate": 0.02,
                  "fixed_k": {"16": {"accuracy": 0.92, "mean_steps": 16.0}}},
        },
    }
    (tmp_path / "report.json").write_text(json.dumps(report))
    rc = main(["report", str(tmp_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "preset: demo" in out
    assert "0.9000" in out


def test_report_missing_dir_fails_cleanly(tmp_path, capsys):
    rc = main(["report", str(tmp_path / "nowhere")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_preset_fails_cleanly(tmp_path, capsys):
    rc = main(["gen", "--preset", "ghost", "--windows", "1",
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "unknown preset" in capsys.readouterr().err


def test_parser_covers_all_subcommands():
    p = build_parser()
    for argv in (["gen", "--preset", "x", "--out", "f"],
                 ["run", "--preset", "x"],
                 ["report", "d"],
                 ["sweep", "--preset", "x"],
                 ["serve", "--port", "1"]):
        args = p.parse_args(argv)
        assert callable(args.fn)


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
