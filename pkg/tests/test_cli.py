import json
import os

import pytest

from conftest import FIXTURES
from dnq.cli import FLAG_KEYS, build_parser, load_config, main
from dnq.config import Config

CORPUS = str(FIXTURES / "twohop_corpus.jsonl")
QUESTIONS = str(FIXTURES / "twohop_questions.json")
SCRIPTS = str(FIXTURES / "twohop_scripts.jsonl")


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for name in list(os.environ):
        if name.startswith("DNQ_"):
            monkeypatch.delenv(name)
    return tmp_path


def files_under(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file())


def test_unknown_flag_exits_1_and_names_it(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--question", "q", "--bogus-flag", "1"])
    assert exc.value.code == 1
    assert "--bogus-flag" in capsys.readouterr().err


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    for command in ("build-base", "aggregate", "run", "eval", "export-sft"):
        with pytest.raises(SystemExit) as exc:
            main([command, "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        sub = parser._subparsers._group_actions[0].choices[command]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in out
            if action.option_strings and action.dest != "help":
                assert action.help, f"{command} {action.option_strings} lacks help text"


def test_every_flag_roundtrips_through_config():
    values = {
        "toolset": "chitchat", "base": "b", "corpus": "c", "backend": "live", "workers": "3",
        "max_calls": "7", "max_depth": "2", "max_steps": "9", "retries": "1", "log": "json",
        "log_level": "INFO",
    }
    assert set(values) == set(FLAG_KEYS)
    argv = ["eval", "--dataset", "d", "--out", "o"]
    for dest, value in values.items():
        argv += ["--" + dest.replace("_", "-"), value]
    args = build_parser().parse_args(argv)
    cfg = load_config(args)
    for dest, key in FLAG_KEYS.items():
        assert str(cfg.get(key)) == values[dest]
    again = Config.from_toml(cfg.to_toml())
    assert again == cfg and again.to_toml() == cfg.to_toml()


def test_config_error_exits_1(tmp_path, capsys):
    (tmp_path / "bad.toml").write_text("[budget]\nnope = 1\n")
    assert main(["run", "--question", "q", "--config", "bad.toml"]) == 1
    assert "budget.nope" in capsys.readouterr().err


def test_run_prints_answer_and_writes_trajectory(tmp_path, capsys):
    script = tmp_path / "script.txt"
    script.write_text("[ArticleRetriever] Varnholt Bridge designer\n[Finish] Mirela Quance\n")
    code = main(["run", "--question", "Who designed Varnholt Bridge?", "--toolset", "wiki",
                 "--backend", "offline", "--corpus", CORPUS, "--script", str(script),
                 "--out", "traj.jsonl"])
    assert code == 0
    assert capsys.readouterr().out == "Mirela Quance\n"
    row = json.loads((tmp_path / "traj.jsonl").read_text())
    assert row["final_answer"] == "Mirela Quance" and row["schema_version"] == 1
    assert files_under(tmp_path) == ["script.txt", "traj.jsonl"]


def test_run_failure_exit_codes(tmp_path, capsys):
    # No backend configured: the policy fails and the episode is not Finished.
    assert main(["run", "--question", "q", "--corpus", CORPUS]) == 2
    # Missing corpus is a usage problem.
    assert main(["run", "--question", "q"]) == 1
    # Unreadable corpus is a runtime failure.
    assert main(["run", "--question", "q", "--corpus", "missing.jsonl"]) == 2


def test_eval_writes_report_items_and_figures(tmp_path, capsys):
    code = main(["eval", "--dataset", QUESTIONS, "--toolset", "wiki", "--backend", "offline",
                 "--corpus", CORPUS, "--scripts", SCRIPTS, "--baseline", "--workers", "2",
                 "--out", "report.json", "--figures", "figs", "--traj-out", "traj.jsonl"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["em"] == 1.0 and summary["recall"] == 1.0
    assert summary["baseline"]["recall"] == 0.5
    assert files_under(tmp_path) == [
        "figs/metrics.png", "figs/retrieval.png", "figs/terminations.png",
        "report.items.jsonl", "report.json", "traj.jsonl",
    ]
    for name in ("metrics.png", "retrieval.png", "terminations.png"):
        assert (tmp_path / "figs" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_eval_without_figures_writes_no_images(tmp_path, capsys):
    assert main(["eval", "--dataset", QUESTIONS, "--corpus", CORPUS, "--scripts", SCRIPTS,
                 "--out", "r.json", "--items-out", "items.jsonl"]) == 0
    assert files_under(tmp_path) == ["items.jsonl", "r.json"]


def test_aggregate_command(tmp_path, capsys):
    data = json.loads((FIXTURES / "viewpoints_answers.json").read_text())
    rows = [data, {"question": "Who wrote Hamlet?", "answers": ["Shakespeare", "Marlowe", "shakespeare"]}]
    (tmp_path / "in.jsonl").write_text("\n".join(json.dumps(r) for r in rows))
    assert main(["aggregate", "--input", "in.jsonl", "--out", "out.jsonl"]) == 0
    out = [json.loads(line) for line in (tmp_path / "out.jsonl").read_text().splitlines()]
    assert out[1]["question_type"] == "Objective" and out[1]["aggregated_answer"] == "Shakespeare"
    assert out[1]["viewpoints"] is None
    # "What is X?" reads as factual to the keyword classifier; force the type.
    assert out[0]["question_type"] == "Objective"
    assert main(["aggregate", "--input", "in.jsonl", "--out", "out.jsonl",
                 "--question-type", "subjective"]) == 0
    out = [json.loads(line) for line in (tmp_path / "out.jsonl").read_text().splitlines()]
    assert out[0]["question_type"] == "Subjective"
    assert out[0]["aggregated_answer"].startswith("Viewpoint: ")
    ids = sorted(i for vp in out[0]["viewpoints"] for i in vp["answer_ids"])
    assert len(ids) == 10 and len(set(ids)) == 10


def test_pipeline_build_run_export(tmp_path, capsys):
    assert main(["build-base", "--input", str(FIXTURES / "raw_pairs.jsonl"), "--out", "base",
                 "--top-k", "10", "--epsilon1", "0.5", "--epsilon2", "0.5"]) == 0
    assert main(["run", "--question", "who wrote hamlet?", "--toolset", "chitchat", "--base", "base",
                 "--out", "t.jsonl"]) == 0
    assert main(["export-sft", "--traj", "t.jsonl", "--mode", "single", "--out", "s.jsonl"]) == 0
    (example,) = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    assert example["turns"][-1] == {"role": "assistant", "content": "[Finish] William Shakespeare",
                                    "train_on": True}
    assert files_under(tmp_path) == ["base/postings.json", "base/records.jsonl", "s.jsonl", "t.jsonl"]


def test_json_logs_on_stderr(tmp_path, capsys):
    main(["run", "--question", "q", "--corpus", CORPUS, "--log", "json", "--log-level", "INFO"])
    err = capsys.readouterr().err.strip().splitlines()
    records = [json.loads(line) for line in err if line.startswith("{")]
    assert records and all({"ts", "level", "logger", "msg"} <= set(r) for r in records)
