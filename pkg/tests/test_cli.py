from __future__ import annotations

import io
import json
import re

import pytest
import yaml

from skillmux.cli import build_parser, build_run_config, main
from skillmux.registry import default_config_text, option_letter

EXPERTS = ("omnicaptioner", "nvila", "qwen-omni", "leo", "spartun3d")


def scripted(id, *pairs, latency_ms=0, **extra):
    spec = {"id": id, "kind": "scripted", "script": [{"contains": c, "response": r} for c, r in pairs], **extra}
    if latency_ms:
        spec["latency_ms"] = latency_ms
    return spec


def write_config(tmp_path, backends, router="router", aggregator="agg"):
    doc = yaml.safe_load(default_config_text())
    doc["backends"] = backends
    doc["router"]["backend"] = router
    doc["aggregator"]["backend"] = aggregator
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return str(path)


def expert_backends(latency_ms=0, **texts):
    return [
        scripted(b, ("[user]", texts.get(b.replace("-", "_"), f"{b} caption")), latency_ms=latency_ms) for b in EXPERTS
    ]


def run(argv, environ=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, stdout=out, stderr=err, environ=environ or {})
    return code, out.getvalue(), err.getvalue()


# --- ask -----------------------------------------------------------------------


def ask_config(tmp_path):
    return write_config(
        tmp_path,
        [
            scripted("router", ("Selected IDs:", "C1, C2")),
            scripted("agg", ("Question:", "The window is behind you, so the answer is (B).")),
            scripted("mono", ("Question:", "Answer: A"), modalities=["PointCloud3D", "Text"]),
            *expert_backends(
                leo="scene: a sofa faces a tv; a window is on the far wall.",
                spartun3d="situated: you are facing the sofa; the window is behind you.",
            ),
        ],
    )


GOLDEN_TRACE = """\
[mode] pipeline
[router] selected: C1, C2
[router] raw response: C1, C2
[expert C1] scene: a sofa faces a tv; a window is on the far wall.
[expert C2] situated: you are facing the sofa; the window is behind you.
[answer] B. window (letter-pattern)
[rationale] The window is behind you, so the answer is
"""


def test_ask_golden_trace(tmp_path):
    scene = tmp_path / "room.ply"
    scene.write_bytes(b"ply\nfake point cloud\n")
    code, out, err = run(
        ["ask", "What is behind me?", "-o", "sofa", "-o", "window", "-o", "tv", "-o", "door",
         "--asset", str(scene), "--config", ask_config(tmp_path), "--task-context", "3D situated QA"]
    )
    assert (code, err) == (0, "")
    assert out == GOLDEN_TRACE


def test_ask_missing_asset_exits_2(tmp_path):
    missing = tmp_path / "nope.ply"
    code, _out, err = run(["ask", "Q?", "-o", "a", "-o", "b", "--asset", str(missing), "--config", ask_config(tmp_path)])
    assert code == 2
    assert str(missing) in err


def test_ask_direct_baseline_has_no_router_or_expert_stages(tmp_path):
    scene = tmp_path / "room.ply"
    scene.write_bytes(b"ply")
    code, out, _ = run(
        ["ask", "What is behind me?", "-o", "sofa", "-o", "window", "--asset", f"PointCloud3D={scene}",
         "--config", ask_config(tmp_path), "--mode", "direct-baseline", "--direct-backend", "mono"]
    )
    assert code == 0
    assert "[router]" not in out and "[expert" not in out
    assert out.startswith("[mode] direct-baseline\n")
    assert "[answer] A. sofa (letter-pattern)" in out


def test_verbosity_zero_prints_only_the_answer(tmp_path):
    scene = tmp_path / "room.ply"
    scene.write_bytes(b"ply")
    code, out, _ = run(
        ["ask", "Q?", "-o", "sofa", "-o", "window", "--asset", str(scene), "--config", ask_config(tmp_path),
         "--verbosity", "0"]
    )
    assert code == 0
    assert out == "[mode] pipeline\n[answer] B. window (letter-pattern)\n"


def test_unknown_backend_is_a_config_error(tmp_path):
    code, _, err = run(["ask", "Q?", "-o", "a", "-o", "b", "--config", ask_config(tmp_path), "--router-backend", "ghost"])
    assert code == 2 and "ghost" in err


def test_model_failure_exits_1(tmp_path):
    cfg = write_config(tmp_path, [scripted("router", ("never", "A1")), scripted("agg", ("x", "A")), *expert_backends()])
    img = tmp_path / "p.png"
    img.write_bytes(b"png")
    code, _, err = run(["ask", "Q?", "-o", "a", "-o", "b", "--asset", str(img), "--config", cfg])
    assert code == 1 and "[router]" in err


def test_setting_precedence():
    parser = build_parser()
    environ = {"SKILLMUX_FAN_OUT": "3", "SKILLMUX_MAX_CONCURRENCY": "5"}
    args = parser.parse_args(["bench", "d.jsonl", "--fan-out", "2"])
    cfg = build_run_config(args, environ)
    assert cfg.fan_out == 2  # flag beats env
    assert cfg.max_concurrency == 5  # env beats config
    assert cfg.verbosity == 2  # config run{} default
    assert build_run_config(parser.parse_args(["bench", "d.jsonl"]), {}).fan_out == 4


def test_wildcard_expert_backend():
    args = build_parser().parse_args(["bench", "d.jsonl", "--expert-backend", "*=gpt-4o"])
    cfg = build_run_config(args, {})
    assert set(cfg.expert_backends.values()) == {"gpt-4o"} and len(cfg.expert_backends) == 17


# --- bench -----------------------------------------------------------------------

TRUTH = [True, False, True, True, True, False, True, True, False, True]


def bench_setup(tmp_path, expert_latency=20):
    rows, agg = [], []
    for i, ok in enumerate(TRUTH):
        (tmp_path / f"img{i}.png").write_bytes(f"pixels {i}".encode())
        gold = (i * 3) % 4
        question = f"[b{i:02d}] What does the figure show?"
        rows.append(
            {
                "id": f"b{i:02d}",
                "task_context": "figure QA",
                "question": question,
                "options": ["w", "x", "y", "z"],
                "gold_index": gold,
                "assets": [{"modality": "Image", "uri": f"img{i}.png"}],
                "categories": {"discipline": "Med" if i % 2 else "Sci"},
            }
        )
        agg.append((question, f"Answer: {option_letter(gold if ok else (gold + 2) % 4)}"))
    manifest = tmp_path / "figs.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
    cfg = write_config(
        tmp_path,
        [
            scripted("router", ("Selected IDs:", "A1, F1")),
            scripted("router-b", ("Selected IDs:", "A1")),
            scripted("agg", *agg),
            scripted("agg-b", ("Question:", "Answer: A")),
            *expert_backends(latency_ms=expert_latency),
        ],
    )
    return str(manifest), cfg


def summary_row(out, label):
    m = re.search(rf"^{re.escape(label)}\s+([\d.]+)%\s+\((\d+)/(\d+)\)", out, re.MULTILINE)
    assert m, out
    return m.group(1), int(m.group(2)), int(m.group(3))


def expert_latency(out):
    return int(re.search(r"experts=(\d+)", out).group(1))


def test_bench_summary(tmp_path):
    manifest, cfg = bench_setup(tmp_path)
    report = tmp_path / "out.json"
    code, out, err = run(["bench", manifest, "--config", cfg, "--out", str(report)])
    assert code == 0, err
    assert summary_row(out, "Overall") == ("70.0", 7, 10)
    med = [ok for i, ok in enumerate(TRUTH) if i % 2]
    sci = [ok for i, ok in enumerate(TRUTH) if not i % 2]
    assert summary_row(out, "discipline=Med")[1:] == (sum(med), len(med))
    assert summary_row(out, "discipline=Sci")[1:] == (sum(sci), len(sci))
    data = json.loads(report.read_text())
    assert data["overall"]["percent"] == "70.0" and data["n_items"] == 10


def test_bench_filter(tmp_path):
    manifest, cfg = bench_setup(tmp_path)
    code, out, _ = run(["bench", manifest, "--config", cfg, "--filter", "discipline=Med", "--out", str(tmp_path / "r.json")])
    assert code == 0
    data = json.loads((tmp_path / "r.json").read_text())
    assert {r["categories"]["discipline"] for r in data["records"]} == {"Med"}
    assert data["n_items"] == 5
    assert "discipline=Sci" not in out


def test_bench_warm_cache(tmp_path):
    manifest, cfg = bench_setup(tmp_path)
    cache = tmp_path / "cache"
    argv = ["bench", manifest, "--config", cfg, "--cache-dir", str(cache), "--out", str(tmp_path / "r.json")]
    _, cold, _ = run(argv)
    _, warm, _ = run(argv)
    assert summary_row(cold, "Overall") == summary_row(warm, "Overall")
    assert expert_latency(cold) == 10 * 2 * 20
    assert expert_latency(warm) == 0
    code, out, _ = run(["cache", "--cache-dir", str(cache)])
    assert code == 0 and out.startswith("20 cached expert outputs")


def test_bench_default_output_name(tmp_path, monkeypatch):
    manifest, cfg = bench_setup(tmp_path, expert_latency=0)
    monkeypatch.chdir(tmp_path)
    code, _out, _ = run(["bench", manifest, "--config", cfg])
    assert code == 0
    assert (tmp_path / "figs.report.json").is_file()


def test_bench_empty_after_filter(tmp_path):
    manifest, cfg = bench_setup(tmp_path, expert_latency=0)
    code, _, err = run(["bench", manifest, "--config", cfg, "--filter", "discipline=Art"])
    assert code == 2 and "empty dataset" in err


# --- ablate ----------------------------------------------------------------------


def test_ablate_two_by_two(tmp_path):
    manifest, cfg = bench_setup(tmp_path, expert_latency=0)
    code, out, err = run(
        ["ablate", manifest, "--config", cfg, "--router", "router", "--router", "router-b",
         "--aggregator", "agg", "--aggregator", "agg-b"]
    )
    assert code == 0, err
    lines = out.splitlines()
    assert lines[0].split() == ["Router", "Aggregator", "figs"]
    gold_a = sum((i * 3) % 4 == 0 for i in range(10))
    a_pct = f"{100 * gold_a / 10:.1f}"
    assert [line.split() for line in lines[2:]] == [
        ["router", "agg", "70.0"],
        ["router", "agg-b", a_pct],
        ["router-b", "agg", "70.0"],
        ["router-b", "agg-b", a_pct],
    ]


def test_ablate_one_by_one_matches_bench(tmp_path):
    manifest, cfg = bench_setup(tmp_path, expert_latency=0)
    _, bench_out, _ = run(["bench", manifest, "--config", cfg, "--out", str(tmp_path / "r.json")])
    _, out, _ = run(["ablate", manifest, "--config", cfg, "--router", "router", "--aggregator", "agg"])
    rows = out.splitlines()[2:]
    assert len(rows) == 1
    assert rows[0].split()[-1] == summary_row(bench_out, "Overall")[0]


def test_ablate_empty_router_list(tmp_path):
    manifest, cfg = bench_setup(tmp_path, expert_latency=0)
    code, _, err = run(["ablate", manifest, "--config", cfg, "--aggregator", "agg"])
    assert code == 2 and "--router" in err


# --- stats -----------------------------------------------------------------------


def suite_3d(tmp_path):
    rows = []
    for i in range(12):
        (tmp_path / f"scan{i}.ply").write_bytes(f"scan {i}".encode())
        rows.append(
            {
                "id": f"s{i:02d}",
                "question": f"[s{i:02d}] What is on my left?",
                "options": ["bed", "desk", "lamp", "door"],
                "gold_index": 1,
                "assets": [{"modality": "PointCloud3D", "uri": f"scan{i}.ply"}],
            }
        )
    manifest = tmp_path / "sqa.jsonl"
    manifest.write_text("".join(json.dumps(r) + "\n" for r in rows))
    replies = ["C1, C2", "C2", "C1, C2, A1", "C2, C1"]
    script = [(f"[s{i:02d}]", replies[i % 4]) for i in range(12)]
    cfg = write_config(
        tmp_path, [scripted("router", *script), scripted("agg", ("Question:", "B")), *expert_backends()]
    )
    return str(manifest), cfg


def test_stats_on_3d_suite(tmp_path):
    manifest, cfg = suite_3d(tmp_path)
    report = tmp_path / "sqa.json"
    assert run(["bench", manifest, "--config", cfg, "--out", str(report)])[0] == 0
    code, out, _ = run(["stats", str(report)])
    assert code == 0
    rows = [line.split() for line in out.splitlines()[1:-1]]
    assert [r[0] for r in rows] == ["C2", "C1"]
    counts = {r[0]: int(r[1]) for r in rows}
    assert counts == {"C2": 12, "C1": 9}
    total = sum(counts.values())
    for skill, count, pct in rows:
        assert float(pct.rstrip("%")) == pytest.approx(100 * int(count) / total, abs=0.05)
    assert sum(float(r[2].rstrip("%")) for r in rows) == pytest.approx(100.0, abs=0.05 * len(rows))

    code, out, _ = run(["stats", str(report), "--json"])
    payload = json.loads(out)
    assert payload["counts"] == counts and payload["total_selections"] == 21


def test_stats_empty_report(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"name": "e", "records": []}))
    code, out, _ = run(["stats", str(path)])
    assert code == 0 and out == "no selections recorded\n"


def test_stats_missing_report(tmp_path):
    code, _, err = run(["stats", str(tmp_path / "none.json")])
    assert code == 2 and "none.json" in err
