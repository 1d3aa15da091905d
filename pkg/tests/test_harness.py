from __future__ import annotations

import json
from fractions import Fraction

import pytest
from synthetic import generic_experts

from skillmux.errors import DatasetError
from skillmux.experts import ExpertCache
from skillmux.gateway import Gateway, scripted_backend
from skillmux.harness import (
    DIRECT,
    PIPELINE,
    BenchmarkItem,
    ItemRecord,
    PipelineConfig,
    RunReport,
    evaluate,
    filter_items,
    format_ablation_table,
    format_percent,
    load_dataset,
    run_ablation,
    selection_histogram,
)
from skillmux.media import MediaRef, Modality
from skillmux.registry import default_registry, option_letter

REG = default_registry()


def write_manifest(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def row(i, **kw):
    base = {
        "id": f"it-{i}",
        "task_context": "qa",
        "question": f"Question {i}?",
        "options": ["w", "x", "y", "z"],
        "gold_index": 1,
        "assets": [{"modality": "image", "uri": f"img{i}.png"}],
        "categories": {"discipline": "Sci"},
    }
    base.update(kw)
    return base


# --- manifest loading --------------------------------------------------------


def test_load_three_items(tmp_path):
    items = load_dataset(write_manifest(tmp_path / "m.jsonl", [row(1), row(2), row(3)]))
    assert [i.id for i in items] == ["it-1", "it-2", "it-3"]
    assert items[0].assets[0].uri == str(tmp_path / "img1.png")
    assert items[0].assets[0].modality is Modality.IMAGE


def test_gold_index_out_of_range_names_the_line(tmp_path):
    path = write_manifest(tmp_path / "m.jsonl", [row(1), row(2, gold_index=4)])
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)


def test_duplicate_id_is_named(tmp_path):
    path = write_manifest(tmp_path / "m.jsonl", [row(1), row(2), row(1)])
    with pytest.raises(DatasetError, match="it-1") as err:
        load_dataset(path)
    assert "line 3" in str(err.value)


@pytest.mark.parametrize(
    "bad",
    [
        "{not json",
        json.dumps(row(1, options=["only"])),
        json.dumps(row(1, extra=True)),
        json.dumps(row(1, assets=[{"modality": "smell", "uri": "x"}])),
        json.dumps({"id": "x", "options": ["a", "b"], "gold_index": 0}),
    ],
)
def test_malformed_lines(tmp_path, bad):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(row(0)) + "\n" + bad + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(path)


def test_filter_items():
    items = [
        BenchmarkItem(f"i{k}", "", "q", ("a", "b"), 0, (), {"discipline": d}) for k, d in enumerate("MSSM")
    ]
    assert [i.id for i in filter_items(items, {"discipline": "M"})] == ["i0", "i3"]
    assert filter_items(items, {}) == items


# --- evaluation ----------------------------------------------------------------


TRUTH = [True, True, False, True, True, False, True, True, False, True]


def ten_items():
    items, agg_script = [], []
    for i, ok in enumerate(TRUTH):
        gold = i % 4
        question = f"[t{i:02d}] Which one?"
        items.append(
            BenchmarkItem(
                f"t{i:02d}",
                "qa",
                question,
                ("w", "x", "y", "z"),
                gold,
                (MediaRef.from_bytes(Modality.IMAGE, f"img{i}".encode(), f"i{i}"),),
                {"discipline": "Med" if i < 4 else "Sci"},
            )
        )
        agg_script.append((question, f"Answer: {option_letter(gold if ok else (gold + 1) % 4)}"))
    return items, agg_script


def config(items_script, router_reply="A1", **kw):
    _, agg_script = items_script
    gw = Gateway(
        [
            scripted_backend([("Selected IDs:", router_reply)], id="router"),
            scripted_backend(agg_script, id="agg"),
            scripted_backend([("Question:", "A")], id="mono"),
            *generic_experts(),
        ]
    )
    kw.setdefault("cache", ExpertCache())
    return PipelineConfig(REG, gw, router_backend="router", aggregator_backend="agg", direct_backend="mono", **kw)


def test_overall_accuracy_matches_hand_count():
    data = ten_items()
    report = evaluate(config(data), data[0])
    assert sum(TRUTH) == 7
    assert report.overall_accuracy == 0.7
    assert report.accuracy == Fraction(7, 10)
    assert report.to_dict()["overall"]["percent"] == "70.0"


def test_empty_dataset():
    with pytest.raises(ValueError, match="empty dataset"):
        evaluate(config(ten_items()), [])


def test_per_category_keys_and_values():
    data = ten_items()
    report = evaluate(config(data), data[0])
    assert set(report.per_category["discipline"]) == {"Med", "Sci"}
    assert report.per_category["discipline"]["Med"] == Fraction(sum(TRUTH[:4]), 4)
    assert report.per_category["discipline"]["Sci"] == Fraction(sum(TRUTH[4:]), 6)


def test_records_are_sorted_and_round_trip(tmp_path):
    data = ten_items()
    report = evaluate(config(data, max_concurrency=4), data[0][::-1])
    assert [r.item_id for r in report.records] == sorted(r.item_id for r in report.records)
    path = tmp_path / "r.json"
    report.write(path)
    again = RunReport.read(path)
    assert again.to_json() == report.to_json()


def test_failed_items_are_counted_and_scored_wrong():
    items, agg_script = ten_items()
    report = evaluate(config((items, agg_script[:8])), items)
    assert report.n_failed == 2
    assert all(r.error_stage == "aggregator" for r in report.records if r.failed)
    assert report.n_correct == sum(TRUTH[:8])


def test_histogram_counting():
    records = [
        ItemRecord(f"r{i}", PIPELINE, 0, {}, decision={"selected": ["C1", "C2"], "fallback_used": False})
        for i in range(3)
    ]
    assert selection_histogram(records) == {"C1": 3, "C2": 3}
    assert selection_histogram([]) == {}


def test_histogram_for_an_80_20_router():
    items, script, expected = [], [], {"A1": 0, "E1": 0}
    for i in range(50):
        question = f"[h{i:02d}] Read the page"
        pair = i % 5 == 0
        items.append(
            BenchmarkItem(f"h{i:02d}", "qa", question, ("a", "b"), 0, (MediaRef.from_bytes(Modality.IMAGE, bytes([i]), "p"),))
        )
        script.append((question, "A1, E1" if pair else "A1"))
        expected["A1"] += 1
        expected["E1"] += pair
    gw = Gateway(
        [scripted_backend(script, id="router"), scripted_backend([("Question:", "A")], id="agg"), *generic_experts()]
    )
    report = evaluate(PipelineConfig(REG, gw, "router", "agg"), items)
    assert report.selection_histogram == expected == {"A1": 50, "E1": 10}


def test_direct_and_pipeline_modes_are_both_recorded():
    data = ten_items()
    pipe = evaluate(config(data), data[0])
    direct = evaluate(config(data, mode=DIRECT), data[0])
    assert pipe.mode == PIPELINE and direct.mode == DIRECT
    assert {r.mode for r in pipe.records} == {PIPELINE}
    assert {r.mode for r in direct.records} == {DIRECT}
    assert pipe.config_fingerprint != direct.config_fingerprint
    assert all(r.decision is None and r.bundle == [] for r in direct.records)
    assert all(r.decision is not None for r in pipe.records)
    diff = [a.item_id for a, b in zip(pipe.records, direct.records) if a.correct != b.correct]
    assert diff, "the two modes should disagree somewhere on this suite"


def test_format_percent_rounds_half_up():
    assert format_percent(Fraction(1, 3)) == "33.3"
    assert format_percent(Fraction(2, 3)) == "66.7"
    assert format_percent(Fraction(1, 8)) == "12.5"
    assert format_percent(Fraction(1, 16)) == "6.3"
    assert format_percent(Fraction(0)) == "0.0"


# --- ablation ------------------------------------------------------------------


def ablation_config():
    items, _ = ten_items()
    weak, strong = [], []
    for i, item in enumerate(items):
        wrong = option_letter((item.gold_index + 1) % 4)
        right = option_letter(item.gold_index)
        weak.append((item.question, f"Answer: {right if i < 5 else wrong}"))
        strong.append((item.question, f"Answer: {right if i < 7 else wrong}"))
    gw = Gateway(
        [
            scripted_backend([("Selected IDs:", "A1")], id="router-a"),
            scripted_backend([("Selected IDs:", "A1")], id="router-b"),
            scripted_backend(weak, id="agg-weak"),
            scripted_backend(strong, id="agg-strong"),
            *generic_experts(),
        ]
    )
    return items, PipelineConfig(REG, gw, "router-a", "agg-weak")


def test_two_by_two_grid():
    items, cfg = ablation_config()
    grid = run_ablation(cfg, ["router-a", "router-b"], ["agg-weak", "agg-strong"], items)
    assert len(grid) == 4
    for router in ("router-a", "router-b"):
        assert grid[(router, "agg-strong")].accuracy - grid[(router, "agg-weak")].accuracy == Fraction(1, 5)
    for agg in ("agg-weak", "agg-strong"):
        a, b = grid[("router-a", agg)], grid[("router-b", agg)]
        assert a.accuracy == b.accuracy
        assert [r.answer for r in a.records] == [r.answer for r in b.records]
        assert a.selection_histogram == b.selection_histogram
    assert len(cfg.gateway.calls_to("omnicaptioner")) == len(items)


def test_ablation_table_layout():
    items, cfg = ablation_config()
    grid = run_ablation(cfg, ["router-a", "router-b"], ["agg-weak", "agg-strong"], items)
    lines = format_ablation_table({"suite": grid}).splitlines()
    assert lines[0].split() == ["Router", "Aggregator", "suite"]
    assert [line.split() for line in lines[2:]] == [
        ["router-a", "agg-weak", "50.0"],
        ["router-a", "agg-strong", "70.0"],
        ["router-b", "agg-weak", "50.0"],
        ["router-b", "agg-strong", "70.0"],
    ]


def test_empty_ablation_lists():
    items, cfg = ablation_config()
    with pytest.raises(ValueError):
        run_ablation(cfg, [], ["agg-weak"], items)
