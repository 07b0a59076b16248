import json

import pytest

from report_viz import (
    FrameError,
    MetricsFrame,
    RoutingFrame,
    plot_loss,
    plot_routing_heatmap,
    render_report,
)
from report_viz.cli import main

METRICS = """step,split,pl,loss,lr
0,dev,go,4.5,0.0
0,dev,ruby,4.8,0.0
1,train,,4.2,0.0001
2,train,,4.0,0.0002
10,dev,go,3.5,0.001
10,dev,ruby,3.9,0.001
"""

ROUTING = """layer,pl,expert,count,row_fraction
1,go,0,30,0.75
1,go,7,10,0.25
1,ruby,2,20,0.5
1,ruby,7,20,0.5
"""

ALLOCATION = {"total_experts": 8, "shared": [7], "per_pl": {"go": [0, 1], "ruby": [2, 3]}}

RESULTS = [
    {"variant": "pl_moe", "pl": "go", "accuracy": 61.25, "edit_similarity": 70.5, "n_positions": 400},
    {"variant": "pl_moe", "pl": "Overall", "accuracy": 60.0, "edit_similarity": 69.0, "n_positions": 800},
    {"variant": "dense", "pl": "go", "accuracy": 58.125, "edit_similarity": 66.25, "n_positions": 400},
    {"variant": "dense", "pl": "Overall", "accuracy": 57.5, "edit_similarity": 65.0, "n_positions": 800},
]


@pytest.fixture
def metrics_csv(tmp_path):
    p = tmp_path / "metrics.csv"
    p.write_text(METRICS)
    return p


@pytest.fixture
def routing_csv(tmp_path):
    p = tmp_path / "routing.csv"
    p.write_text(ROUTING)
    return p


class TestMetricsFrame:
    def test_load_and_series(self, metrics_csv):
        frame = MetricsFrame.load(metrics_csv)
        steps, losses = frame.series("dev", "go")
        assert steps == [0, 10]
        assert losses == [4.5, 3.5]
        assert frame.pls("dev") == ["go", "ruby"]

    def test_nonmonotonic_steps_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("step,split,pl,loss,lr\n5,train,,4.0,0.1\n3,train,,3.9,0.1\n")
        with pytest.raises(FrameError, match="nondecreasing"):
            MetricsFrame.load(p)

    def test_parse_error_names_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("step,split,pl,loss,lr\n1,train,,4.0,0.1\nx,train,,oops,0.1\n")
        with pytest.raises(FrameError, match="line 3"):
            MetricsFrame.load(p)

    def test_wrong_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(FrameError, match="line 1"):
            MetricsFrame.load(p)


class TestRoutingFrame:
    def test_valid(self, routing_csv):
        frame = RoutingFrame.load(routing_csv)
        assert frame.layers() == [1]
        pls, m = frame.matrix(1, 8)
        assert pls == ["go", "ruby"]
        assert m[0, 0] == 0.75 and m[1, 7] == 0.5

    def test_corrupted_row_sum_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("layer,pl,expert,count,row_fraction\n1,go,0,30,0.75\n1,go,7,10,0.30\n")
        with pytest.raises(FrameError, match="sum"):
            RoutingFrame.load(p)


class TestPlotLoss:
    def test_single_run(self, metrics_csv, tmp_path):
        out = plot_loss(metrics_csv, tmp_path / "loss.png")
        assert out.exists() and out.stat().st_size > 0

    def test_multi_variant(self, metrics_csv, tmp_path):
        out = plot_loss({"dense": metrics_csv, "pl_moe": metrics_csv}, tmp_path / "loss.png")
        assert out.exists()

    def test_empty_file_no_image(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("")
        out = tmp_path / "loss.png"
        with pytest.raises(FrameError, match="empty"):
            plot_loss(p, out)
        assert not out.exists()

    def test_single_point_rejected(self, tmp_path):
        p = tmp_path / "one.csv"
        p.write_text("step,split,pl,loss,lr\n1,train,,4.0,0.1\n")
        with pytest.raises(FrameError, match="2 training points"):
            plot_loss(p, tmp_path / "loss.png")

    def test_deterministic(self, metrics_csv, tmp_path):
        a = plot_loss(metrics_csv, tmp_path / "a.png")
        b = plot_loss(metrics_csv, tmp_path / "b.png")
        assert a.read_bytes() == b.read_bytes()


class TestPlotRoutingHeatmap:
    def test_plain(self, routing_csv, tmp_path):
        out = plot_routing_heatmap(routing_csv, tmp_path / "heat.png")
        assert out.exists() and out.stat().st_size > 0

    def test_with_allocation_overlay(self, routing_csv, tmp_path):
        alloc = tmp_path / "alloc.json"
        alloc.write_text(json.dumps(ALLOCATION))
        out = plot_routing_heatmap(routing_csv, tmp_path / "heat.png", allocation=alloc)
        assert out.exists()

    def test_corrupted_input_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("layer,pl,expert,count,row_fraction\n1,go,0,30,0.9\n1,go,7,10,0.3\n")
        with pytest.raises(FrameError):
            plot_routing_heatmap(p, tmp_path / "heat.png")


class TestRenderReport:
    def write_results(self, tmp_path, rows, name="results.json"):
        p = tmp_path / name
        p.write_text(json.dumps(rows))
        return p

    def test_numbers_verbatim(self, tmp_path):
        p = self.write_results(tmp_path, RESULTS)
        out = render_report([p], tmp_path / "report.html")
        text = out.read_text()
        for row in RESULTS:
            assert repr(row["accuracy"]) in text
            assert repr(row["edit_similarity"]) in text

    def test_delta_rows_vs_baseline(self, tmp_path):
        p = self.write_results(tmp_path, RESULTS)
        text = render_report([p], tmp_path / "r.html").read_text()
        assert "deltas vs pl_moe" in text
        assert "-3.1250" in text  # dense go accuracy minus pl_moe go accuracy

    def test_missing_pl_gap_marker_not_zero(self, tmp_path):
        rows = RESULTS + [
            {"variant": "switch_moe", "pl": "Overall", "accuracy": 59.0,
             "edit_similarity": 67.0, "n_positions": 800},
        ]
        p = self.write_results(tmp_path, rows)
        text = render_report([p], tmp_path / "r.html").read_text()
        assert "&mdash;" in text

    def test_degenerate_ttest_flagged(self, tmp_path):
        p = self.write_results(tmp_path, RESULTS)
        tt = tmp_path / "ttests.json"
        tt.write_text(json.dumps([
            {"variant_a": "pl_moe", "variant_b": "dense", "pl": "go",
             "t": 2.5, "p": 0.04, "degenerate": False},
            {"variant_a": "pl_moe", "variant_b": "dense", "pl": "Overall",
             "t": None, "p": None, "degenerate": True},
        ]))
        text = render_report([p], tmp_path / "r.html", ttests_path=tt).read_text()
        assert "degenerate" in text
        assert repr(2.5) in text

    def test_schema_mismatch_rejected(self, tmp_path):
        p = self.write_results(tmp_path, [{"variant": "dense", "pl": "go"}])
        with pytest.raises(FrameError, match="missing keys"):
            render_report([p], tmp_path / "r.html")

    def test_no_inputs_rejected(self, tmp_path):
        with pytest.raises(FrameError, match="at least one"):
            render_report([], tmp_path / "r.html")


class TestCli:
    def test_loss_and_report(self, metrics_csv, tmp_path):
        assert main(["loss", "--metrics", f"dense={metrics_csv}",
                     "--out", str(tmp_path / "loss.png")]) == 0
        res = tmp_path / "results.json"
        res.write_text(json.dumps(RESULTS))
        assert main(["report", "--results", str(res), "--out", str(tmp_path / "r.html")]) == 0
        assert (tmp_path / "r.html").exists()

    def test_bad_input_exit_code(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("layer,pl,expert,count,row_fraction\n1,go,0,30,0.5\n")
        assert main(["heatmap", "--routing", str(p), "--out", str(tmp_path / "h.png")]) == 1
