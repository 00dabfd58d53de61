"""Figure + CSV rendering helpers produce real files with stable schemas."""

import csv

from avflow.report import (
    ABLATION_COLUMNS,
    plot_ablation,
    plot_loss_curve,
    plot_sweep,
    write_ablation_csv,
)


def _is_png(path):
    return path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_loss_curve_png(tmp_path):
    rows = [[i, 2.0 / (i + 1), 1e-4, 0] for i in range(20)]
    p = tmp_path / "loss.png"
    plot_loss_curve(rows, p)
    assert _is_png(p) and p.stat().st_size > 1000


def test_sweep_png(tmp_path):
    p = tmp_path / "sweep.png"
    plot_sweep([(0.5, 0.2), (0.9, 0.8), (1.0, 0.6)], p)
    assert _is_png(p)


def test_ablation_csv_schema(tmp_path):
    rows = [
        {"variant": "fusion_block", "direction": "v2a", "metric": "onset_acc",
         "score": 0.9, "baseline_score": 0.1, "seed": 0},
        {"variant": "no_reinjection", "direction": "v2a", "metric": "onset_acc",
         "score": 0.6, "baseline_score": 0.1, "seed": 0},
    ]
    p = tmp_path / "ablation.csv"
    write_ablation_csv(p, rows)
    with open(p) as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0].keys()) == ABLATION_COLUMNS
    assert got[1]["variant"] == "no_reinjection"
    png = tmp_path / "ablation.png"
    plot_ablation(rows, png)
    assert _is_png(png)
