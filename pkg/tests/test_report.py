import re
import xml.etree.ElementTree as ET

import numpy as np

from strokeseg.metrics import Scores
from strokeseg.report import boxplot_svg, metrics_rows_csv, metrics_table, overlay_svg, read_metrics_rows_csv, scatter_svg
from strokeseg.stats import PairedVolumes, volume_report

SVG = "{http://www.w3.org/2000/svg}"


def reports():
    pv = PairedVolumes(["a", "b", "c", "d"], [100.0, 250.0, 40.0, 800.0], [120.0, 200.0, 0.0, 760.0])
    return [volume_report("unet3d", pv), volume_report("resunet3d", pv)]


def test_metrics_table_layout():
    rows = [("unet2d", Scores(0.5, 1 / 3, 0.25, 0.75)), ("resunet2d", None)]
    lines = metrics_table(rows, "2-D").splitlines()
    assert lines[0] == "2-D"
    assert lines[1].split() == ["Model", "Dice", "Score", "IoU", "Score", "Precision", "Recall"]
    assert lines[2].split() == ["unet2d", "0.5000", "0.3333", "0.2500", "0.7500"]
    assert lines[3].split() == ["resunet2d", "failed"]


def test_metrics_csv_round_trip():
    rows = [("unet2d", Scores(0.5, 1 / 3, 0.25, 0.75)), ("resunet2d", None)]
    assert read_metrics_rows_csv(metrics_rows_csv(rows)) == rows


def test_scatter_has_points_and_identity_line():
    svg = scatter_svg(reports())
    root = ET.fromstring(svg)
    circles = root.findall(f"{SVG}circle")
    assert len(circles) == 8
    assert all(c.get("fill") == "gray" for c in circles)
    lines = [e for e in root.findall(f"{SVG}line") if e.get("stroke") == "red"]
    assert len(lines) == 2
    assert svg == scatter_svg(reports())


def test_point_positions():
    # the largest value sits at 1/1.05 of the panel; a zero prediction on the bottom edge
    svg = scatter_svg(reports()[:1], panel=210)
    cys = [float(v) for v in re.findall(r'<circle cx="[\d.]+" cy="([\d.]+)"', svg)]
    assert max(cys) == 70 + 210


def test_boxplot_two_boxes_per_model():
    root = ET.fromstring(boxplot_svg(reports()))
    boxes = [r for r in root.findall(f"{SVG}rect") if r.get("fill") in ("#9ecae1", "#fdae6b")]
    assert len(boxes) == 4


def test_overlay_colours():
    img = np.arange(4.0).reshape(2, 2)
    truth = np.array([[1, 1], [0, 0]])
    pred = np.array([[1, 0], [1, 0]])
    root = ET.fromstring(overlay_svg(img, truth, pred))
    fills = [r.get("fill") for r in root.findall(f"{SVG}rect")][1:]
    assert fills == ["rgb(255,215,0)", "rgb(0,200,0)", "rgb(220,0,0)", "rgb(255,255,255)"]
