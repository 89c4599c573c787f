"""
Result files: JSON records, CSV tables, histogram bin tables and SVG
error-bar charts of estimates with their 95% intervals.
"""

import glob
import json
import logging
import os
import xml.etree.ElementTree as ET
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from diddml.estimator import SupportReport

logger = logging.getLogger(__name__)

SVG_NS = "http://www.w3.org/2000/svg"


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_json(record: dict, path: str) -> None:
    """Sorted keys and a fixed layout, so equal records give byte-identical files."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(record, indent=2, sort_keys=True, default=_json_default, allow_nan=True))
        f.write("\n")


def read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_table(frame: pd.DataFrame, path: str, index: bool = False) -> None:
    frame.to_csv(path, index=index, float_format="%.10g")


def histogram_bins(values: Sequence[float], bins: int = 20, value_range: Optional[tuple[float, float]] = None
                   ) -> pd.DataFrame:
    values = np.asarray(values, dtype=float)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts})


def propensity_bins(report: SupportReport) -> pd.DataFrame:
    """Treated post-period propensity histogram for each (d, t) cell, long format."""
    rows = []
    edges = report.edges
    for (d, t), group in report.groups.items():
        for i, count in enumerate(group.histogram):
            rows.append({"d": d, "t": t, "bin_lo": edges[i], "bin_hi": edges[i + 1], "count": count})
    return pd.DataFrame(rows)


# ----------------------------
#  Error-bar charts
# ----------------------------
def collect_estimates(results_dir: str) -> list[dict]:
    """
    Every estimate found in the JSON files of a results directory, ordered by
    file name: files holding one record (``atet`` + ``ci95``) give one entry,
    files holding a ``columns`` mapping of records give one entry per column.
    """
    found = []
    for path in sorted(glob.glob(os.path.join(results_dir, "*.json"))):
        try:
            record = read_json(path)
        except (OSError, ValueError) as e:
            logger.warning("skipping unreadable %s: %s", path, e)
            continue
        stem = os.path.splitext(os.path.basename(path))[0]
        if isinstance(record, dict) and "atet" in record and "ci95" in record:
            found.append({"label": stem, "atet": record["atet"], "ci95": record["ci95"]})
        elif isinstance(record, dict) and isinstance(record.get("columns"), dict):
            for name, rec in record["columns"].items():
                if isinstance(rec, dict) and "atet" in rec and "ci95" in rec:
                    found.append({"label": name, "atet": rec["atet"], "ci95": rec["ci95"]})
    return found


def error_bar_svg(estimates: Iterable[dict], title: str = "Estimated effects with 95% confidence intervals",
                  width: int = 640, row_height: int = 36) -> str:
    estimates = list(estimates)
    if not estimates:
        raise ValueError("no estimates to plot")
    left, right, top = 220, 30, 50
    height = top + row_height * len(estimates) + 40
    lows = [float(e["ci95"][0]) for e in estimates]
    highs = [float(e["ci95"][1]) for e in estimates]
    x_min, x_max = min(lows + [0.0]), max(highs + [0.0])
    if x_max == x_min:
        x_min, x_max = x_min - 1.0, x_max + 1.0
    pad = 0.05 * (x_max - x_min)
    x_min, x_max = x_min - pad, x_max + pad

    def sx(value: float) -> str:
        return f"{left + (value - x_min) / (x_max - x_min) * (width - left - right):.2f}"

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(f"{{{SVG_NS}}}svg", {"width": str(width), "height": str(height),
                                         "viewBox": f"0 0 {width} {height}"})
    ET.SubElement(svg, f"{{{SVG_NS}}}title").text = title
    heading = ET.SubElement(svg, f"{{{SVG_NS}}}text", {"x": str(left), "y": "24", "font-size": "14"})
    heading.text = title
    bottom = top + row_height * len(estimates)
    ET.SubElement(svg, f"{{{SVG_NS}}}line", {"class": "zero", "x1": sx(0.0), "x2": sx(0.0), "y1": str(top - 10),
                                              "y2": str(bottom), "stroke": "#999", "stroke-dasharray": "4 3"})
    for i, est in enumerate(estimates):
        y = str(top + row_height * i + row_height // 2)
        lo, hi = (float(v) for v in est["ci95"])
        group = ET.SubElement(svg, f"{{{SVG_NS}}}g", {"class": "estimate", "data-label": str(est["label"])})
        label = ET.SubElement(group, f"{{{SVG_NS}}}text", {"x": "8", "y": y, "font-size": "12",
                                                            "dominant-baseline": "middle"})
        label.text = str(est["label"])
        ET.SubElement(group, f"{{{SVG_NS}}}line", {"class": "ci", "x1": sx(lo), "x2": sx(hi), "y1": y, "y2": y,
                                                    "stroke": "#333", "stroke-width": "2",
                                                    "data-lo": repr(lo), "data-hi": repr(hi)})
        ET.SubElement(group, f"{{{SVG_NS}}}circle", {"class": "atet", "cx": sx(float(est["atet"])), "cy": y,
                                                      "r": "4", "fill": "#c0392b",
                                                      "data-atet": repr(float(est["atet"]))})
    axis = ET.SubElement(svg, f"{{{SVG_NS}}}text", {"x": sx(0.0), "y": str(bottom + 20), "font-size": "11",
                                                     "text-anchor": "middle"})
    axis.text = "0"
    return ET.tostring(svg, encoding="unicode")


def write_svg(content: str, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(content)
        f.write("\n")
