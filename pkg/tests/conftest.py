import numpy as np
import pandas as pd
import pytest

from diddml.config import DidDmlConfig, ForestConfig
from diddml.data_model import EncodingSchema, RepeatedCrossSection

# country: (2012, 2014, change, D) then (2018, 2020, change, D); D None = excluded
PRICE_TABLE = {
    "Austria": (6.15, 6.65, 8.10, None, 7.40, 7.42, 0.22, 0),
    "Belgium": (7.12, 7.86, 10.32, None, 8.88, 8.89, 0.15, 0),
    "Bulgaria": (7.39, 7.23, -2.19, 0, 7.22, 7.06, -2.20, 0),
    "Cyprus": (5.90, 6.38, 8.19, None, 7.61, 7.67, 0.79, 0),
    "Czech Republic": (5.69, 6.15, 8.21, None, 7.81, 8.35, 6.97, None),
    "Denmark": (5.89, 6.51, 10.61, None, 6.79, 9.20, 35.57, 1),
    "Estonia": (6.62, 7.21, 8.83, None, 6.64, 7.37, 10.96, None),
    "Finland": (6.00, 6.54, 9.10, None, 8.66, 10.07, 16.28, 1),
    "France": (8.18, 9.40, 14.90, None, 10.89, 13.23, 21.43, 1),
    "Germany": (7.45, 7.73, 3.79, 0, 8.97, 9.43, 5.14, None),
    "Greece": (6.01, 7.11, 18.29, 1, 8.37, 8.50, 1.53, 0),
    "Hungary": (6.71, 8.39, 25.01, 1, 9.35, 10.38, 11.01, None),
    "Ireland": (12.31, 12.72, 3.34, 0, 16.21, 17.31, 6.80, None),
    "Italy": (7.43, 7.34, -1.31, 0, 8.38, 8.82, 5.22, None),
    "Latvia": (3.96, 6.53, 64.91, 1, 7.32, 7.51, 2.57, 0),
    "Lithuania": (5.41, 5.80, 7.15, None, 8.66, 9.20, 6.23, None),
    "Luxembourg": (5.64, 6.14, 8.87, None, 6.46, 6.36, -1.50, 0),
    "Malta": (8.06, 8.89, 10.32, None, 9.83, 9.52, -3.20, 0),
    "Netherlands": (7.68, 8.48, 10.38, None, 9.26, 10.18, 9.96, None),
    "Poland": (7.19, 8.41, 16.99, 1, 9.30, 9.29, -0.09, 0),
    "Portugal": (7.72, 8.43, 9.18, None, 9.03, 7.71, -14.63, None),
    "Romania": (9.60, 9.67, 0.68, 0, 10.82, 11.41, 5.43, None),
    "Slovakia": (6.03, 6.36, 5.44, None, 6.79, 6.90, 1.68, 0),
    "Slovenia": (5.32, 6.34, 19.15, 1, 6.72, 6.68, -0.66, 0),
    "Spain": (7.20, 7.87, 9.28, None, 8.28, 8.13, -1.80, 0),
    "Sweden": (6.81, 7.33, 7.56, None, 7.67, 7.71, 0.50, 0),
    "United Kingdom": (10.46, 11.69, 11.73, None, 14.23, 14.91, 4.77, 0),
}

TAX_TABLE = {
    "Austria": (0.74, 0.74, 0.00, 0, 0.75, 0.75, 0.00, 0),
    "Belgium": (0.76, 0.76, 0.00, 0, 0.77, 0.77, 0.00, 0),
    "Bulgaria": (0.84, 0.86, 2.38, 1, 0.87, 0.85, -2.30, None),
    "Cyprus": (0.76, 0.77, 1.32, None, 0.74, 0.74, 0.00, 0),
    "Czech Republic": (0.78, 0.77, -1.28, None, 0.75, 0.77, 2.67, 1),
    "Denmark": (0.79, 0.75, -5.06, None, 0.74, 0.78, 5.41, 1),
    "Estonia": (0.77, 0.77, 0.00, 0, 0.86, 0.88, 2.33, 1),
    "Finland": (0.80, 0.82, 2.50, 1, 0.87, 0.88, 1.15, None),
    "France": (0.80, 0.80, 0.00, 0, 0.82, 0.83, 1.22, None),
    "Germany": (0.73, 0.73, 0.00, 0, 0.68, 0.64, -5.88, None),
    "Greece": (0.82, 0.80, -2.44, None, 0.81, 0.81, 0.00, 0),
    "Hungary": (0.84, 0.77, -8.33, None, 0.72, 0.73, 1.39, None),
    "Ireland": (0.79, 0.78, -1.27, None, 0.78, 0.79, 1.28, None),
    "Italy": (0.75, 0.76, 1.33, None, 0.76, 0.77, 1.32, None),
    "Latvia": (0.79, 0.77, -2.53, None, 0.80, 0.80, 0.00, 0),
    "Lithuania": (0.75, 0.76, 1.33, None, 0.74, 0.74, 0.00, 0),
    "Luxembourg": (0.71, 0.70, -1.41, None, 0.68, 0.68, 0.00, 0),
    "Malta": (0.77, 0.75, -2.60, None, 0.78, 0.78, 0.00, 0),
    "Netherlands": (0.72, 0.73, 1.39, None, 0.72, 0.77, 6.94, 1),
    "Poland": (0.80, 0.80, 0.00, 0, 0.77, 0.78, 1.30, None),
    "Portugal": (0.76, 0.75, -1.32, None, 0.72, 0.79, 9.72, 1),
    "Romania": (0.73, 0.75, 2.74, 1, 0.69, 0.70, 1.45, None),
    "Slovakia": (0.82, 0.82, 0.00, 0, 0.77, 0.76, -1.30, None),
    "Slovenia": (0.79, 0.80, 1.27, None, 0.79, 0.79, 0.00, 0),
    "Spain": (0.79, 0.78, -1.27, None, 0.78, 0.78, 0.00, 0),
    "Sweden": (0.74, 0.69, -6.76, None, 0.68, 0.68, 0.00, 0),
    "United Kingdom": (0.80, 0.82, 2.50, 1, 0.79, 0.79, 0.00, 0),
}

PERIODS = ("2012-2014", "2018-2020")


def panel_frame(table: dict, measure: str) -> pd.DataFrame:
    rows = []
    for country, values in table.items():
        for k, period in enumerate(PERIODS):
            pre, post, _, _ = values[4 * k:4 * k + 4]
            rows.append({"country": country, "period": period, "pre_value": pre, "post_value": post,
                         "measure": measure})
    return pd.DataFrame(rows)


def expected_labels(table: dict) -> dict:
    names = {1: "Treated", 0: "Control", None: "Excluded"}
    out = {}
    for country, values in table.items():
        for k, period in enumerate(PERIODS):
            out[(country, period)] = names[values[4 * k + 3]]
    return out


def make_dataset(y, d, t, cluster, covariates=None, categorical=None, row_id=None) -> RepeatedCrossSection:
    n = len(y)
    frame = pd.DataFrame({
        "row_id": np.arange(n, dtype=np.int64) if row_id is None else np.asarray(row_id, dtype=np.int64),
        "y": np.asarray(y, dtype=float),
        "d": np.asarray(d, dtype=np.int64),
        "t": np.asarray(t, dtype=np.int64),
        "cluster": [str(c) for c in cluster],
    })
    continuous = list((covariates or {}).keys())
    for name, values in (covariates or {}).items():
        frame[name] = np.asarray(values, dtype=float)
    cats = list((categorical or {}).keys())
    for name, values in (categorical or {}).items():
        frame[name] = [str(v) for v in values]
    return RepeatedCrossSection(frame, EncodingSchema.from_frame(frame, continuous, cats))


@pytest.fixture
def fast_config():
    """Small forests so estimator tests stay quick."""
    forest = ForestConfig(n_trees=25, min_leaf=5)
    return DidDmlConfig(folds=3, trim=0.01, seed=7, regression=forest,
                        probability=forest.model_copy(update={"min_leaf": 5}))


@pytest.fixture
def balanced_data():
    """400 rows, 100 per cell, 8 clusters, two covariates; no treatment effect."""
    rng = np.random.default_rng(3)
    n = 400
    cells = np.repeat(np.arange(4), 100)
    d, t = cells // 2, cells % 2
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    y = (rng.random(n) < 0.3 + 0.05 * np.tanh(x1)).astype(float)
    cluster = [f"c{i % 8}" for i in range(n)]
    return make_dataset(y, d, t, cluster, covariates={"x1": x1, "x2": x2})
