"""Monte Carlo replications of the estimators on synthetic samples."""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from diddml.config import DidDmlConfig, SimulationConfig, TwfeSpec
from diddml.errors import DidDmlError
from diddml.estimator import estimate_atet
from diddml.parallel import derive_seed, parallel_map
from diddml.parametric_did import fit_twfe
from diddml.synthetic_dgp import generate, oracle_atet

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ["rep", "estimator", "estimate", "se", "ci_lo", "ci_hi", "truth", "covered", "error"]


@dataclass(frozen=True)
class SimulationResult:
    records: pd.DataFrame
    summary: pd.DataFrame

    def to_record(self) -> dict:
        return {name: {k: (None if pd.isna(v) else v) for k, v in row.items()}
                for name, row in self.summary.to_dict(orient="index").items()}


def _replicate(task) -> list[dict]:
    rep, sim, config, twfe, seed = task
    spec = sim.dgp.model_copy(update={"seed": derive_seed(seed, rep)})
    rows = []
    try:
        sample = generate(spec)
    except DidDmlError as e:
        return [{"rep": rep, "estimator": name, "error": str(e)} for name in sim.estimators]
    truth = spec.tau if spec.tau_heterogeneity == 0 else oracle_atet(sample)
    for name in sim.estimators:
        try:
            if name == "diddml":
                cfg = config.model_copy(update={"seed": derive_seed(seed, rep, 1), "threads": 1})
                est = estimate_atet(sample.data, cfg)
                value, se, ci = est.atet, est.se, est.ci95
            else:
                result = fit_twfe(sample.data, twfe.model_copy(update={"treatment": "binary"}))
                value, se, ci = result.theta, result.se, result.ci95
        except DidDmlError as e:
            rows.append({"rep": rep, "estimator": name, "error": str(e)})
            continue
        rows.append({
            "rep": rep, "estimator": name, "estimate": value, "se": se,
            "ci_lo": ci[0], "ci_hi": ci[1], "truth": truth,
            "covered": bool(ci[0] <= truth <= ci[1]), "error": None,
        })
    return rows


def summarize(records: pd.DataFrame) -> pd.DataFrame:
    """Bias, sd, rmse and CI coverage per estimator over the successful replications."""
    out = {}
    for name, group in records.groupby("estimator", sort=False):
        ok = group[group["error"].isna()]
        errors = ok["estimate"] - ok["truth"]
        out[name] = {
            "replications": int(len(group)),
            "failed": int(len(group) - len(ok)),
            "mean": float(ok["estimate"].mean()) if len(ok) else np.nan,
            "bias": float(errors.mean()) if len(ok) else np.nan,
            "sd": float(ok["estimate"].std(ddof=1)) if len(ok) > 1 else np.nan,
            "rmse": float(np.sqrt(np.mean(errors**2))) if len(ok) else np.nan,
            "mean_se": float(ok["se"].mean()) if len(ok) else np.nan,
            "coverage": float(ok["covered"].astype(float).mean()) if len(ok) else np.nan,
        }
    return pd.DataFrame.from_dict(out, orient="index")


def run_replications(sim: SimulationConfig, config: DidDmlConfig, twfe: Optional[TwfeSpec] = None,
                     seed: int = 0, threads: int = 1, progress: bool = True) -> SimulationResult:
    twfe = twfe or TwfeSpec()
    tasks = [(rep, sim, config, twfe, seed) for rep in range(sim.replications)]
    chunk = max(1, threads)
    rows = []
    with tqdm(total=len(tasks), desc="replications", disable=not progress) as bar:
        for start in range(0, len(tasks), chunk):
            batch = tasks[start:start + chunk]
            for result in parallel_map(_replicate, batch, threads):
                rows.extend(result)
            bar.update(len(batch))

    records = pd.DataFrame(rows, columns=RECORD_COLUMNS)
    failed = int(records["error"].notna().sum())
    if failed:
        logger.warning("%d estimator run(s) failed across %d replications", failed, sim.replications)
    summary = summarize(records)
    for name, row in summary.iterrows():
        logger.info("%s: bias %.5f, sd %.5f, coverage %.3f", name, row["bias"], row["sd"], row["coverage"])
    return SimulationResult(records, summary)
