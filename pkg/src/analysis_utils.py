import numpy as np
import pandas as pd
from scipy.stats import sem

# Published figures, kept as report metadata next to our own numbers.
SHORT_SESSION_REFERENCE = {
    "delicious": {"Recall@5": 0.2163, "Recall@20": 0.3840, "MRR@5": 0.1278, "MRR@20": 0.1443},
    "reddit": {"Recall@5": 0.3879, "Recall@20": 0.5588, "MRR@5": 0.2684, "MRR@20": 0.2858},
}
ABLATION_REFERENCE = {
    "delicious": {
        "c": {"Recall@5": 0.1418, "Recall@20": 0.2716, "MRR@5": 0.0830, "MRR@20": 0.0957},
        "h": {"Recall@5": 0.1833, "Recall@20": 0.3407, "MRR@5": 0.1101, "MRR@20": 0.1254},
        "o": {"Recall@5": 0.1975, "Recall@20": 0.3629, "MRR@5": 0.1160, "MRR@20": 0.1322},
        "a": {"Recall@5": 0.1891, "Recall@20": 0.3508, "MRR@5": 0.1102, "MRR@20": 0.1259},
        "full": {"Recall@5": 0.2163, "Recall@20": 0.3840, "MRR@5": 0.1278, "MRR@20": 0.1443},
    },
}


def _aggregate_and_calculate(data_list):
    """Mean and SEM of a list of scalars; a single run has SEM 0."""
    values = [v for v in data_list if v is not None]
    if not values:
        return {"mean": None, "sem": None}
    if len(values) == 1:
        return {"mean": float(values[0]), "sem": 0.0}
    return {"mean": float(np.mean(values)), "sem": float(sem(values, nan_policy="omit"))}


def aggregate_runs(runs, group_column="variant", order=None):
    """
    Collapses repeated runs (one row per run, one column per metric) into a
    mean table and an SEM table indexed by `group_column`.
    """
    metric_columns = [c for c in runs.columns if c not in (group_column, "seed")]
    groups = order or list(dict.fromkeys(runs[group_column]))
    means, sems = {}, {}
    for group in groups:
        subset = runs[runs[group_column] == group]
        stats = {col: _aggregate_and_calculate(subset[col].tolist()) for col in metric_columns}
        means[group] = {col: s["mean"] for col, s in stats.items()}
        sems[group] = {col: s["sem"] for col, s in stats.items()}
    mean_table = pd.DataFrame.from_dict(means, orient="index", columns=metric_columns)
    sem_table = pd.DataFrame.from_dict(sems, orient="index", columns=metric_columns)
    mean_table.index.name = sem_table.index.name = group_column
    return mean_table, sem_table
