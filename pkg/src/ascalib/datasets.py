"""Bundled synthetic study generator used for smoke tests and demos.

Mimics a repeated-measures metabolomics layout: two response groups, three
sampling times per subject, subjects nested in group, about a hundred
response variables.  Values are reproducible from the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import MISSING_TOKEN, write_csv
from .prep import RawResponseMatrix


def synthetic_study(
    *,
    n_group_a: int = 13,
    n_group_b: int = 8,
    n_times: int = 3,
    n_vars: int = 112,
    group_effect: float = 0.6,
    subject_sd: float = 1.0,
    missing_rate: float = 0.0,
    seed: int = 7,
) -> tuple[RawResponseMatrix, dict[str, list[str]], tuple[str, ...]]:
    """Returns (raw response, design columns, sample ids).

    Design columns: Responder (R/NR), Time (t1..), Patient (subject ids nested
    in Responder).  A ``group_effect`` of zero produces pure noise plus
    subject offsets.
    """
    rng = np.random.default_rng(seed)
    subjects = [f"RS{i + 1:02d}" for i in range(n_group_a)] + [
        f"NS{i + 1:02d}" for i in range(n_group_b)
    ]
    groups = ["R"] * n_group_a + ["NR"] * n_group_b
    times = [f"t{k + 1}" for k in range(n_times)]

    responder_col: list[str] = []
    time_col: list[str] = []
    patient_col: list[str] = []
    ids: list[str] = []
    for subj, grp in zip(subjects, groups):
        for t in times:
            ids.append(f"{subj}_{t}")
            responder_col.append(grp)
            time_col.append(t)
            patient_col.append(subj)

    n = len(ids)
    group_pattern = rng.standard_normal(n_vars)
    group_pattern /= np.linalg.norm(group_pattern)
    time_patterns = rng.standard_normal((n_times, n_vars)) * 0.3
    subject_offsets = {s: rng.standard_normal(n_vars) * subject_sd for s in subjects}

    values = rng.standard_normal((n, n_vars))
    for i in range(n):
        sign = 1.0 if responder_col[i] == "R" else -1.0
        values[i] += sign * group_effect * group_pattern
        values[i] += time_patterns[times.index(time_col[i])]
        values[i] += subject_offsets[patient_col[i]]
    if missing_rate > 0.0:
        holes = rng.random((n, n_vars)) < missing_rate
        values[holes] = np.nan

    variables = tuple(f"m{j + 1:03d}" for j in range(n_vars))
    raw = RawResponseMatrix(values, variables, tuple(ids))
    design = {"Responder": responder_col, "Time": time_col, "Patient": patient_col}
    return raw, design, tuple(ids)


def write_study_csvs(directory: str | Path, **kwargs) -> tuple[Path, Path]:
    """Write the synthetic study as data.csv + design.csv under a directory."""
    directory = Path(directory)
    raw, design, ids = synthetic_study(**kwargs)
    data_rows = []
    for i, sid in enumerate(ids):
        row: list = [sid]
        for v in raw.values[i]:
            row.append(MISSING_TOKEN if np.isnan(v) else float(v))
        data_rows.append(row)
    data_path = write_csv(directory / "data.csv", ("sample",) + raw.variables, data_rows)
    design_rows = [
        [sid] + [design[name][i] for name in design] for i, sid in enumerate(ids)
    ]
    design_path = write_csv(
        directory / "design.csv", ["sample", *design.keys()], design_rows
    )
    return data_path, design_path
