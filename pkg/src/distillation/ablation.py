"""Predefined ablation matrices and their comparison tables.

A row is a set of dotted config overrides, so every cell is an ordinary
distill run whose effective config shows exactly what was switched off.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

from src.utils.errors import ConfigurationError

_NO_EXTRAS = {"hyperparams.gamma": 0.0, "hyperparams.eta": 0.0}


@dataclass(frozen=True)
class AblationRow:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    description: str = ""


# IKD off means alpha = 0 (KL alone); BNS and KL stay on in every row.
LOSS_COMPONENTS: Tuple[AblationRow, ...] = (
    AblationRow("kl-only", {"hyperparams.alpha": 0.0, **_NO_EXTRAS}, "BNS - KL baseline"),
    AblationRow("ikd", dict(_NO_EXTRAS), "baseline + IKD"),
    AblationRow("scl", {"hyperparams.alpha": 0.0, "hyperparams.eta": 0.0}, "baseline + SCL"),
    AblationRow("ce", {"hyperparams.alpha": 0.0, "hyperparams.gamma": 0.0}, "baseline + CE"),
    AblationRow("ikd+scl", {"hyperparams.eta": 0.0}, "IKD + SCL"),
    AblationRow("ikd+ce", {"hyperparams.gamma": 0.0}, "IKD + CE"),
    AblationRow("full", {}, "IKD + SCL + CE"),
)

CFE_LAYERS: Tuple[AblationRow, ...] = (
    AblationRow("plain_bn", {"generator.cfe_mode": "plain_bn"}, "no CFE"),
    AblationRow("three_layer", {"generator.cfe_mode": "three_layer"}, "CFE in three inner layers"),
    AblationRow("full_layer", {"generator.cfe_mode": "full_layer"}, "CFE in every layer"),
)

# gamma = eta = 0 isolates the distillation term
IKD_COMPONENTS: Tuple[AblationRow, ...] = (
    AblationRow("kl", {"hyperparams.alpha": 0.0, **_NO_EXTRAS}, "KL only"),
    AblationRow("r_l2", {"hyperparams.kl_weight": 0.0, **_NO_EXTRAS}, "log-L2 only"),
    AblationRow("kl+r_l2", dict(_NO_EXTRAS), "KL + alpha * log-L2"),
)

# one weight swept at a time, the other three held at 1
ALPHA_SWEEP = (0.0, 0.1, 0.5, 1.0, 3.0, 5.0, 7.0, 10.0, 15.0)
WEIGHT_SWEEP = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0, 1.5, 2.0, 5.0)
_SWEPT = ("alpha", "beta", "gamma", "eta")


def sensitivity_rows(weight: str, values) -> Tuple[AblationRow, ...]:
    base = {f"hyperparams.{name}": 1.0 for name in _SWEPT}
    return tuple(
        AblationRow(f"{weight}-{value:g}", {**base, f"hyperparams.{weight}": value},
                    f"{weight} = {value:g}, other weights 1")
        for value in values
    )


HYPERPARAMS: Tuple[AblationRow, ...] = (
    sensitivity_rows("alpha", ALPHA_SWEEP)
    + sensitivity_rows("beta", WEIGHT_SWEEP)
    + sensitivity_rows("gamma", WEIGHT_SWEEP)
    + sensitivity_rows("eta", WEIGHT_SWEEP)
)

MATRICES: Dict[str, Tuple[AblationRow, ...]] = {
    "loss-components": LOSS_COMPONENTS,
    "cfe-layers": CFE_LAYERS,
    "ikd-components": IKD_COMPONENTS,
    "hyperparams": HYPERPARAMS,
}

TABLE_COLUMNS = ["matrix", "row", "status", "accuracy", "teacher_accuracy",
                 "conditional_fidelity", "fid", "run_dir"]


def get_matrix(name: str) -> Tuple[AblationRow, ...]:
    try:
        return MATRICES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown ablation matrix '{name}', expected one of {sorted(MATRICES)}"
        ) from None


def find_row(name: str) -> AblationRow:
    """Look a row up by ``row`` or ``matrix/row``."""
    matrix_name, _, row_name = name.rpartition("/")
    candidates = get_matrix(matrix_name) if matrix_name else [
        row for rows in MATRICES.values() for row in rows
    ]
    for row in candidates:
        if row.name == row_name:
            return row
    known = sorted(row.name for row in candidates)
    raise ConfigurationError(f"unknown ablation row '{name}', expected one of {known}")


def row_overrides(row: AblationRow) -> List[str]:
    """The row as ``--set`` style strings."""
    return [f"{key}={json.dumps(value)}" for key, value in row.overrides.items()]


def write_comparison(results: List[Dict[str, Any]], out_dir: Path,
                     stem: str = "comparison") -> Tuple[Path, Path]:
    """Write the per-cell results as CSV and JSON; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for result in results:
            writer.writerow({key: result.get(key, "") for key in TABLE_COLUMNS})
    json_path.write_text(json.dumps(results, indent=2))
    return csv_path, json_path
