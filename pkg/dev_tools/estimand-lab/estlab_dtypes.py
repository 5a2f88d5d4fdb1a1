"""
helper module for the column layout and data types of every table the tool writes
"""
# Copyright 2021, Blast Analytics & Marketing
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
import inspect

import pandas as pd

from estlab_defaults import FAILURE
from estlab_logging import log_info


# column order of each table is the order of its dict
TABLE_MAP = {
    "patient_visits": {
        "replicate": "int64",
        "patient": "int64",
        "arm": "int64",
        "visit": "int64",
        "observed_value": "float64",
        "missing_reason": "object",
        "ice_cause": "object",
        "ice_kind": "object",
    },
    "imputed": {
        "replicate": "int64",
        "copy": "int64",
        "patient": "int64",
        "visit": "int64",
        "value": "float64",
        "provenance": "object",
        "method": "object",
    },
    "replicates": {
        "replicate": "int64",
        "estimand": "object",
        "point": "float64",
        "within_var": "float64",
        "between_var": "float64",
        "total_var": "float64",
        "df": "float64",
        "ci_lower": "float64",
        "ci_upper": "float64",
        "truth": "float64",
        "ci_covers": "bool",
        "rejected": "bool",
    },
    "failures": {
        "replicate": "int64",
        "error": "object",
    },
    "summary": {
        "scenario": "object",
        "label": "object",
        "truth": "float64",
        "n_replicates": "int64",
        "bias": "float64",
        "empirical_se": "float64",
        "mean_model_se": "float64",
        "coverage": "float64",
        "rejection_rate": "float64",
        "bias_mc_se": "float64",
        "coverage_mc_se": "float64",
    },
}


def table_columns(table_name: str) -> list:
    return list(TABLE_MAP[table_name])


def std_dtypes(table_name: str, df: pd.DataFrame, logger=None) -> pd.DataFrame:
    """
    returns a copy of df with the table's column order and types:
    nullable Int64 integers, float64 numbers, 'true'/'false' booleans, str text
    """
    method = f"{inspect.currentframe().f_code.co_name}()"
    if table_name not in TABLE_MAP:
        raise KeyError(f"unknown table '{table_name}'")
    columns = table_columns(table_name)
    missing = [col_name for col_name in columns if col_name not in df.columns]
    if missing:
        log_info(logger=logger, msg=f"{method} {FAILURE} '{table_name}' missing column(s) {missing}")
        raise ValueError(f"table '{table_name}' is missing column(s) {missing}")
    df = df.loc[:, columns].copy()
    for col_name, pd_type in TABLE_MAP[table_name].items():
        if pd_type == "object":
            df[col_name] = df[col_name].fillna("").astype(str)
        elif pd_type == "float64":
            df[col_name] = pd.to_numeric(df[col_name], errors="coerce").astype("float64")
        elif pd_type == "int64":
            df[col_name] = pd.to_numeric(df[col_name], errors="coerce").astype(pd.Int64Dtype())
        elif pd_type == "bool":
            df[col_name] = df[col_name].map({True: "true", False: "false"})
    return df

