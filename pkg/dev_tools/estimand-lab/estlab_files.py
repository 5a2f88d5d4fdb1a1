"""
helper module for file utility functions: csv / json / text output, checksums
and the run manifest of an output directory
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
import csv
import hashlib
import inspect
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import pandas as pd

from estlab_defaults import (
    DEFAULT_OUTPUT_DIR,
    ENV_OUTPUT_DIR,
    ERROR,
    FAILURE,
    MISSING_TOKEN,
    SUCCESS,
    WARNING,
)
from estlab_dtypes import std_dtypes
from estlab_logging import get_tool_version, log_exception, log_info

MODULE_NAME = Path(__file__).resolve().name
CWD_PATH = Path(__file__).resolve().parent

MANIFEST_NAME = "manifest.json"
PARTIAL_NAME = "PARTIAL"
HASH_FUNCTIONS = {
    "sha256": hashlib.sha256,
    "sha512": hashlib.sha512,
    "sha3_224": hashlib.sha3_224,
    "sha3_256": hashlib.sha3_256,
    "sha3_512": hashlib.sha3_512,
}


def default_output_dir() -> Path:
    """ESTLAB_OUTPUT_DIR wins over ./estlab_output"""
    return Path(os.environ.get(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR)


def get_checksum(file_path: Path, enc_type: str = "sha3_256") -> dict:
    """returns hash of file contents (unknown enc_type falls back to sha3_256)"""
    checksum = {}
    if isinstance(file_path, Path) and file_path.is_file():
        if enc_type not in HASH_FUNCTIONS:
            enc_type = "sha3_256"
        with open(str(file_path), "rb") as file_ptr:
            sha_hash = HASH_FUNCTIONS[enc_type](file_ptr.read())
        checksum[enc_type] = str(sha_hash.hexdigest().upper())
    return checksum


def json_safe(data):
    """NaN becomes null and infinities become strings, so every document is strict json"""
    if isinstance(data, dict):
        return {str(key): json_safe(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [json_safe(value) for value in data]
    if hasattr(data, "item") and not isinstance(data, (str, bytes)):
        # numpy scalars
        data = data.item()
    if isinstance(data, float):
        if math.isnan(data):
            return None
        if math.isinf(data):
            return "Infinity" if data > 0 else "-Infinity"
    return data


def to_json(data) -> str:
    """canonical text: sorted keys, two-space indent, trailing newline"""
    return json.dumps(json_safe(data), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(output_path: Path, data, logger=None) -> None:
    """ exports data to '.json' formatted file, raises on I/O errors """
    method = f"{inspect.currentframe().f_code.co_name}()"
    try:
        if not output_path.parent.exists():
            output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8", newline="\n") as json_file:
            json_file.write(to_json(data))
        log_info(logger=logger, msg=f"{method} {SUCCESS} '{output_path.name}'")
    except (OSError, TypeError, ValueError):
        log_exception(logger=logger, error_msg=f"{method} {FAILURE} '{output_path}'")
        raise


def write_txt(output_path: Path, data: str, logger=None) -> None:
    """ exports string to text file """
    method = f"{inspect.currentframe().f_code.co_name}()"
    if not isinstance(output_path, Path):
        raise TypeError(f"{method} {ERROR} invalid input: {type(output_path)}")
    if not output_path.parent.exists():
        output_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(output_path, "w", encoding="utf-8", newline="\n") as txt_file:
            txt_file.write(str(data))
        log_info(logger=logger, msg=f"{method} {SUCCESS} {output_path.name}")
    except (OSError, ValueError):
        log_exception(logger=logger, error_msg=f"{method} {ERROR} {output_path.name}")
        raise


def read_csv_to_df(file_path: Path, logger=None) -> pd.DataFrame:
    """ import '.csv' file to pandas dataframe (all columns as text, 'NA' kept verbatim) """
    try:
        if isinstance(file_path, Path) and file_path.is_file() and file_path.suffix == ".csv":
            df = pd.read_csv(
                file_path,
                sep=",",
                engine="c",
                encoding="utf-8",
                na_filter=False,
                dtype=object,
                low_memory=False,
            )
            if isinstance(df, pd.DataFrame):
                return df
    except (AttributeError, ValueError, pd.errors.DtypeWarning):
        log_exception(logger=logger, error_msg=f"'{file_path}'")
    return pd.DataFrame()


def write_df_to_csv(output_path: Path, df: pd.DataFrame, table_name: str = None, logger=None) -> None:
    """
    exports dataframe to comma-delimited '.csv' file (minimal quoting, missing
    values written as NA); table_name applies the column layout of estlab_dtypes
    """
    method = f"{inspect.currentframe().f_code.co_name}()"
    if not isinstance(output_path, Path) or not isinstance(df, pd.DataFrame):
        raise TypeError(f"{method} {FAILURE} invalid types: {type(output_path)} {type(df)}")
    if table_name is not None:
        df = std_dtypes(table_name, df, logger=logger)
    try:
        row_count = df.shape[0]
        if not output_path.parent.exists():
            output_path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(
            output_path,
            sep=",",
            encoding="utf-8",
            na_rep=MISSING_TOKEN,
            quoting=csv.QUOTE_MINIMAL,
            quotechar='"',
            index=False,
            header=True,
        )
        if row_count == 0:
            log_info(logger=logger, msg=f"{method} {WARNING} dataframe empty (no rows) '{output_path.name}'")
        else:
            log_info(logger=logger, msg=f"{method} {SUCCESS} '{output_path.name}' ({row_count} ROWS)")
    except (OSError, ValueError):
        log_exception(logger=logger, error_msg=f"{method} {FAILURE} '{output_path}'")
        raise


@dataclass(frozen=True)
class RunManifest:
    """everything needed to reproduce an output directory"""
    command: str
    config_path: str
    spec_path: str
    seed: int
    replicates: int
    imputations: int
    n_oracle: int
    output_dir: str
    failure_budget: float
    keep_replicates: bool = False
    tool_version: str = field(default_factory=get_tool_version)
    input_hashes: Dict[str, dict] = field(default_factory=dict)

    @classmethod
    def build(cls, command: str, config_path: Path, spec_path: Path, **settings) -> "RunManifest":
        hashes = {}
        for path in (config_path, spec_path):
            if path is not None:
                hashes[Path(path).name] = get_checksum(Path(path))
        return cls(command=command, config_path=str(config_path), spec_path=str(spec_path),
                   input_hashes=hashes, **settings)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def write_manifest(output_dir: Path, manifest: RunManifest, logger=None) -> Path:
    """first file of every run; a stale PARTIAL marker from an earlier run is removed"""
    manifest_path = Path(output_dir, MANIFEST_NAME)
    write_json(manifest_path, manifest.as_dict(), logger=logger)
    partial_path = Path(output_dir, PARTIAL_NAME)
    if partial_path.is_file():
        partial_path.unlink()
    return manifest_path


def write_partial_marker(output_dir: Path, reason: str, logger=None) -> Path:
    """flags an output directory holding results of an aborted study"""
    partial_path = Path(output_dir, PARTIAL_NAME)
    write_txt(partial_path, f"{reason}\n", logger=logger)
    return partial_path
