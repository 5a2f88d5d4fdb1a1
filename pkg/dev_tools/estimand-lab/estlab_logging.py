"""
helper module for logging and environment functions
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
import os
import sys
import logging
import platform
import pprint as pp
from pathlib import Path

from estlab_defaults import ENV_LOG_DIR, ENV_VARS, TOOL_VERSION

MODULE_PATH = Path(__file__).resolve()
# ./estimand-lab/logs/
CWD_PATH = MODULE_PATH.parent

LOG_FORMAT = "%(asctime)s [%(levelname)s] pid:%(process)d | %(filename)s:%(lineno)d | %(message)s"


def default_log_file() -> Path:
    """log file location, ESTLAB_LOG_DIR wins over the module directory"""
    log_dir = os.environ.get(ENV_LOG_DIR)
    if log_dir:
        return Path(log_dir, "estimand_lab.log")
    return Path(CWD_PATH, "logs", "estimand_lab.log")


def setup_logger(src_file, log_file="default", stream=sys.stderr, level=logging.INFO) -> logging.Logger:
    """logging setup with both file and console output (log_file=None: console only)"""
    logger = logging.getLogger(str(src_file))
    logger.setLevel(level)
    # handlers are attached once per named logger
    if logger.handlers:
        return logger
    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S %Z")
    if log_file == "default":
        log_file = default_log_file()
    if log_file is not None:
        log_file = Path(log_file)
        if not log_file.parent.exists():
            log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(str(log_file))
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)
    if stream is not None:
        stream_handler = logging.StreamHandler(stream)
        stream_handler.setLevel(level)
        stream_handler.setFormatter(formatter)
        logger.addHandler(stream_handler)
    logger.propagate = False
    return logger


def log_info(logger=None, msg: str = None) -> None:
    """print message to stderr if logger=None"""
    logger.info(msg) if logger else print(msg, file=sys.stderr)


def log_warning(logger=None, msg: str = None) -> None:
    """warning level variant of log_info()"""
    logger.warning(msg) if logger else print(msg, file=sys.stderr)


def log_exception(logger=None, error_msg: str = None) -> None:
    """ custom exception handling logging function."""
    ex_type, ex_value, ex_tb = sys.exc_info()
    ex_type = f"{ex_type.__name__}" if ex_type else ""
    ex_value = " ".join(f"{str(ex_value)}".split()) if ex_value else ""
    src_name = f"{os.path.split(ex_tb.tb_frame.f_code.co_filename)[1]}" if ex_tb else ""
    line_num = f"{ex_tb.tb_lineno}" if ex_tb else ""
    base_msg = f"{ex_type} {ex_value} | {src_name}:{line_num}"
    exc_msg = f"{error_msg} | {base_msg}" if error_msg else base_msg
    logger.error(exc_msg) if logger else print(exc_msg, file=sys.stderr)


def get_tool_version() -> str:
    """installed distribution version, falls back to the source constant"""
    try:
        from importlib.metadata import version, PackageNotFoundError
        try:
            return version("estimand-lab")
        except PackageNotFoundError:
            return TOOL_VERSION
    except ImportError:
        return TOOL_VERSION


def get_relevant_env_vars(include_all=False) -> dict:
    """shows environmental variables read by the package"""
    env_dict = {}
    if include_all:
        env_dict.update(dict(os.environ))
        env_dict.pop("PATH", None)
        env_dict.pop("PYTHONPATH", None)
    else:
        for env_name, val in os.environ.items():
            if env_name in ENV_VARS:
                env_dict[env_name] = val
    if env_dict:
        print(f"host: '{platform.node()}'", file=sys.stderr)
        pp.pprint(env_dict, stream=sys.stderr, indent=2, width=64, compact=False, sort_dicts=False)
    return env_dict
