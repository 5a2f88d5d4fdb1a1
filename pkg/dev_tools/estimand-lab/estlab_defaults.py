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
"""
default values for modules
"""
DEBUG = False
STATUS = {True: "SUCCESS", False: "ERROR"}

SUCCESS = "SUCCESS:"
ERROR = "ERROR:"
FAILURE = "FAILURE:"
WARNING = "WARNING:"

TOOL_NAME = "estimand-lab"
TOOL_VERSION = "0.3.0"

# command line defaults
DEFAULT_IMPUTATIONS = 20
DEFAULT_REPLICATES = 1000
DEFAULT_ORACLE_SIZE = 10**6
DEFAULT_FAILURE_BUDGET = 0.01
DEFAULT_OUTPUT_DIR = "estlab_output"
ORACLE_BLOCK_SIZE = 100_000

ALPHA = 0.05
CONFIDENCE = 1.0 - ALPHA

# environment variables
ENV_OUTPUT_DIR = "ESTLAB_OUTPUT_DIR"
ENV_LOG_DIR = "ESTLAB_LOG_DIR"
ENV_VARS = [ENV_OUTPUT_DIR, ENV_LOG_DIR]

# exit codes of every subcommand
EXIT_OK = 0
EXIT_WARNINGS = 1
EXIT_ERRORS = 2

# spawn keys of the derived random streams
STREAM_REPLICATE = 0
STREAM_ORACLE = 1
STREAM_IMPUTATION = 2

NON_ICE_REASON = "NonIce"
MISSING_TOKEN = "NA"

# reasons a scenario cannot produce post-ICE observations
NO_POST_ICE_CAUSES = ("AdminLostToFollowUp",)
