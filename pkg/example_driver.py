"""
main driver module: the true effect of every strategy in the full-featured
scenario, then a small study of its lack-of-efficacy estimand
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
import sys
import time
from pathlib import Path

MODULE_NAME = Path(__file__).resolve().name
CWD_PATH = Path(__file__).resolve().parent

# ./dev_tools/estimand-lab/
LAB_PATH = Path(CWD_PATH, "dev_tools", "estimand-lab")
sys.path.insert(0, str(LAB_PATH))

from StudyRunner import StudyRunner  # noqa: E402
from estlab_config import load_scenario  # noqa: E402
from estlab_files import write_df_to_csv, write_json  # noqa: E402
from estlab_logging import get_relevant_env_vars, setup_logger  # noqa: E402
from estlab_oracle import (  # noqa: E402
    true_cdh,
    true_dtr,
    true_nth,
    true_principal_stratum,
    true_pth,
    true_treatment_policy,
)
from estlab_planner import CDH, load_spec  # noqa: E402

CONFIG_PATH = Path(LAB_PATH, "config")
OUTPUT_PATH = Path(CWD_PATH, "estlab_output", "example")

LOGGER = setup_logger(MODULE_NAME)

if __name__ == "__main__":
    print(f"{MODULE_NAME} started")
    start = time.perf_counter()
    get_relevant_env_vars()

    config = load_scenario(CONFIG_PATH / "full_featured.toml", logger=LOGGER)
    for name, truth in (("CDH", true_cdh), ("NTH", true_nth), ("PTH", true_pth),
                        ("TreatmentPolicy", true_treatment_policy)):
        print(f"{name:<16} {truth(config, 200_000).value: .4f}")
    print(f"{'DTR':<16} {true_dtr(config, config.dtr_threshold, 200_000).value: .4f}")
    stratum = true_principal_stratum(config, config.ps_threshold, CDH, 200_000)
    print(f"{'PS(CDH)':<16} {stratum.value: .4f}  prevalence {stratum.stratum_prevalence:.3f}")

    runner = StudyRunner(
        load_scenario(CONFIG_PATH / "mar_loe.toml", logger=LOGGER),
        load_spec(CONFIG_PATH / "mar_loe.spec", logger=LOGGER),
        replicates=50, imputations=10, n_oracle=200_000, logger=LOGGER,
    )
    summary = runner.run()
    write_json(OUTPUT_PATH / "summary.json", summary.as_dict(), logger=LOGGER)
    write_df_to_csv(OUTPUT_PATH / "summary.csv", summary.as_frame(), table_name="summary", logger=LOGGER)
    print(summary.as_frame().to_string(index=False))

    print(f"{MODULE_NAME} finished: {time.perf_counter() - start:0.2f} seconds")
