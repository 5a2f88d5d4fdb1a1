from setuptools import setup

requirements = [
    "numpy>=1.22",
    "pandas",
    "scipy>=1.8",
    "statsmodels>=0.13",
    "toml",
]

setup(
    name="estimand-lab",
    version="0.3.0",
    description="Estimand simulation laboratory for trials with intercurrent events",
    python_requires=">=3.9,<4.0",
    py_modules=[
        "StudyRunner",
        "estlab_analysis",
        "estlab_cli",
        "estlab_config",
        "estlab_defaults",
        "estlab_dtypes",
        "estlab_errors",
        "estlab_files",
        "estlab_imputation",
        "estlab_logging",
        "estlab_model",
        "estlab_oracle",
        "estlab_planner",
        "estlab_simulator",
    ],
    data_files=[("config", ["config/" + name for name in (
        "smoke.toml", "mar_loe.toml", "return_to_baseline.toml", "jump_to_reference.toml",
        "retrieved_dropout.toml", "full_featured.toml",
        "default_plan.spec", "smoke.spec", "mar_loe.spec", "return_to_baseline.spec",
        "jump_to_reference.spec", "retrieved_dropout.spec", "tp_pandemic.spec",
        "composite_strategy.spec", "composite_endpoint.spec", "principal_stratum.spec",
    )])],
    install_requires=requirements,
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["estimand-lab=estlab_cli:main"]},
)
