"""Analysis configuration: column roles, methods, and run parameters.

The JSON layout understood by :meth:`AnalysisConfig.from_dict`::

    {
      "schema_version": 1,
      "columns": {"cluster": "site", "time": "period", "treatment": "arm",
                  "covariates": ["age"]},
      "outcomes": [{"name": "y1", "family": "gaussian"},
                   {"name": "y2", "family": "poisson", "link": "log"}],
      "alpha": 0.05,
      "methods": ["none", "bonferroni", "holm", "romano_wolf"],
      "statistic": "unweighted",
      "sided": "two_sided",
      "n_permutations": 1000,
      "n_search_steps": 2000,
      "seed": 1,
      "covariance": {"source": "estimate"}
    }

``covariance.source`` may instead be ``"fixed"`` with explicit
``structure`` / ``sigma2`` / ``tau2`` / ``lambda`` entries, which are
used verbatim for the weighted statistic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import OutcomeSpec
from .errors import ConfigError

METHODS = ("naive", "none", "bonferroni", "holm", "romano_wolf")
PERMUTATION_METHODS = ("none", "bonferroni", "holm", "romano_wolf")
STATISTIC_KINDS = ("unweighted", "weighted")
SIDES = ("two_sided", "one_sided")

SCHEMA_VERSION = 1


def _require(d: dict, key: str):
    if key not in d:
        raise ConfigError(f"missing field: {key}")
    return d[key]


@dataclass
class AnalysisConfig:
    cluster_col: str
    treatment_col: str
    outcome_specs: tuple[OutcomeSpec, ...]
    time_col: str | None = None
    covariate_cols: tuple[str, ...] = ()
    alpha: float = 0.05
    methods: tuple[str, ...] = ("none", "bonferroni", "holm", "romano_wolf")
    statistic: str = "unweighted"
    sided: str = "two_sided"
    n_permutations: int = 1000
    n_search_steps: int = 2000
    seed: int = 1
    covariance_source: str = "estimate"
    covariance_fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method: {m!r}")
        if self.statistic not in STATISTIC_KINDS:
            raise ConfigError(f"unknown statistic kind: {self.statistic!r}")
        if self.sided not in SIDES:
            raise ConfigError(f"unknown sidedness: {self.sided!r}")
        if self.n_permutations < 1:
            raise ConfigError("n_permutations must be >= 1")
        if self.covariance_source not in ("estimate", "fixed"):
            raise ConfigError(
                f"covariance source must be 'estimate' or 'fixed', got "
                f"{self.covariance_source!r}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        columns = _require(d, "columns")
        if not isinstance(columns, dict):
            raise ConfigError("'columns' must be an object")
        outcomes_raw = _require(d, "outcomes")
        if not isinstance(outcomes_raw, list) or not outcomes_raw:
            raise ConfigError("'outcomes' must be a non-empty list")
        specs = []
        for entry in outcomes_raw:
            try:
                specs.append(
                    OutcomeSpec(
                        name=_require(entry, "name"),
                        family=_require(entry, "family"),
                        link=entry.get("link", ""),
                    )
                )
            except ConfigError:
                raise
            except Exception as exc:
                raise ConfigError(str(exc)) from None
        cov = d.get("covariance", {"source": "estimate"})
        return cls(
            cluster_col=_require(columns, "cluster"),
            treatment_col=_require(columns, "treatment"),
            time_col=columns.get("time"),
            covariate_cols=tuple(columns.get("covariates", ())),
            outcome_specs=tuple(specs),
            alpha=float(d.get("alpha", 0.05)),
            methods=tuple(d.get("methods", ("none", "bonferroni", "holm", "romano_wolf"))),
            statistic=d.get("statistic", "unweighted"),
            sided=d.get("sided", "two_sided"),
            n_permutations=int(d.get("n_permutations", 1000)),
            n_search_steps=int(d.get("n_search_steps", 2000)),
            seed=int(d.get("seed", 1)),
            covariance_source=cov.get("source", "estimate"),
            covariance_fixed={k: v for k, v in cov.items() if k != "source"},
        )
