"""Train-and-evaluate recipes shared by the CLI and the acceptance harness."""
from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from . import head as head_mod
from . import inference, metrics
from .catalog import DEFAULT_BOUNDARIES, INF, PlainLayout, assign_groups, boundaries_for
from .errors import ConfigError
from .synthdata import Dataset, SynthConfig
from .train import TrainConfig, TrainHistory, train

# Names accepted by compare: the trainable methods plus derived recipes.
RECIPES = (
    "softmax",
    "bags",
    "reweight",
    "focal",
    "tail_finetune",
    "rfs",
    "tau_norm",
    "tau_select",
    "ncm",
)
NEEDS_BASELINE = ("tail_finetune", "tau_norm", "tau_select", "ncm")
SWEEP_AXES = ("beta", "groups")
THREADS_ENV = "LONGTAIL_LAB_THREADS"


@dataclass
class RunConfig:
    """Everything that determines a run; echoed into every artifact."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    boundaries: tuple = DEFAULT_BOUNDARIES
    tau: float = 1.0

    def to_dict(self) -> dict:
        return {
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "boundaries": [[lo, None if hi == INF else hi] for lo, hi in self.boundaries],
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"synth", "train", "boundaries", "groups", "tau"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(
            synth=SynthConfig.from_dict(d.get("synth", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            tau=float(d.get("tau", 1.0)),
        )
        if "groups" in d and "boundaries" in d:
            raise ConfigError("give either groups or boundaries, not both")
        if "groups" in d:
            cfg.boundaries = boundaries_for(int(d["groups"]))
        elif "boundaries" in d:
            cfg.boundaries = tuple((lo, INF if hi is None else hi) for lo, hi in d["boundaries"])
        return cfg

    def replace_train(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **kw))


@dataclass
class RunResult:
    recipe: str
    report: metrics.MetricsReport
    params: head_mod.HeadParams | None = None
    history: TrainHistory | None = None


def layout_for(dataset: Dataset, config: RunConfig):
    if config.train.method == "bags":
        return assign_groups(dataset.catalog, config.boundaries)
    return PlainLayout(dataset.catalog.num_classes)


def fit(dataset: Dataset, config: RunConfig, init_params=None):
    return train(dataset, layout_for(dataset, config), config.train, init_params)


def report_for(params, dataset: Dataset, config: RunConfig, recipe: str, predictor=None):
    if predictor is None:
        predictor = lambda X: inference.predict(params, X)  # noqa: E731
    norms = head_mod.weight_norms(params) if params is not None else None
    return metrics.evaluate(
        predictor,
        dataset.eval,
        dataset.catalog,
        weight_norms=norms,
        method=recipe,
        config=config.to_dict(),
    )


def baseline_for(dataset: Dataset, config: RunConfig):
    return fit(dataset, config.replace_train(method="softmax", sampler="uniform"))


def derived_predictor(recipe: str, baseline, dataset: Dataset, tau: float):
    """(params whose norms to report, predictor) for the post-hoc recipes."""
    if recipe == "tau_norm":
        tp = inference.tau_normalize(baseline, tau)
        return tp, lambda X: inference.softmax_predict(head_mod.forward(tp, X))
    if recipe == "tau_select":
        tp = inference.tau_normalize(baseline, tau)
        return tp, lambda X: inference.tau_select_predict(baseline, tp, X)
    if recipe == "ncm":
        means = inference.ncm_build(dataset.train, dataset.catalog.num_foreground)

        def ncm(X):
            p0 = inference.softmax_predict(head_mod.forward(baseline, X)).scores[:, 0]
            return inference.ncm_predict(X, means, p0)

        return None, ncm
    raise ConfigError(f"{recipe!r} is not a post-hoc recipe")


def run_recipe(dataset: Dataset, recipe: str, config: RunConfig, baseline=None) -> RunResult:
    """Train (if needed) and evaluate one named recipe."""
    if recipe not in RECIPES:
        raise ConfigError(f"unknown method {recipe!r}; valid: {', '.join(RECIPES)}")
    if recipe in NEEDS_BASELINE and baseline is None:
        baseline, _ = baseline_for(dataset, config)

    if recipe in ("tau_norm", "tau_select", "ncm"):
        params, predictor = derived_predictor(recipe, baseline, dataset, config.tau)
        return RunResult(recipe, report_for(params, dataset, config, recipe, predictor), params)

    if recipe == "rfs":
        cfg = config.replace_train(method="softmax", sampler="rfs")
    else:
        cfg = config.replace_train(method=recipe)
    init = baseline if recipe == "tail_finetune" else None
    params, history = fit(dataset, cfg, init)
    return RunResult(recipe, report_for(params, dataset, cfg, recipe), params, history)


def sweep_config(config: RunConfig, axis: str, value) -> RunConfig:
    cfg = config.replace_train(method="bags")
    if axis == "beta":
        return cfg.replace_train(beta=float(value))
    if axis == "groups":
        return dataclasses.replace(cfg, boundaries=boundaries_for(int(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")


def _sweep_one(args):
    dataset, config, axis, value = args
    cfg = sweep_config(config, axis, value)
    params, _ = fit(dataset, cfg)
    return report_for(params, dataset, cfg, "bags")


def sweep_workers(num_values: int) -> int:
    try:
        cap = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    return max(1, min(cap, num_values))


def sweep(dataset: Dataset, axis: str, values, config: RunConfig, workers: int = 1):
    """One BAGS train+eval per value; returns [(value, report)] in input order."""
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    jobs = [(dataset, config, axis, v) for v in values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(_sweep_one, jobs))
    else:
        reports = [_sweep_one(j) for j in jobs]
    return list(zip(values, reports))


def summary_row(report: metrics.MetricsReport) -> dict:
    row = {"overall_acc": report.overall_acc}
    for b in range(1, 5):
        row[f"acc_{b}"] = report.bin_acc(b)
    row["acc_bg"] = report.acc_bg
    row["pearson_norm_logcount"] = report.pearson_norm_logcount
    return row
