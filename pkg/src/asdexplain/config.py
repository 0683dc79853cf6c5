"""Run configuration: INI file plus command-line overrides.

Every option lives in one section of the INI file and has one command-line
flag. Precedence is built-in default < config file < flag. The merged result
is written into the run directory so a run can be repeated from that file
alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from .attribution import METHODS, AttributionConfig
from .evaluation import PipelineConfig
from .ingest import FD_THRESHOLD, SynthConfig
from .roar import DEFAULT_THRESHOLDS, RoarConfig
from .ssae import TrainConfig
from .svm_rfe import SvmHyper


class ConfigError(ValueError):
    pass


def _none_or(parse):
    def inner(text):
        text = str(text).strip()
        return None if text.lower() in ("none", "off", "") else parse(text)
    inner.__name__ = parse.__name__
    return inner


def _list_of(parse):
    def inner(text):
        if isinstance(text, (list, tuple)):
            return tuple(parse(str(t)) for t in text)
        return tuple(parse(t.strip()) for t in str(text).split(",") if t.strip())
    inner.__name__ = f"list of {parse.__name__}"
    return inner


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    parse: object
    default: object
    help: str
    flag: str = ""

    @property
    def cli_flag(self):
        return self.flag or "--" + self.key.replace("_", "-")

    @property
    def dest(self):
        return f"{self.section}__{self.key}"


_syn = SynthConfig()
_pipe = PipelineConfig()
_svm = SvmHyper()
_pre = TrainConfig()
_fine = TrainConfig(learning_rate=1e-4)
_attr = AttributionConfig()

OPTIONS = [
    Option("run", "seed", int, 42, "base seed; every stage seed derives from it"),
    Option("run", "jobs", int, 1, "worker processes for folds and ROAR cells"),
    Option("run", "run_dir", str, "run", "output directory of the run"),
    Option("data", "manifest", str, "", "subject manifest (csv)"),
    Option("data", "fd_threshold", _none_or(float), FD_THRESHOLD,
           "drop subjects with mean FD above this (mm); 'none' disables"),
    Option("synth", "out", str, "synthetic", "output directory for generated data"),
    Option("synth", "n_subjects", int, _syn.n_subjects, "number of subjects"),
    Option("synth", "planted_edges", int, _syn.n_planted_edges, "edges carrying class signal"),
    Option("synth", "effect_size", float, _syn.effect_size, "class difference on planted edges"),
    Option("synth", "mode", str, _syn.mode, "'edge' (features) or 'timeseries'"),
    Option("synth", "timepoints", int, _syn.timepoints, "frames per series (timeseries mode)"),
    Option("synth", "high_fd_fraction", float, _syn.high_fd_fraction,
           "share of subjects with high motion"),
    Option("synth", "noise_scale", float, _syn.noise_scale, "noise sd added to high-motion subjects"),
    Option("synth", "hub_rois", int, _syn.hub_rois, "restrict planted edges to this many ROIs"),
    Option("pipeline", "k", int, _pipe.k, "cross-validation folds"),
    Option("pipeline", "val_fraction", float, _pipe.val_fraction, "validation share per class"),
    Option("pipeline", "n_selected", int, _pipe.n_selected, "features kept by SVM-RFE"),
    Option("pipeline", "selection_scope", str, _pipe.selection_scope,
           "'per_fold' or 'global' feature selection"),
    Option("pipeline", "hidden_dims", _list_of(int), _pipe.hidden_dims, "autoencoder widths"),
    Option("svm", "c", float, _svm.C, "SVM regularisation constant", "--svm-c"),
    Option("svm", "epochs", int, _svm.epochs, "SVM epochs per elimination round", "--svm-epochs"),
    Option("svm", "learning_rate", float, _svm.learning_rate, "SVM base step size", "--svm-lr"),
    Option("svm", "batch_size", int, _svm.batch_size, "SVM minibatch size", "--svm-batch-size"),
    Option("pretrain", "epochs", int, _pre.epochs, "epochs per autoencoder", "--pretrain-epochs"),
    Option("pretrain", "learning_rate", float, _pre.learning_rate, "Adam step size",
           "--pretrain-lr"),
    Option("pretrain", "weight_decay", float, _pre.weight_decay, "L2 weight decay",
           "--pretrain-weight-decay"),
    Option("pretrain", "batch_size", int, _pre.batch_size, "minibatch size",
           "--pretrain-batch-size"),
    Option("pretrain", "rho", float, _pre.rho, "target mean activation"),
    Option("pretrain", "beta", float, _pre.beta, "sparsity penalty weight"),
    Option("finetune", "epochs", int, _fine.epochs, "fine-tuning epochs", "--finetune-epochs"),
    Option("finetune", "learning_rate", float, _fine.learning_rate, "Adam step size",
           "--finetune-lr"),
    Option("finetune", "weight_decay", float, _fine.weight_decay, "L2 weight decay",
           "--finetune-weight-decay"),
    Option("finetune", "batch_size", int, _fine.batch_size, "minibatch size",
           "--finetune-batch-size"),
    Option("attribution", "methods", _list_of(str), METHODS, "attribution methods to run"),
    Option("attribution", "fold", int, 0, "fold whose model is explained", "--explain-fold"),
    Option("attribution", "ig_steps", int, _attr.ig_steps, "integrated-gradients steps"),
    Option("attribution", "background_size", int, _attr.background_size,
           "background rows for the SHAP variants"),
    Option("attribution", "gradient_shap_samples", int, _attr.gradient_shap_samples,
           "GradientSHAP samples per row"),
    Option("attribution", "lime_samples", int, _attr.lime_samples, "LIME perturbations"),
    Option("attribution", "kernel_shap_coalitions", int, _attr.kernel_shap_coalitions,
           "KernelSHAP coalitions"),
    Option("attribution", "max_samples", int, _attr.max_samples, "explained rows (cap)"),
    Option("roar", "thresholds", _list_of(float), DEFAULT_THRESHOLDS, "removed fractions"),
    Option("roar", "methods", _list_of(str), ("integrated_gradients", "deep_lift", "random"),
           "rankings to benchmark", "--roar-methods"),
    Option("roar", "folds", _none_or(_list_of(int)), None, "folds to retrain ('none' = all)",
           "--roar-folds"),
    Option("roar", "planted", str, "", "planted-edge file; adds the 'oracle' ranking"),
    Option("report", "method", str, "integrated_gradients", "ranking to report",
           "--report-method"),
    Option("report", "top_fraction", float, 0.01, "share of ranked connections counted"),
    Option("check", "dims", _list_of(int), (1000, 500, 100, 2), "network widths",
           "--check-dims"),
    Option("check", "h", float, 1e-5, "central-difference step"),
    Option("check", "coords", int, 200, "sampled coordinates per layer"),
    Option("check", "tolerance", float, 1e-5, "maximum allowed relative error"),
]

_BY_SECTION = {}
for _o in OPTIONS:
    _BY_SECTION.setdefault(_o.section, {})[_o.key] = _o


def defaults() -> dict:
    return {(o.section, o.key): o.default for o in OPTIONS}


def read_ini(path) -> dict:
    """Parse a config file into ``{(section, key): value}``; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _BY_SECTION:
            raise ConfigError(f"unknown config section [{section}]")
        for key, text in parser.items(section):
            opt = _BY_SECTION[section].get(key)
            if opt is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            out[(section, key)] = parse_value(opt, text)
    return out


def parse_value(opt: Option, text):
    try:
        return opt.parse(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{opt.section}] {opt.key}: cannot parse {text!r}") from exc


def merge(config_file=None, overrides=None) -> dict:
    values = defaults()
    if config_file:
        values.update(read_ini(config_file))
    values.update(overrides or {})
    return values


def write_ini(values: dict, path) -> None:
    """Echo the effective configuration, sections and keys in schema order."""
    lines = []
    for section, opts in _BY_SECTION.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format(values[(section, key)])}" for key in opts)
        lines.append("")
    Path(path).write_text("\n".join(lines))


@dataclass
class RunConfig:
    values: dict

    def get(self, section, key):
        return self.values[(section, key)]

    @property
    def seed(self):
        return self.get("run", "seed")

    @property
    def jobs(self):
        return self.get("run", "jobs")

    @property
    def run_dir(self):
        return Path(self.get("run", "run_dir"))

    def synth(self) -> SynthConfig:
        g = lambda k: self.get("synth", k)  # noqa: E731
        cfg = SynthConfig(n_subjects=g("n_subjects"), n_planted_edges=g("planted_edges"),
                          effect_size=g("effect_size"), timepoints=g("timepoints"),
                          high_fd_fraction=g("high_fd_fraction"), noise_scale=g("noise_scale"),
                          mode=g("mode"), seed=self.seed, hub_rois=g("hub_rois"))
        return _checked(cfg)

    def pipeline(self) -> PipelineConfig:
        p = lambda k: self.get("pipeline", k)  # noqa: E731
        svm = SvmHyper(C=self.get("svm", "c"), epochs=self.get("svm", "epochs"),
                       learning_rate=self.get("svm", "learning_rate"),
                       batch_size=self.get("svm", "batch_size"))
        pre = TrainConfig(epochs=self.get("pretrain", "epochs"),
                          learning_rate=self.get("pretrain", "learning_rate"),
                          weight_decay=self.get("pretrain", "weight_decay"),
                          batch_size=self.get("pretrain", "batch_size"),
                          rho=self.get("pretrain", "rho"), beta=self.get("pretrain", "beta"))
        fine = replace(pre, epochs=self.get("finetune", "epochs"),
                       learning_rate=self.get("finetune", "learning_rate"),
                       weight_decay=self.get("finetune", "weight_decay"),
                       batch_size=self.get("finetune", "batch_size"))
        cfg = PipelineConfig(k=p("k"), val_fraction=p("val_fraction"),
                             n_selected=p("n_selected"), selection_scope=p("selection_scope"),
                             hidden_dims=tuple(p("hidden_dims")), svm=svm, pretrain=pre,
                             finetune=fine, seed=self.seed)
        if cfg.n_selected < 1 or not cfg.hidden_dims or min(cfg.hidden_dims) < 1:
            raise ConfigError("n_selected and hidden_dims must be positive")
        return _checked(cfg)

    def attribution(self) -> AttributionConfig:
        a = lambda k: self.get("attribution", k)  # noqa: E731
        unknown = set(a("methods")) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown attribution methods: {', '.join(sorted(unknown))}")
        cfg = AttributionConfig(ig_steps=a("ig_steps"), background_size=a("background_size"),
                                gradient_shap_samples=a("gradient_shap_samples"),
                                lime_samples=a("lime_samples"),
                                kernel_shap_coalitions=a("kernel_shap_coalitions"),
                                max_samples=a("max_samples"), seed=self.seed)
        return _checked(cfg)

    def roar(self) -> RoarConfig:
        folds = self.get("roar", "folds")
        cfg = RoarConfig(thresholds=tuple(self.get("roar", "thresholds")),
                         pipeline=self.pipeline(),
                         folds=None if folds is None else tuple(folds))
        if cfg.folds is not None and any(not 0 <= f < cfg.pipeline.k for f in cfg.folds):
            raise ConfigError("roar folds out of range")
        return _checked(cfg)


def _checked(cfg):
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg
