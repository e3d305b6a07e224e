"""Experiment configuration: `section.key = value` files plus `--set` overrides.

Everything that changes results lives here. Ambient settings (log level,
workspace root, caps) come from the environment through otdistill.config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from otdistill.data_gen import GmmSpec, make_spec
from otdistill.errors import ConfigError, DistillError
from otdistill.guided_sampler import GuidanceWeights, SamplerConfig
from otdistill.relabeler import DEFAULT_POOL, TeacherSpec, parse_pool
from otdistill.student import LossWeights

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    modes_per_class: int = 3
    dim: int = 8
    mode_std: float = 0.7
    samples_per_class: int = 500
    grid_spacing: float = 3.0
    grid_seed: int = 0
    seed: int = 0


@dataclass(frozen=True)
class SamplerSection:
    ipc: int = 10
    steps: int = 50
    beta1: float = 1.0
    gamma: float = 0.05
    rho: float = 0.0
    lambda1: float = 1000.0
    lambda_mode: str = "adaptive"
    lambda_scale: float = 0.1
    sinkhorn_iters: int = 20
    batch_size: int = 64
    p: float = 1.0
    guidance_metric: str = "ot"
    guidance_schedule: str = "constant"
    mmd_bandwidth: float = 0.0


@dataclass(frozen=True)
class RelabelSection:
    pool: str = DEFAULT_POOL
    epochs: int = 200
    lr: float = 0.01
    epsilon_scale: float = 0.1
    iterations: int = 100
    delta: float = 1e-9
    p: float = 1.0


@dataclass(frozen=True)
class StudentSection:
    kind: str = "mlp"
    hidden: int = 32
    epochs: int = 300
    batch_size: int = 50
    lr: float = 0.01
    weight_decay: float = 1e-4
    ema_rate: float = 0.0
    kappa1: float = 1.0
    kappa2: float = 0.025
    beta2: float = 0.1
    lambda2: float = 0.1
    sinkhorn_iters: int = 50
    p: float = 1.0
    logit_match: str = "ot"
    mse_on: str = "probabilities"
    mmd_bandwidth: float = 0.0


@dataclass(frozen=True)
class AblationSection:
    otg: bool = True
    lia: bool = True
    otm: bool = True
    seeds: Tuple[int, ...] = tuple(range(20))


@dataclass(frozen=True)
class EvalSection:
    coverage_factors: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    w_lambda_scale: float = 0.05
    w_iterations: int = 200
    p: float = 1.0


@dataclass(frozen=True)
class RunSection:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    workers: int = 1


SECTIONS = {
    "data": "data",
    "sampler": "sampler",
    "relabel": "relabel",
    "student": "student",
    "ablation": "ablation",
    "eval": "evaluation",
    "run": "run",
}


def _parse_int_list(text: str) -> Tuple[int, ...]:
    values: List[int] = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    return tuple(values)


def _coerce(raw: str, hint) -> object:
    text = raw.strip()
    if hint is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is str:
        return text
    if typing.get_origin(hint) is tuple:
        (item, _) = typing.get_args(hint)
        if item is int:
            return _parse_int_list(text)
        return tuple(float(p) for p in text.split(",") if p.strip())
    raise ValueError(f"unsupported setting type {hint}")


def _section_hints(cls) -> Dict[str, object]:
    return typing.get_type_hints(cls)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_override(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigError("override must look like section.key=value", details={"override": text})
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def read_config_lines(lines: Iterable[str]) -> Dict[str, str]:
    entries: Dict[str, str] = {}
    for number, line in enumerate(lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("expected 'section.key = value'", details={"line": number, "text": line.rstrip()})
        key, value = stripped.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    relabel: RelabelSection = field(default_factory=RelabelSection)
    student: StudentSection = field(default_factory=StudentSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        self.validate()

    @classmethod
    def from_mapping(cls, entries: Mapping[str, str], base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        sections = {name: getattr(base, attr) if base else None for name, attr in SECTIONS.items()}
        updates: Dict[str, Dict[str, object]] = {name: {} for name in SECTIONS}
        for dotted, raw in entries.items():
            if "." not in dotted:
                raise ConfigError("setting must be 'section.key'", details={"key": dotted})
            section, key = dotted.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError("unknown config section", details={"section": section})
            section_cls = _SECTION_CLASSES[section]
            hints = _section_hints(section_cls)
            if key not in hints:
                raise ConfigError("unknown config key", details={"key": dotted})
            try:
                updates[section][key] = _coerce(str(raw), hints[key])
            except ValueError as e:
                raise ConfigError(f"cannot parse {dotted}: {e}", details={"key": dotted, "value": raw}) from e
        built = {}
        for section, attr in SECTIONS.items():
            current = sections[section] or _SECTION_CLASSES[section]()
            built[attr] = dataclasses.replace(current, **updates[section])
        return cls(**built)

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}", details={"path": str(path)}) from e
        entries = read_config_lines(lines)
        entries.update(overrides or {})
        return cls.from_mapping(entries)

    def with_overrides(self, overrides: Mapping[str, str]) -> "ExperimentConfig":
        return ExperimentConfig.from_mapping(overrides, base=self)

    def to_lines(self) -> List[str]:
        lines = []
        for section, attr in SECTIONS.items():
            values = getattr(self, attr)
            for f in dataclasses.fields(values):
                lines.append(f"{section}.{f.name} = {_format(getattr(values, f.name))}")
        return lines

    def run_id(self) -> str:
        """Content hash of every setting except where outputs go."""
        canonical = "\n".join(line for line in self.to_lines() if not line.startswith(("run.output_dir", "run.workers")))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def validate(self) -> None:
        for key, seeds in (("run.seeds", self.run.seeds), ("ablation.seeds", self.ablation.seeds)):
            if not seeds:
                raise ConfigError(f"{key} must list at least one seed")
            if len(set(seeds)) != len(seeds):
                raise ConfigError(f"{key} must be distinct", details={"seeds": list(seeds)})
            if any(s < 0 for s in seeds):
                raise ConfigError(f"{key} must be nonnegative", details={"seeds": list(seeds)})
        if self.sampler.ipc < 1:
            raise ConfigError("sampler.ipc must be >= 1", details={"ipc": self.sampler.ipc})
        if self.run.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if any(f < 0 for f in self.evaluation.coverage_factors):
            raise ConfigError("eval.coverage_factors must be >= 0")
        try:
            self.gmm_spec()
            self.guidance_weights()
            self.sampler_config()
            self.loss_weights()
            self.teacher_specs()
        except DistillError as e:
            raise ConfigError(str(e), details=e.details) from e

    def gmm_spec(self) -> GmmSpec:
        d = self.data
        return make_spec(
            num_classes=d.num_classes,
            modes_per_class=d.modes_per_class,
            dim=d.dim,
            mode_std=d.mode_std,
            samples_per_class=d.samples_per_class,
            grid_spacing=d.grid_spacing,
            grid_seed=d.grid_seed,
        )

    def guidance_weights(self) -> GuidanceWeights:
        s = self.sampler
        return GuidanceWeights(beta1=s.beta1, gamma=s.gamma, rho=s.rho, lambda1=s.lambda1)

    def sampler_config(self) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(
            steps=s.steps,
            sinkhorn_iters=s.sinkhorn_iters,
            batch_size=s.batch_size,
            p=s.p,
            lambda_mode=s.lambda_mode,
            lambda_scale=s.lambda_scale,
            guidance_metric=s.guidance_metric,
            mmd_bandwidth=s.mmd_bandwidth,
            guidance_schedule=s.guidance_schedule,
        )

    def loss_weights(self) -> LossWeights:
        s = self.student
        return LossWeights(
            kappa1=s.kappa1,
            kappa2=s.kappa2,
            beta2=s.beta2,
            lambda2=s.lambda2,
            sinkhorn_iters=s.sinkhorn_iters,
            p=s.p,
            logit_match=s.logit_match,
            mse_on=s.mse_on,
            mmd_bandwidth=s.mmd_bandwidth,
        )

    def teacher_specs(self) -> List[TeacherSpec]:
        return parse_pool(self.relabel.pool)


_SECTION_CLASSES = {
    "data": DataSection,
    "sampler": SamplerSection,
    "relabel": RelabelSection,
    "student": StudentSection,
    "ablation": AblationSection,
    "eval": EvalSection,
    "run": RunSection,
}


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[List[str]] = None) -> ExperimentConfig:
    """Config from a file (or defaults) with `section.key=value` override strings applied."""
    pairs = dict(parse_override(o) for o in overrides or [])
    if path is None:
        return ExperimentConfig.from_mapping(pairs)
    return ExperimentConfig.from_file(path, pairs)
