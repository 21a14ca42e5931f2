"""
Experiment configuration: parsing and validation of the flat dotted-key TOML format, and
construction of targets, kernels, schedules and initial ensembles from it.

Every problem in a config is collected and reported together, each prefixed with its key path.
"""
import json
import logging
import tomllib
from dataclasses import dataclass, fields, replace

import numpy as np

from .config import MEDIAN, InitFamily, Integrator, KernelFamily, NoiseConvention, StepMode, TargetFamily
from .continuum import LangevinConfig, OdeConfig
from .errors import ConfigurationError
from .kernels import KernelSpec
from .svgd import ParticleEnsemble, StepSchedule, initial_ensemble_gaussian, initial_ensemble_grid
from .targets import GaussianTarget, MixtureTarget, TargetModel
from .verify import VerifyConfig

logger = logging.getLogger(__name__)

KNOWN_KEYS = {
    "seed", "n_particles",
    "target.family", "target.mean", "target.cov", "target.weights", "target.components",
    "kernel.family", "kernel.bandwidth", "kernel.imq_offset", "kernel.imq_exponent",
    "init.family", "init.mean", "init.cov", "init.low", "init.high",
    "schedule.mode", "schedule.base", "schedule.beta", "schedule.safety", "schedule.conservative",
    "run.max_iter",
    "flow.integrator", "flow.dt", "flow.t_end",
    "langevin.epsilon", "langevin.n_steps", "langevin.noise_convention",
    "output.record_every", "output.thinning", "output.track_density", "output.svg",
} | {f"verify.{f.name}" for f in fields(VerifyConfig)}

COMPONENT_KEYS = {"mean", "cov"}


@dataclass(frozen=True)
class InitSpec:
    family: InitFamily
    mean: np.ndarray
    cov: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def build(self, n: int, rng: np.random.Generator, track_density: bool = False) -> ParticleEnsemble:
        if self.family == InitFamily.GRID:
            return initial_ensemble_grid(self.low, self.high, n)
        return initial_ensemble_gaussian(self.mean, self.cov, n, rng, track_density)


@dataclass(frozen=True)
class OutputSettings:
    record_every: int = 10
    thinning: int = 0
    track_density: bool = False
    svg: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    n_particles: int
    target_family: TargetFamily
    target: TargetModel
    kernel: KernelSpec
    init: InitSpec
    schedule: StepSchedule
    max_iter: int
    flow: OdeConfig
    langevin: LangevinConfig
    output: OutputSettings
    verify: VerifyConfig
    text: str = ""
    values: dict | None = None
    overrides: dict | None = None
    source_text: str | None = None

    @property
    def dimension(self) -> int:
        return self.target.dimension

    def with_overrides(self, seed: int | None = None, track_density: bool | None = None,
                       t_end: float | None = None, dt: float | None = None) -> "ExperimentConfig":
        """
        Applies command-line overrides, re-validating what they touch. When anything is
        overridden, ``text`` becomes the rendered effective config, so re-running it reproduces
        the run; the file text moves to ``source_text``.
        """
        values = dict(self.values or {})
        overrides = dict(self.overrides or {})
        updated = self
        if seed is not None:
            values["seed"] = overrides["seed"] = int(seed)
            updated = replace(updated, seed=int(seed))
        if track_density is not None:
            if track_density and self.init.family == InitFamily.GRID:
                raise ConfigurationError("Density tracking needs a Gaussian initialization (init.family = \"gaussian\")")
            values["output.track_density"] = overrides["output.track_density"] = bool(track_density)
            updated = replace(updated, output=replace(updated.output, track_density=bool(track_density)))
        if t_end is not None or dt is not None:
            flow = replace(updated.flow, t_end=float(t_end if t_end is not None else updated.flow.t_end),
                           dt=float(dt if dt is not None else updated.flow.dt))
            values["flow.t_end"], values["flow.dt"] = flow.t_end, flow.dt
            if t_end is not None:
                overrides["flow.t_end"] = flow.t_end
            if dt is not None:
                overrides["flow.dt"] = flow.dt
            updated = replace(updated, flow=flow)
        if not overrides:
            return replace(updated, values=values)
        return replace(updated, values=values, overrides=overrides, source_text=self.source_text or self.text,
                       text=render_config(values))

    def with_langevin_time(self, t_end: float | None = None, dt: float | None = None) -> "ExperimentConfig":
        """Maps a time horizon and step onto langevin.epsilon and round(t_end / dt) steps."""
        if t_end is None and dt is None:
            return self
        current = self.langevin
        step = float(dt) if dt is not None else current.epsilon
        if not step > 0:
            raise ConfigurationError(f"Langevin dt must be positive, got {step}")
        horizon = float(t_end) if t_end is not None else current.epsilon * current.n_steps
        langevin = replace(current, epsilon=step, n_steps=max(1, int(round(horizon / step))))
        changed = {"langevin.epsilon": langevin.epsilon, "langevin.n_steps": langevin.n_steps}
        values = {**(self.values or {}), **changed}
        return replace(self, langevin=langevin, values=values, overrides={**(self.overrides or {}), **changed},
                       source_text=self.source_text or self.text, text=render_config(values))


def _flatten(data: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{path}."))
        else:
            flat[path] = value
    return flat


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (StepMode, KernelFamily, TargetFamily, InitFamily, Integrator, NoiseConvention)):
        return value.value
    if isinstance(value, tuple):
        return list(value)
    return value


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"Cannot render {value!r} as a config value")


def render_config(values: dict) -> str:
    """
    Writes a parsed flat mapping (``ExperimentConfig.values``) back as dotted-key TOML.
    parse_config of the result yields the same configuration.
    """
    lines = [f"{key} = {_toml_value(values[key])}" for key in sorted(values)]
    return "\n".join(lines) + "\n"


class _Reader:
    """Typed access to the flat key mapping; problems accumulate in ``errors``."""

    def __init__(self, flat: dict):
        self.flat = flat
        self.errors: list[str] = []
        self.values: dict = {}

    def error(self, key: str, message: str):
        self.errors.append(f"{key}: {message}")

    def _record(self, key: str, value):
        self.values[key] = _jsonable(value)
        return value

    def raw(self, key: str, default=None):
        return self.flat.get(key, default)

    def integer(self, key: str, default: int, minimum: int | None = None) -> int:
        value = self.flat.get(key, default)
        if isinstance(value, bool) or not isinstance(value, int):
            self.error(key, f"expected an integer, got {value!r}")
            return default
        if minimum is not None and value < minimum:
            self.error(key, f"must be >= {minimum}, got {value}")
            return default
        return self._record(key, value)

    def number(self, key: str, default: float, positive: bool = False, nonnegative: bool = False) -> float:
        value = self.flat.get(key, default)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.error(key, f"expected a number, got {value!r}")
            return default
        value = float(value)
        if not np.isfinite(value):
            self.error(key, f"must be finite, got {value}")
            return default
        if positive and value <= 0:
            self.error(key, f"must be positive, got {value}")
            return default
        if nonnegative and value < 0:
            self.error(key, f"must be nonnegative, got {value}")
            return default
        return self._record(key, value)

    def boolean(self, key: str, default: bool) -> bool:
        value = self.flat.get(key, default)
        if not isinstance(value, bool):
            self.error(key, f"expected true or false, got {value!r}")
            return default
        return self._record(key, value)

    def choice(self, key: str, default, enum_cls):
        value = self.flat.get(key, default.value)
        try:
            return self._record(key, enum_cls(value))
        except ValueError:
            allowed = ", ".join(m.value for m in enum_cls)
            self.error(key, f"must be one of {allowed}, got {value!r}")
            return default

    def vector(self, key: str, default, length: int | None = None) -> np.ndarray | None:
        value = self.flat.get(key, default)
        if value is None:
            return None
        arr = _numeric_array(value)
        if arr is None or arr.ndim > 1:
            self.error(key, f"expected a number or an array of numbers, got {value!r}")
            return None
        arr = np.atleast_1d(arr)
        if length is not None and arr.shape[0] != length:
            self.error(key, f"expected {length} entries, got {arr.shape[0]}")
            return None
        return self._record(key, arr)

    def matrix(self, key: str, default, d: int) -> np.ndarray | None:
        """Dense row-major d x d matrix, given flat (d*d numbers), nested, or as a scalar when d = 1."""
        value = self.flat.get(key, default)
        arr = _numeric_array(value)
        if arr is None:
            self.error(key, f"expected an array of numbers, got {value!r}")
            return None
        if arr.size != d * d:
            self.error(key, f"expected a {d}x{d} matrix ({d * d} numbers), got {arr.size}")
            return None
        return self._record(key, arr.reshape(d, d))


def _numeric_array(value) -> np.ndarray | None:
    if isinstance(value, bool):
        return None
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        return None
    if arr.dtype == object or not np.all(np.isfinite(arr)):
        return None
    return arr


def _gaussian(reader: _Reader, key: str, mean: np.ndarray, cov: np.ndarray) -> GaussianTarget | None:
    try:
        return GaussianTarget(mean, cov)
    except ConfigurationError as e:
        reader.error(key, str(e))
        return None


def _build_target(reader: _Reader) -> tuple[TargetFamily, TargetModel | None]:
    family = reader.choice("target.family", TargetFamily.GAUSSIAN, TargetFamily)
    if family == TargetFamily.GAUSSIAN:
        mean = reader.vector("target.mean", [0.0])
        if mean is None:
            return family, None
        d = mean.shape[0]
        cov = reader.matrix("target.cov", np.eye(d).ravel().tolist(), d)
        if cov is None:
            return family, None
        return family, _gaussian(reader, "target.cov", mean, cov)

    components_raw = reader.raw("target.components")
    if not isinstance(components_raw, list) or not components_raw:
        reader.error("target.components", "mixture targets need a nonempty array of {mean = [...], cov = [...]}")
        return family, None
    components = []
    for i, item in enumerate(components_raw):
        key = f"target.components[{i}]"
        if not isinstance(item, dict):
            reader.error(key, f"expected an inline table, got {item!r}")
            continue
        for extra in sorted(set(item) - COMPONENT_KEYS):
            reader.error(f"{key}.{extra}", "unknown key")
        sub = _Reader({k: v for k, v in item.items() if k in COMPONENT_KEYS})
        mean = sub.vector("mean", None)
        if mean is None:
            reader.error(f"{key}.mean", "missing or not an array of numbers")
            continue
        cov = sub.matrix("cov", np.eye(mean.shape[0]).ravel().tolist(), mean.shape[0])
        reader.errors.extend(f"{key}.{e}" for e in sub.errors if not e.startswith("mean"))
        if cov is None:
            continue
        component = _gaussian(reader, f"{key}.cov", mean, cov)
        if component is not None:
            components.append(component)
    reader.values["target.components"] = [
        {"mean": c.mean.tolist(), "cov": c.covariance.ravel().tolist()} for c in components]

    weights = reader.vector("target.weights", None)
    if weights is None:
        reader.error("target.weights", "mixture targets need one weight per component")
        return family, None
    if len(components) != len(components_raw):
        return family, None
    try:
        return family, MixtureTarget(weights, components)
    except ConfigurationError as e:
        reader.error("target.weights", str(e))
        return family, None


def _build_kernel(reader: _Reader) -> KernelSpec | None:
    family = reader.choice("kernel.family", KernelFamily.RBF, KernelFamily)
    raw = reader.raw("kernel.bandwidth", MEDIAN)
    bandwidth = None
    if raw == MEDIAN:
        reader.values["kernel.bandwidth"] = MEDIAN
    else:
        bandwidth = reader.number("kernel.bandwidth", None, positive=True)
        if bandwidth is None:
            return None
    offset = reader.number("kernel.imq_offset", 1.0, positive=True)
    exponent = reader.number("kernel.imq_exponent", -0.5)
    if not -1.0 < exponent < 0.0:
        reader.error("kernel.imq_exponent", f"must lie in (-1, 0), got {exponent}")
        return None
    try:
        return KernelSpec(family, bandwidth, exponent, offset)
    except ConfigurationError as e:
        reader.error("kernel", str(e))
        return None


def _build_init(reader: _Reader, d: int, n: int) -> InitSpec | None:
    family = reader.choice("init.family", InitFamily.GAUSSIAN, InitFamily)
    mean = reader.vector("init.mean", np.zeros(d).tolist(), length=d)
    cov = reader.matrix("init.cov", np.eye(d).ravel().tolist(), d)
    low = reader.vector("init.low", np.full(d, -1.0).tolist(), length=d)
    high = reader.vector("init.high", np.full(d, 1.0).tolist(), length=d)
    if any(v is None for v in (mean, cov, low, high)):
        return None
    if family == InitFamily.GAUSSIAN:
        if _gaussian(reader, "init.cov", mean, cov) is None:
            return None
    else:
        if np.any(high < low):
            reader.error("init.high", "must be >= init.low in every coordinate")
            return None
        per_axis = int(round(n ** (1.0 / d)))
        if per_axis ** d != n:
            reader.error("n_particles", f"{n} particles do not form a {d}-dimensional grid")
            return None
    return InitSpec(family, mean, cov, low, high)


def _build_verify(reader: _Reader) -> VerifyConfig | None:
    defaults = VerifyConfig()
    kwargs = {}
    for f in fields(VerifyConfig):
        key = f"verify.{f.name}"
        default = getattr(defaults, f.name)
        if key not in reader.flat:
            continue
        if isinstance(default, bool):
            kwargs[f.name] = reader.boolean(key, default)
        elif isinstance(default, int):
            kwargs[f.name] = reader.integer(key, default)
        elif isinstance(default, tuple):
            value = reader.vector(key, list(default))
            kwargs[f.name] = default if value is None else tuple(value.tolist())
        else:
            kwargs[f.name] = reader.number(key, default)
    try:
        return VerifyConfig(**kwargs)
    except ConfigurationError as e:
        reader.errors.extend(e.errors)
        return None


def parse_config(text: str) -> ExperimentConfig:
    """
    Parses and validates a config. Raises ConfigurationError whose ``errors`` lists every
    problem as ``key.path: message`` (syntax errors carry the line and column).
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigurationError(f"Config syntax error: {e}", [f"syntax: {e}"])

    flat = _flatten(data)
    reader = _Reader(flat)
    for key in sorted(flat):
        if key not in KNOWN_KEYS:
            reader.error(key, "unknown key")

    seed = reader.integer("seed", 0)
    n = reader.integer("n_particles", 100, minimum=1)
    target_family, target = _build_target(reader)
    kernel = _build_kernel(reader)
    d = target.dimension if target is not None else 1
    init = _build_init(reader, d, n)

    mode = reader.choice("schedule.mode", StepMode.CONSTANT, StepMode)
    base = reader.number("schedule.base", 0.05, positive=True)
    beta = reader.number("schedule.beta", 1.0, positive=True)
    safety = reader.number("schedule.safety", 0.9, positive=True)
    if safety > 1:
        reader.error("schedule.safety", f"must lie in (0, 1], got {safety}")
        safety = 0.9
    schedule = StepSchedule(mode, base, beta, safety, reader.boolean("schedule.conservative", False))
    max_iter = reader.integer("run.max_iter", 200, minimum=1)

    output = OutputSettings(
        record_every=reader.integer("output.record_every", 10, minimum=1),
        thinning=reader.integer("output.thinning", 0, minimum=0),
        track_density=reader.boolean("output.track_density", False),
        svg=reader.boolean("output.svg", False),
    )
    if output.track_density and init is not None and init.family == InitFamily.GRID:
        reader.error("output.track_density", "density tracking needs a Gaussian initialization")

    integrator = reader.choice("flow.integrator", Integrator.RK4, Integrator)
    dt = reader.number("flow.dt", 0.01, positive=True)
    t_end = reader.number("flow.t_end", 1.0, nonnegative=True)
    flow = None
    if t_end > 0 and dt > t_end:
        reader.error("flow.dt", f"must not exceed flow.t_end ({t_end}), got {dt}")
    else:
        flow = OdeConfig(integrator, dt, t_end, output.record_every)

    langevin = LangevinConfig(
        epsilon=reader.number("langevin.epsilon", 0.01, positive=True),
        n_steps=reader.integer("langevin.n_steps", 1000, minimum=1),
        noise_convention=reader.choice("langevin.noise_convention", NoiseConvention.SDE, NoiseConvention),
        record_every=output.record_every,
    )
    verify = _build_verify(reader)

    if reader.errors:
        raise ConfigurationError(
            f"{len(reader.errors)} configuration error(s):\n" + "\n".join(reader.errors), reader.errors)
    logger.debug("Parsed config with %d explicit key(s)", len(flat))
    return ExperimentConfig(seed, n, target_family, target, kernel, init, schedule, max_iter, flow, langevin,
                            output, verify, text, reader.values)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}")
    return parse_config(text)
