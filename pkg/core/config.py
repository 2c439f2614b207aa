"""Estimator configuration stored as INI files.

Layout (every section except the cameras is optional and falls back to the
documented defaults):

    [estimator]       mode, window_size
    [camera0] ...     fx, fy, cx, cy, width, height,
                      extrinsic_pos = "x y z", extrinsic_quat = "qx qy qz qw"
    [imu]             sigma_g, sigma_a, sigma_bg, sigma_ba, gravity_norm
    [tracker]         sigma_px, keyframe_parallax_px, outlier_px, min_tracked
    [solver]          max_iters, lambda0, cost_tol, delta_tol, huber_px
    [initialization]  static_window_s, velocity_sigma, attitude_sigma,
                      accel_bias_sigma, gyro_bias_sigma

The default location follows the XDG Base Directory Specification:
$XDG_CONFIG_HOME/msodom/estimator.ini.
"""

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from core.camera import Camera, CameraRig, PinholeIntrinsics
from core.errors import ConfigError
from core.imu import ImuNoise
from core.logging import APP_NAME, get_logger
from core.manifold import Pose, Rotation
from core.solver import SolverOptions

logger = get_logger(__name__)

CONFIG_FILENAME = "estimator.ini"
_CAMERA_SECTION = re.compile(r"^camera(\d+)$")


class SensorMode(Enum):
    STEREO = "stereo"
    MONO_IMU = "mono-imu"
    STEREO_IMU = "stereo-imu"

    @property
    def uses_imu(self) -> bool:
        return self is not SensorMode.STEREO

    @property
    def camera_count(self) -> int:
        return 1 if self is SensorMode.MONO_IMU else 2


@dataclass(frozen=True)
class TrackerOptions:
    sigma_px: float = 1.0
    keyframe_parallax_px: float = 10.0
    outlier_px: float = 3.0
    min_tracked: int = 8


@dataclass(frozen=True)
class InitOptions:
    static_window_s: float = 0.5
    velocity_sigma: float = 0.01
    attitude_sigma: float = 0.01
    accel_bias_sigma: float = 0.1
    gyro_bias_sigma: float = 0.01


@dataclass(frozen=True, eq=False)
class EstimatorConfig:
    mode: SensorMode
    rig: CameraRig
    window_size: int = 10
    imu_noise: Optional[ImuNoise] = None
    gravity_norm: float = 9.81
    tracker: TrackerOptions = field(default_factory=TrackerOptions)
    solver: SolverOptions = field(default_factory=SolverOptions)
    init: InitOptions = field(default_factory=InitOptions)

    def __post_init__(self) -> None:
        validate(self)

    def with_mode(self, mode: Union[str, SensorMode]) -> "EstimatorConfig":
        return dataclasses.replace(self, mode=parse_mode(mode))


def parse_mode(value: Union[str, SensorMode]) -> SensorMode:
    if isinstance(value, SensorMode):
        return value
    try:
        return SensorMode(str(value).strip().lower())
    except ValueError:
        choices = ", ".join(m.value for m in SensorMode)
        raise ConfigError("estimator.mode", f"unknown mode {value!r} (expected {choices})") from None


def validate(cfg: EstimatorConfig) -> None:
    if cfg.window_size < 4:
        raise ConfigError("estimator.window_size", f"must be >= 4, got {cfg.window_size}")
    if len(cfg.rig) < cfg.mode.camera_count:
        raise ConfigError(
            f"camera{len(cfg.rig)}",
            f"mode {cfg.mode.value} needs {cfg.mode.camera_count} cameras, {len(cfg.rig)} configured",
        )
    if cfg.mode.uses_imu:
        if cfg.imu_noise is None:
            raise ConfigError("imu", f"mode {cfg.mode.value} requires an [imu] section")
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba"):
            if not getattr(cfg.imu_noise, name) > 0:
                raise ConfigError(f"imu.{name}", "must be strictly positive")
    if not cfg.gravity_norm > 0:
        raise ConfigError("imu.gravity_norm", "must be positive")
    if not cfg.tracker.sigma_px > 0:
        raise ConfigError("tracker.sigma_px", "must be positive")
    if cfg.solver.max_iters < 1:
        raise ConfigError("solver.max_iters", "must be >= 1")
    if cfg.solver.lambda0 < 0:
        raise ConfigError("solver.lambda0", "must be >= 0")


_KNOWN_KEYS: Dict[str, set] = {
    "estimator": {"mode", "window_size"},
    "camera": {"fx", "fy", "cx", "cy", "width", "height", "extrinsic_pos", "extrinsic_quat"},
    "imu": {"sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "gravity_norm"},
    "tracker": {f.name for f in dataclasses.fields(TrackerOptions)},
    "solver": {"max_iters", "lambda0", "cost_tol", "delta_tol", "huber_px"},
    "initialization": {f.name for f in dataclasses.fields(InitOptions)},
}


class ConfigReader:
    """Typed access to a parsed INI file; every failure names its key."""

    def __init__(self, parser: configparser.ConfigParser) -> None:
        self.config = parser

    def has(self, section: str, key: Optional[str] = None) -> bool:
        if key is None:
            return self.config.has_section(section)
        return self.config.has_option(section, key)

    def get(self, section: str, key: str, fallback: Optional[str] = None) -> Optional[str]:
        return self.config.get(section, key, fallback=fallback)

    def require(self, section: str, key: str) -> str:
        value = self.get(section, key)
        if value is None or not value.strip():
            raise ConfigError(f"{section}.{key}", "missing required key")
        return value

    def get_float(self, section: str, key: str, fallback: Optional[float] = None) -> float:
        if fallback is None:
            raw = self.require(section, key)
        else:
            raw = self.get(section, key)
            if raw is None:
                return fallback
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"not a number: {raw!r}") from None

    def get_int(self, section: str, key: str, fallback: Optional[int] = None) -> int:
        if fallback is None:
            raw = self.require(section, key)
        else:
            raw = self.get(section, key)
            if raw is None:
                return fallback
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"not an integer: {raw!r}") from None

    def get_vector(
        self, section: str, key: str, size: int, fallback: Optional[List[float]] = None
    ) -> np.ndarray:
        raw = self.get(section, key)
        if raw is None:
            if fallback is None:
                raise ConfigError(f"{section}.{key}", "missing required key")
            return np.asarray(fallback, dtype=float)
        parts = raw.replace(",", " ").split()
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ConfigError(f"{section}.{key}", f"not a list of numbers: {raw!r}") from None
        if len(values) != size:
            raise ConfigError(f"{section}.{key}", f"expected {size} numbers, got {len(values)}")
        return np.asarray(values)

    def warn_unknown(self) -> None:
        for section in self.config.sections():
            kind = "camera" if _CAMERA_SECTION.match(section) else section
            known = _KNOWN_KEYS.get(kind)
            if known is None:
                logger.warning("Ignoring unknown config section [%s]", section)
                continue
            for key in self.config.options(section):
                if key not in known:
                    logger.warning("Ignoring unknown config key %s.%s", section, key)


def _read_camera(reader: ConfigReader, section: str) -> Camera:
    try:
        intrinsics = PinholeIntrinsics(
            fx=reader.get_float(section, "fx"),
            fy=reader.get_float(section, "fy"),
            cx=reader.get_float(section, "cx"),
            cy=reader.get_float(section, "cy"),
            width=reader.get_int(section, "width"),
            height=reader.get_int(section, "height"),
        )
    except ValueError as e:
        raise ConfigError(section, str(e)) from None
    pos = reader.get_vector(section, "extrinsic_pos", 3, [0.0, 0.0, 0.0])
    quat = reader.get_vector(section, "extrinsic_quat", 4, [0.0, 0.0, 0.0, 1.0])
    try:
        rotation = Rotation.from_xyzw(quat)
    except ValueError as e:
        raise ConfigError(f"{section}.extrinsic_quat", str(e)) from None
    return Camera(intrinsics, Pose(rotation, pos))


def _read_rig(reader: ConfigReader) -> CameraRig:
    ids = sorted(
        int(m.group(1))
        for m in (_CAMERA_SECTION.match(s) for s in reader.config.sections())
        if m
    )
    if not ids:
        raise ConfigError("camera0", "no [camera0] section")
    if ids != list(range(len(ids))):
        raise ConfigError(f"camera{len(ids)}", f"camera sections must be dense from 0, got {ids}")
    return CameraRig(tuple(_read_camera(reader, f"camera{i}") for i in ids))


def config_from_parser(parser: configparser.ConfigParser) -> EstimatorConfig:
    reader = ConfigReader(parser)
    reader.warn_unknown()

    if reader.has("estimator", "mode"):
        mode = parse_mode(reader.get("estimator", "mode"))
    else:
        mode = SensorMode.STEREO
        logger.warning("estimator.mode not set, defaulting to %s", mode.value)
    window_size = reader.get_int("estimator", "window_size", 10)
    rig = _read_rig(reader)

    noise = None
    gravity_norm = 9.81
    if reader.has("imu"):
        try:
            noise = ImuNoise(
                sigma_g=reader.get_float("imu", "sigma_g"),
                sigma_a=reader.get_float("imu", "sigma_a"),
                sigma_bg=reader.get_float("imu", "sigma_bg"),
                sigma_ba=reader.get_float("imu", "sigma_ba"),
            )
        except ValueError as e:
            raise ConfigError("imu", str(e)) from None
        gravity_norm = reader.get_float("imu", "gravity_norm", 9.81)

    tracker_defaults = TrackerOptions()
    tracker = TrackerOptions(
        sigma_px=reader.get_float("tracker", "sigma_px", tracker_defaults.sigma_px),
        keyframe_parallax_px=reader.get_float(
            "tracker", "keyframe_parallax_px", tracker_defaults.keyframe_parallax_px
        ),
        outlier_px=reader.get_float("tracker", "outlier_px", tracker_defaults.outlier_px),
        min_tracked=reader.get_int("tracker", "min_tracked", tracker_defaults.min_tracked),
    )

    solver_defaults = SolverOptions()
    solver = SolverOptions(
        max_iters=reader.get_int("solver", "max_iters", solver_defaults.max_iters),
        lambda0=reader.get_float("solver", "lambda0", solver_defaults.lambda0),
        cost_tol=reader.get_float("solver", "cost_tol", solver_defaults.cost_tol),
        delta_tol=reader.get_float("solver", "delta_tol", solver_defaults.delta_tol),
        huber_px=reader.get_float("solver", "huber_px", solver_defaults.huber_px),
    )

    init_defaults = InitOptions()
    init = InitOptions(
        **{
            f.name: reader.get_float("initialization", f.name, getattr(init_defaults, f.name))
            for f in dataclasses.fields(InitOptions)
        }
    )

    return EstimatorConfig(
        mode=mode,
        rig=rig,
        window_size=window_size,
        imu_noise=noise,
        gravity_norm=gravity_norm,
        tracker=tracker,
        solver=solver,
        init=init,
    )


def loads_config(text: str) -> EstimatorConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError("file", str(e)) from None
    return config_from_parser(parser)


def load_config(path: Union[str, Path]) -> EstimatorConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file", f"config file not found: {path}")
    logger.debug("Loading config from %s", path)
    return loads_config(path.read_text())


def _fmt(value: float) -> str:
    return repr(float(value))


def _fmt_vec(values) -> str:
    return " ".join(_fmt(v) for v in values)


def to_parser(cfg: EstimatorConfig) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser["estimator"] = {"mode": cfg.mode.value, "window_size": str(cfg.window_size)}
    for i, cam in enumerate(cfg.rig.cameras):
        k = cam.intrinsics
        parser[f"camera{i}"] = {
            "fx": _fmt(k.fx),
            "fy": _fmt(k.fy),
            "cx": _fmt(k.cx),
            "cy": _fmt(k.cy),
            "width": str(k.width),
            "height": str(k.height),
            "extrinsic_pos": _fmt_vec(cam.T_bc.p),
            "extrinsic_quat": _fmt_vec(cam.T_bc.R.as_xyzw()),
        }
    if cfg.imu_noise is not None:
        parser["imu"] = {
            "sigma_g": _fmt(cfg.imu_noise.sigma_g),
            "sigma_a": _fmt(cfg.imu_noise.sigma_a),
            "sigma_bg": _fmt(cfg.imu_noise.sigma_bg),
            "sigma_ba": _fmt(cfg.imu_noise.sigma_ba),
            "gravity_norm": _fmt(cfg.gravity_norm),
        }
    parser["tracker"] = {
        "sigma_px": _fmt(cfg.tracker.sigma_px),
        "keyframe_parallax_px": _fmt(cfg.tracker.keyframe_parallax_px),
        "outlier_px": _fmt(cfg.tracker.outlier_px),
        "min_tracked": str(cfg.tracker.min_tracked),
    }
    parser["solver"] = {
        "max_iters": str(cfg.solver.max_iters),
        "lambda0": _fmt(cfg.solver.lambda0),
        "cost_tol": _fmt(cfg.solver.cost_tol),
        "delta_tol": _fmt(cfg.solver.delta_tol),
        "huber_px": _fmt(cfg.solver.huber_px),
    }
    parser["initialization"] = {
        f.name: _fmt(getattr(cfg.init, f.name)) for f in dataclasses.fields(InitOptions)
    }
    return parser


def dump_config(cfg: EstimatorConfig) -> str:
    """Effective configuration as INI text, every default filled in."""
    lines: List[str] = []
    parser = to_parser(cfg)
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: EstimatorConfig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))


def default_config_path() -> Path:
    config_home = Path(os.getenv("XDG_CONFIG_HOME", Path.home() / ".config"))
    return config_home / APP_NAME / CONFIG_FILENAME
