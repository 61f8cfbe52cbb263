"""Run configuration: nested dataclasses with an INI-style text round trip."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .objectives import LossWeights
from .optimize import OptimConfig
from .render import RenderConfig


@dataclass
class MapConfig:
    voxel_size: float = 0.2
    feature_dim: int = 16
    hidden: int = 128
    n_levels: int = 8
    alloc_threshold: int = 5
    feature_init: float = 1e-2
    use_prior: bool = True


@dataclass
class WindowConfig:
    size: int = 4
    mode: str = "standard"
    keyframe_interval: int = 50
    n_rep: int = 1024
    use_warp: bool = True


@dataclass
class SlamConfig:
    map: MapConfig = field(default_factory=MapConfig)
    render: RenderConfig = field(default_factory=lambda: RenderConfig(dtype="float32"))
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    window: WindowConfig = field(default_factory=WindowConfig)

    SECTIONS = ("map", "render", "optim", "loss", "window")

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: str(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SlamConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        for sec in cp.sections():
            if sec not in cls.SECTIONS:
                raise ValueError(f"unknown config section [{sec}]")
            for key, raw in cp[sec].items():
                cfg.set(sec, key, raw)
        return cfg.validated()

    @classmethod
    def load(cls, path) -> "SlamConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def set(self, section: str, key: str, raw):
        obj = getattr(self, section)
        kinds = {f.name: f.type for f in fields(obj)}
        if key not in kinds:
            raise ValueError(f"unknown key {section}.{key}")
        setattr(obj, key, _coerce(raw, type(getattr(obj, key))))

    def validated(self) -> "SlamConfig":
        # re-run dataclass checks after field edits
        self.optim.__post_init__()
        self.loss.__post_init__()
        if self.window.mode not in ("standard", "loop_rand", "random"):
            raise ValueError(f"unknown window mode {self.window.mode!r}")
        if self.window.size % 2:
            raise ValueError("window size must be even")
        return self


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())
