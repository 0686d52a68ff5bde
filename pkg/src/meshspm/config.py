"""Run configuration: defaults, INI file, environment and flag overrides.

Every option has the same name in all layers. In the INI file it is a key
of the ``[meshspm]`` section, in the environment it is ``MESHSPM_`` plus the
upper-cased name (``MESHSPM_TFCE_E``), and on the command line it is the
dashed flag (``--tfce-e``). Later layers win: defaults, then a manifest
given with ``--from-manifest``, then ``--config``, then the environment,
then flags. List options are comma separated outside the command line.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .errors import ValidationError
from .inference import CORRECTIONS

__all__ = ["RunConfig", "load_config", "ENV_PREFIX", "SECTION"]

ENV_PREFIX = "MESHSPM_"
SECTION = "meshspm"

# not part of the config snapshot: they cannot change results
EXECUTION_ONLY = ("out", "workers", "record_timings", "config",
                  "from_manifest", "quiet")


def _default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass
class RunConfig:
    """All options of every command; unused ones are ignored."""

    mesh: str | None = None
    faces: str | None = None
    design: str | None = None
    phenotype: str | None = None
    out: str | None = None
    interest: list = field(default_factory=list)
    nuisance: list | None = None
    intercept: bool = True
    id_column: str = "subject_id"
    standardize: bool = True
    estimator: str = "ols"
    mode: str = "tfce"
    tfce_e: float = 0.5
    tfce_h: float = 2.0
    tfce_steps: int = 100
    min_cluster: int = 3
    permutations: int | None = None
    seed: int = 0
    correction: str = "bh"
    q: float = 0.05
    pooled: bool = True
    cluster_extent_thr: list = field(default_factory=list)
    response: str | None = None
    figures: bool = True
    # sweep grid
    sample_sizes: list = field(default_factory=lambda: [40, 80])
    intensities: list = field(default_factory=lambda: [0.2, 0.4])
    signals: list = field(default_factory=lambda: ["B"])
    variants: list = field(default_factory=lambda: ["mur", "tfce"])
    e_values: list = field(default_factory=lambda: [0.5])
    h_values: list = field(default_factory=lambda: [2.0])
    replicates: int = 1
    cohort_size: int = 400
    smoothing: int = 0
    mesh_rings: int = 10
    mesh_sectors: int = 20
    # execution
    workers: int = field(default_factory=_default_workers)
    record_timings: bool = False
    quiet: bool = False
    config: str | None = None
    from_manifest: str | None = None

    @property
    def glm_estimator(self):
        return {"ols": "classical", "hc4m": "hc4m"}[self.estimator]

    def num_permutations(self, command):
        if self.permutations is not None:
            return int(self.permutations)
        return 500 if command == "sweep" else 1000

    def snapshot(self):
        """Options that determine the results, as JSON-ready values."""
        return {k: v for k, v in dataclasses.asdict(self).items()
                if k not in EXECUTION_ONLY}

    def validate(self, command):
        if not 0 < self.q < 1:
            raise ValidationError("q must lie in (0, 1)")
        if self.permutations is not None and self.permutations < 1:
            raise ValidationError("permutations must be >= 1")
        if self.estimator not in ("ols", "hc4m"):
            raise ValidationError(f"unknown estimator {self.estimator!r}")
        if self.correction not in CORRECTIONS:
            raise ValidationError(f"unknown correction {self.correction!r}")
        if self.mode not in ("tfce", "mur"):
            raise ValidationError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if any(h <= 0 for h in self.cluster_extent_thr):
            raise ValidationError("cluster-extent thresholds must be > 0")
        need = {"fit": ("design", "phenotype"),
                "infer": ("mesh", "design", "phenotype"),
                "global": ("design",),
                "diagnose": ("design",),
                "sweep": ()}[command]
        for name in need + ("out",):
            if not getattr(self, name):
                raise ValidationError(f"--{name} is required for {command}")
        if command in ("fit", "infer", "global") and not self.interest:
            raise ValidationError(f"--interest is required for {command}")
        if command == "global" and not self.response:
            raise ValidationError("--response is required for global")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_LIST_TYPES = {"interest": str, "nuisance": str, "cluster_extent_thr": float,
               "sample_sizes": int, "intensities": float, "signals": str,
               "variants": str, "e_values": float, "h_values": float}
_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _scalar_type(name):
    f = _FIELDS[name]
    t = f.type if isinstance(f.type, str) else f.type.__name__
    for candidate, conv in (("bool", bool), ("int", int), ("float", float)):
        if t.startswith(candidate):
            return conv
    return str


def coerce(name, value, origin):
    """Convert a string (or already typed) value for option ``name``."""
    if name not in _FIELDS:
        raise ValidationError(f"unknown option {name!r} in {origin}")
    if value is None:
        return None
    if name in _LIST_TYPES:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        try:
            return [_LIST_TYPES[name](v) for v in value]
        except (TypeError, ValueError):
            raise ValidationError(
                f"bad value for {name} in {origin}: {value!r}") from None
    conv = _scalar_type(name)
    try:
        if conv is bool:
            if isinstance(value, bool):
                return value
            return _BOOL[str(value).strip().lower()]
        return conv(value)
    except (KeyError, TypeError, ValueError):
        raise ValidationError(
            f"bad value for {name} in {origin}: {value!r}") from None


def _from_file(path):
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        from .errors import InputOutputError
        raise InputOutputError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from exc
    if not parser.has_section(SECTION):
        raise ValidationError(f"{path}: missing [{SECTION}] section")
    out = {}
    for key, value in parser.items(SECTION):
        name = key.replace("-", "_")
        out[name] = coerce(name, value, path)
    return out


def _from_env(environ):
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in _FIELDS:
                out[name] = coerce(name, value, key)
    return out


def load_config(flags, environ=None, manifest_config=None):
    """Merge all layers.

    Parameters
    ----------
    flags : dict
        Options given on the command line; ``None`` values are ignored.
    environ : mapping, optional
        Defaults to ``os.environ``.
    manifest_config : dict, optional
        Config snapshot of an earlier run.
    """
    environ = os.environ if environ is None else environ
    merged = {}
    if manifest_config:
        for k, v in manifest_config.items():
            merged[k] = coerce(k, v, "manifest")
    flags = {k: v for k, v in flags.items() if v is not None}
    cfg_path = flags.get("config") or environ.get(ENV_PREFIX + "CONFIG")
    if cfg_path:
        merged.update(_from_file(cfg_path))
    merged.update(_from_env(environ))
    for k, v in flags.items():
        merged[k] = coerce(k, v, "command line")
    return RunConfig(**merged)
