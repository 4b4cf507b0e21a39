"""
Sectioned key-value config files for DGPs and runs.

A DGP file looks like::

    [dgp]
    n_agents = 20000
    n_clusters = 26
    seed = 7

    [covariates]
    age = randint 26 80
    chronic = bernoulli 0.3

    [selection]
    intercept = 4.7
    avg_premium = -0.01
    suppl_ins = 0.5
    age = -0.02
    chronic = 0.3

    [untreated]
    intercept = 1.0
    age = 0.01
    chronic = 0.3

    [treated]
    intercept = 1.35
    age = 0.01
    chronic = 0.3

    [errors]
    var_omega0 = 0.2
    var_omega1 = 0.2
    cov_omega01 = -0.16
    cov_omega0_v = 0.4
    cov_omega1_v = -0.4

    [instruments]
    premium_mean = 400
    premium_cluster_sd = 100

Optional ``[estimation]`` and ``[mc]`` sections carry run settings (see
:class:`RunSettings`).  Covariates missing from a coefficient section get a
zero coefficient.  Every error message names the file and line.
"""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .synthgen import INSTRUMENT_NAMES, CovariateSpec, DgpConfig, InstrumentSpec

__all__ = [
    "ConfigError",
    "RunSettings",
    "load_dgp",
    "load_run_settings",
    "parse_dgp",
    "dump_dgp",
    "config_hash",
]

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")
_KNOWN_SECTIONS = {"dgp", "covariates", "selection", "untreated", "treated", "errors",
                   "instruments", "estimation", "mc"}


class ConfigError(ValueError):
    """Malformed config; the message carries file and line."""


@dataclass(frozen=True)
class RunSettings:
    """Estimation and Monte Carlo settings; ``None`` means "use the default"."""

    treatment: str | None = None
    estimator: str | None = None
    reps: int | None = None
    bandwidth: float | None = None
    degree: int | None = None
    stable_only: bool | None = None
    stratum: str | None = None
    replicates: int | None = None
    seed: int | None = None
    panel: str | None = None
    premiums: str | None = None


class _Source:
    def __init__(self, text, name):
        self.name = name
        self.lines: dict[tuple[str, str], int] = {}
        self.sections: dict[str, int] = {}
        section = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            m = _SECTION_RE.match(line)
            if m:
                section = m.group(1).strip()
                self.sections.setdefault(section, lineno)
                continue
            m = _KEY_RE.match(line)
            if m and section is not None and not line[:1].isspace():
                self.lines.setdefault((section, m.group(1).strip().lower()), lineno)
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"),
                                           interpolation=None)
        try:
            parser.read_string(text, source=name)
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(f"{name}:{exc.lineno}: key outside any [section]") from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"{name}:{exc.lineno}: duplicate section [{exc.section}]") from None
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"{name}:{exc.lineno}: duplicate key {exc.option!r} "
                              f"in [{exc.section}]") from None
        except configparser.ParsingError as exc:
            lineno = exc.errors[0][0] if exc.errors else "?"
            raise ConfigError(f"{name}:{lineno}: cannot parse line") from None
        self.parser = parser
        for section in parser.sections():
            if section not in _KNOWN_SECTIONS:
                raise ConfigError(f"{name}:{self.sections.get(section, '?')}: "
                                  f"unknown section [{section}]")

    def where(self, section, key=None) -> str:
        line = self.lines.get((section, key)) if key else None
        line = line or self.sections.get(section, "?")
        return f"{self.name}:{line}"

    def has(self, section) -> bool:
        return self.parser.has_section(section)

    def items(self, section) -> list[tuple[str, str]]:
        return list(self.parser.items(section)) if self.has(section) else []

    def require(self, section):
        if not self.has(section):
            raise ConfigError(f"{self.name}: missing section [{section}]")

    def get(self, section, key, convert, default=...):
        if not self.has(section) or not self.parser.has_option(section, key):
            if default is ...:
                raise ConfigError(f"{self.where(section)}: [{section}] is missing {key!r}")
            return default
        raw = self.parser.get(section, key)
        try:
            return convert(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{self.where(section, key)}: bad value for {key!r}: {raw!r} "
                              f"({exc})") from None

    def check_keys(self, section, allowed):
        for key, _ in self.items(section):
            if key not in allowed:
                raise ConfigError(f"{self.where(section, key)}: unknown key {key!r} in [{section}]")


def _int(raw) -> int:
    value = float(raw)
    if not value.is_integer():
        raise ValueError("expected an integer")
    return int(value)


def _bool(raw) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _covariate(name):
    def convert(raw):
        parts = raw.split()
        if not parts:
            raise ValueError("expected '<distribution> <parameters...>'")
        return CovariateSpec(name, parts[0], tuple(float(v) for v in parts[1:]))
    return convert


def parse_dgp(text: str, name: str = "<config>") -> DgpConfig:
    """Parse DGP config text into a validated :class:`DgpConfig`."""
    src = _Source(text, name)
    for section in ("dgp", "covariates", "selection", "untreated", "treated", "errors"):
        src.require(section)
    src.check_keys("dgp", {"n_agents", "n_clusters", "seed"})
    covariates = tuple(src.get("covariates", key, _covariate(key)) for key, _ in src.items("covariates"))
    names = [c.name for c in covariates]

    src.check_keys("selection", {"intercept", *INSTRUMENT_NAMES, *names})
    src.check_keys("untreated", {"intercept", *names})
    src.check_keys("treated", {"intercept", *names})
    psi = [src.get("selection", "intercept", float, 0.0)]
    psi += [src.get("selection", z, float, 0.0) for z in INSTRUMENT_NAMES]
    psi += [src.get("selection", c, float, 0.0) for c in names]
    alpha0 = src.get("untreated", "intercept", float, 0.0)
    alpha1 = src.get("treated", "intercept", float, 0.0)
    beta0 = [src.get("untreated", c, float, 0.0) for c in names]
    beta1 = [src.get("treated", c, float, 0.0) for c in names]

    err_keys = ("var_omega0", "var_omega1", "cov_omega01", "cov_omega0_v", "cov_omega1_v")
    src.check_keys("errors", set(err_keys))
    v0, v1, c01, c0v, c1v = (src.get("errors", k, float) for k in err_keys)
    sigma = ((v0, c01, c0v), (c01, v1, c1v), (c0v, c1v, 1.0))

    ins_keys = {f.name for f in fields(InstrumentSpec)}
    src.check_keys("instruments", ins_keys)
    try:
        instruments = InstrumentSpec(**{k: float(src.get("instruments", k, float))
                                        for k, _ in src.items("instruments")})
    except ValueError as exc:
        raise ConfigError(f"{src.where('instruments')}: {exc}") from None

    try:
        return DgpConfig(
            n_agents=src.get("dgp", "n_agents", _int),
            covariates=covariates,
            psi=psi,
            alpha0=alpha0,
            alpha1=alpha1,
            beta0=beta0,
            beta1=beta1,
            sigma=sigma,
            instruments=instruments,
            n_clusters=src.get("dgp", "n_clusters", _int, 26),
            seed=src.get("dgp", "seed", _int, 0),
        )
    except ValueError as exc:
        section = "errors" if "covariance" in str(exc) or "sigma" in str(exc) else "dgp"
        key = {"n_agents": "n_agents", "n_clusters": "n_clusters", "seed": "seed"}
        hit = next((k for k in key if k in str(exc)), None)
        raise ConfigError(f"{src.where(section, hit)}: {exc}") from None


def _parse_run(src: _Source) -> RunSettings:
    src.check_keys("estimation", {"treatment", "estimator", "reps", "bandwidth", "degree",
                                  "stable_only", "stratum", "seed", "panel", "premiums"})
    src.check_keys("mc", {"replicates", "reps", "estimator", "bandwidth", "degree", "seed"})
    get = src.get
    out = {}
    for section in ("estimation", "mc"):
        for key, conv in (("treatment", str), ("estimator", str), ("reps", _int),
                          ("bandwidth", float), ("degree", _int), ("stable_only", _bool),
                          ("stratum", str), ("replicates", _int), ("seed", _int),
                          ("panel", str), ("premiums", str)):
            value = get(section, key, conv, None)
            if value is not None:
                out[key] = value
    settings = RunSettings(**out)
    if settings.treatment not in (None, "lowest", "highest"):
        raise ConfigError(f"{src.where('estimation', 'treatment')}: treatment must be lowest or highest")
    if settings.estimator not in (None, "normal", "semipar"):
        raise ConfigError(f"{src.where('estimation', 'estimator')}: estimator must be normal or semipar")
    if settings.bandwidth is not None and settings.bandwidth <= 0:
        raise ConfigError(f"{src.where('estimation', 'bandwidth')}: bandwidth must be positive")
    if settings.reps is not None and settings.reps < 0:
        raise ConfigError(f"{src.where('estimation', 'reps')}: reps must be non-negative")
    return settings


def _read(path) -> tuple[str, str]:
    path = Path(path)
    try:
        return path.read_text(encoding="utf-8"), str(path)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None


def load_dgp(path) -> DgpConfig:
    return parse_dgp(*_read(path))


def load_run_settings(path) -> RunSettings:
    """Run settings from a config file; DGP sections, if present, are ignored."""
    return _parse_run(_Source(*_read(path)))


def dump_dgp(config: DgpConfig) -> str:
    """Render ``config`` in the format read by :func:`parse_dgp`."""
    names = config.covariate_names
    out = ["[dgp]", f"n_agents = {config.n_agents}", f"n_clusters = {config.n_clusters}",
           f"seed = {config.seed}", "", "[covariates]"]
    out += [f"{c.name} = {c.dist} " + " ".join(repr(float(p)) for p in c.params)
            for c in config.covariates]
    out += ["", "[selection]", f"intercept = {config.psi[0]!r}"]
    out += [f"{z} = {v!r}" for z, v in zip(INSTRUMENT_NAMES, config.psi[1:])]
    out += [f"{c} = {v!r}" for c, v in zip(names, config.psi[1 + len(INSTRUMENT_NAMES):])]
    for section, alpha, beta in (("untreated", config.alpha0, config.beta0),
                                 ("treated", config.alpha1, config.beta1)):
        out += ["", f"[{section}]", f"intercept = {alpha!r}"]
        out += [f"{c} = {v!r}" for c, v in zip(names, beta)]
    s = config.sigma
    out += ["", "[errors]", f"var_omega0 = {s[0][0]!r}", f"var_omega1 = {s[1][1]!r}",
            f"cov_omega01 = {s[0][1]!r}", f"cov_omega0_v = {s[0][2]!r}",
            f"cov_omega1_v = {s[1][2]!r}", "", "[instruments]"]
    out += [f"{f.name} = {float(getattr(config.instruments, f.name))!r}"
            for f in fields(InstrumentSpec)]
    return "\n".join(out) + "\n"


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
