"""Run configuration: INI files with fixed sections and typed keys.

Every key has a default, so a file only needs the values that differ.  Unknown
sections or keys are errors.  :meth:`RunConfig.to_ini` writes the fully
resolved configuration, which doubles as the reproducibility manifest: feeding
a manifest back through :func:`parse_config` reproduces the run exactly.
"""
from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .grid import PhaseGrid
from .model import ModelParams, PotentialSpec
from .sde import InitialCondition


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _opt_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "potential": {"family": (str, "quadratic"), "beta": (float, 1.0), "table": (str, "")},
    "model": {"A": (_floats, (3.0,)), "kappa": (float, 0.0)},
    "grid": {"nx": (int, 64), "ny": (int, 64), "na": (int, 32), "box": (float, 6.0)},
    "initial": {"kind": (str, "gaussian"), "mean": (_floats, (1.0, 0.0)), "std": (float, 0.6),
                "x0": (_floats, (0.0, 0.0)), "alpha0": (float, 0.0),
                "half_width": (float, 1.0)},
    "run": {"T_final": (float, 12.0), "dt": (_opt_float, None), "N": (int, 100_000),
            "seed": (int, 0), "sample_interval": (float, 0.25), "scheme": (str, "upwind"),
            "hist_nx": (int, 16), "hist_ny": (int, 16), "hist_na": (int, 8),
            "hist_box": (float, 5.0), "dump_ensemble": (_bool, False),
            "snapshot": (_bool, False)},
    "theory": {"eta": (float, 1.0), "trials": (int, 100), "eps": (_opt_float, None),
               "Lambda": (_opt_float, None), "C_V": (_opt_float, None),
               "D_values": (_floats, (1e-4, 1e-3, 1e-2, 0.1, 0.5, 1.0, 2.0, 4.5, 10.0,
                                      100.0, 1e3, 1e4))},
    "sweep": {"A_values": (_floats, (0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)),
              "backend": (str, "fp"), "nx": (int, 48), "ny": (int, 48), "na": (int, 16),
              "T_final": (_opt_float, None)},
    "output": {"dir": (str, "out")},
    "meta": {"command": (str, ""), "version": (str, "")},
}

# commands whose results rest on the resting-belt theory
THEORY_COMMANDS = ("diagnose", "sweep", "solve-fp")


@dataclass
class RunConfig:
    values: dict        # section -> key -> parsed value, fully resolved
    source: Optional[str] = None

    def get(self, section, key):
        return self.values[section][key]

    # typed views ---------------------------------------------------------
    @property
    def spec(self) -> PotentialSpec:
        p = self.values["potential"]
        if p["family"] == "quadratic":
            return PotentialSpec.quadratic()
        if p["family"] == "power":
            return PotentialSpec.power(p["beta"])
        return PotentialSpec.from_table_file(p["table"])

    @property
    def A_values(self):
        return self.values["model"]["A"]

    def params(self, A: Optional[float] = None) -> ModelParams:
        if A is None:
            if len(self.A_values) != 1:
                raise ConfigError("model.A: this command needs a single value")
            A = self.A_values[0]
        return ModelParams(A, self.values["model"]["kappa"])

    @property
    def grid(self) -> PhaseGrid:
        g = self.values["grid"]
        return PhaseGrid(g["nx"], g["ny"], g["na"], g["box"])

    @property
    def hist_grid(self) -> PhaseGrid:
        r = self.values["run"]
        return PhaseGrid(r["hist_nx"], r["hist_ny"], r["hist_na"], r["hist_box"])

    @property
    def sweep_grid(self) -> PhaseGrid:
        s = self.values["sweep"]
        return PhaseGrid(s["nx"], s["ny"], s["na"], self.values["grid"]["box"])

    @property
    def init(self) -> InitialCondition:
        i = self.values["initial"]
        return InitialCondition(i["kind"], i["x0"], i["alpha0"], i["half_width"],
                                i["mean"], i["std"])

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.values["output"]["dir"])

    def to_ini(self, command: str = "", version: str = "") -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, keys in SCHEMA.items():
            cp.add_section(section)
            for key in keys:
                cp.set(section, key, _fmt(self.values[section][key]))
        cp.set("meta", "command", command or self.values["meta"]["command"])
        cp.set("meta", "version", version or self.values["meta"]["version"])
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _check(values, command):
    def fail(field_, reason):
        raise ConfigError(f"{field_}: {reason}")

    p = values["potential"]
    if p["family"] not in ("quadratic", "power", "tabulated"):
        fail("potential.family", f"unknown family {p['family']!r} "
             "(expected quadratic, power or tabulated)")
    if p["family"] == "power" and p["beta"] < 0.5:
        fail("potential.beta", f"must be >= 0.5, got {p['beta']}")
    if p["family"] == "tabulated" and not p["table"]:
        fail("potential.table", "a tabulated potential needs a table file")
    if p["family"] == "tabulated" and not Path(p["table"]).is_file():
        fail("potential.table", f"file not found: {p['table']}")

    m = values["model"]
    if not m["A"]:
        fail("model.A", "no value given")
    for A in m["A"]:
        if not (A >= 0 and math.isfinite(A)):
            fail("model.A", f"noise amplitude must be >= 0, got {A}")
    if not 0.0 <= m["kappa"] <= 1.0:
        fail("model.kappa", f"must lie in [0, 1] (belt not faster than lay-down), got {m['kappa']}")
    if m["kappa"] != 0.0 and command in THEORY_COMMANDS:
        fail("model.kappa", f"command {command!r} relies on the decay theorem, which "
             "assumes a resting belt (kappa = 0); got kappa = " + repr(m["kappa"]))

    g = values["grid"]
    if g["na"] < 4 or g["na"] % 2:
        fail("grid.na", f"must be even and >= 4, got {g['na']}")
    for k in ("nx", "ny"):
        if g[k] < 4:
            fail(f"grid.{k}", f"must be >= 4, got {g[k]}")
    if not g["box"] > 0:
        fail("grid.box", f"must be positive, got {g['box']}")

    r = values["run"]
    if not r["T_final"] >= 0:
        fail("run.T_final", f"must be >= 0, got {r['T_final']}")
    if r["dt"] is not None and not r["dt"] > 0:
        fail("run.dt", f"must be positive, got {r['dt']}")
    if r["N"] < 1:
        fail("run.N", f"must be >= 1, got {r['N']}")
    if not 0 <= r["seed"] < 2 ** 64:
        fail("run.seed", "must be an unsigned 64-bit integer")
    if not r["sample_interval"] > 0:
        fail("run.sample_interval", "must be positive")
    if r["scheme"] not in ("upwind", "central"):
        fail("run.scheme", f"expected upwind or central, got {r['scheme']!r}")
    if r["scheme"] == "central" and r["dt"] is None:
        fail("run.dt", "the central scheme needs an explicit time step")
    if r["hist_na"] < 4 or r["hist_na"] % 2:
        fail("run.hist_na", "must be even and >= 4")

    i = values["initial"]
    if i["kind"] not in ("point", "uniform", "gaussian"):
        fail("initial.kind", f"expected point, uniform or gaussian, got {i['kind']!r}")
    for k in ("mean", "x0"):
        if len(i[k]) != 2:
            fail(f"initial.{k}", "needs two components")
    if not i["std"] > 0:
        fail("initial.std", "must be positive")
    if not i["half_width"] > 0:
        fail("initial.half_width", "must be positive")

    t = values["theory"]
    if not t["eta"] > 0:
        fail("theory.eta", "must be positive")
    if t["trials"] < 1:
        fail("theory.trials", "must be >= 1")
    if t["eps"] is not None and not 0 <= t["eps"] < 1:
        fail("theory.eps", "must lie in [0, 1)")
    for k in ("Lambda", "C_V"):
        if t[k] is not None and not t[k] > 0:
            fail(f"theory.{k}", "must be positive")
    if not t["D_values"] or min(t["D_values"]) <= 0:
        fail("theory.D_values", "needs positive values")

    s = values["sweep"]
    if s["backend"] not in ("fp", "sde"):
        fail("sweep.backend", f"expected fp or sde, got {s['backend']!r}")
    if not s["A_values"] or min(s["A_values"]) <= 0:
        fail("sweep.A_values", "needs positive amplitudes")
    if s["T_final"] is not None and not s["T_final"] > 0:
        fail("sweep.T_final", "must be positive")


def parse_config(path=None, command: str = "", overrides: Optional[dict] = None) -> RunConfig:
    """Read, fill defaults, apply ``overrides`` (``{"section.key": value}``) and validate."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cp.read_string(p.read_text(), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc

    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"[{section}]: unknown section")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            parser = SCHEMA[section][key][0]
            try:
                values[section][key] = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from exc
    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".")
        values[section][key] = value
    _check(values, command)
    return RunConfig(values, None if path is None else str(path))
