"""Scenario files: everything one run needs, in one YAML document.

A scenario bundles the market parameters, the delay kernel, the initial
state (financial wealth plus the income window), the numerical settings and
an optional kernel uncertainty set.  Parsing is strict -- unknown keys,
missing blocks or malformed numbers raise ``ConfigError`` with the offending
location -- and the parsed scenario can echo itself back as a plain dict so
result files carry their exact inputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import yaml

from .errors import ConfigError, DomainError, StickywageError
from .income import HistorySegment
from .measures import RadonMeasure
from .params import MarketParams
from .robust import UncertaintySet

__all__ = ["Scenario", "load_scenario", "parse_scenario"]

_MARKET_KEYS = {"r", "mortality", "impatience", "gamma", "bequest_weight",
                "mu", "sigma", "income_drift", "income_vol", "rho1",
                "corr_market", "corr_extra"}
_NUMERIC_KEYS = {"h", "T", "T_trunc", "n_paths", "seed", "n_workers", "chunk",
                 "tolerances"}
_TOLERANCE_KEYS = {"gamma_rel", "n_sigma"}


@dataclass
class Scenario:
    name: str
    params: MarketParams
    kernel: RadonMeasure
    history: HistorySegment
    w0: float
    h: float
    T: float
    n_paths: int
    seed: int
    n_workers: int
    chunk: int
    uncertainty: UncertaintySet | None
    history_config: dict
    T_trunc: float | None = None       # pricing-check horizon, defaults to T
    tolerances: dict | None = None     # optional overrides: gamma_rel, n_sigma
    raw_config: dict | None = None     # the scenario as written, for sweeps

    def resolved(self) -> dict:
        """Echo of the fully-resolved inputs, for embedding in outputs."""
        out = {
            "name": self.name,
            "market": self.params.to_dict(),
            "kernel": self.kernel.to_dict(),
            "initial": {
                "wealth": self.w0,
                "history": {
                    "h": self.history.h,
                    "values": self.history.values.tolist(),
                },
            },
            # worker count is execution topology: it cannot change any
            # result, so it is not part of the echoed inputs
            "numerics": {
                "h": self.h, "T": self.T, "n_paths": self.n_paths,
                "seed": self.seed, "chunk": self.chunk,
            },
        }
        if self.T_trunc is not None:
            out["numerics"]["T_trunc"] = self.T_trunc
        if self.tolerances:
            out["numerics"]["tolerances"] = dict(self.tolerances)
        if self.uncertainty is not None:
            if self.uncertainty.kind == "tube":
                out["uncertainty"] = {
                    "tube": {"halfwidth": self.uncertainty.halfwidth.to_dict()}
                }
            else:
                out["uncertainty"] = {
                    "family": [m.to_dict() for m in self.uncertainty.members]
                }
        return out


def load_scenario(path: str) -> Scenario:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"scenario file {path} is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"scenario file {path} must hold a mapping")
    return parse_scenario(data, default_name=path)


def parse_scenario(data: dict, default_name: str = "scenario") -> Scenario:
    known = {"name", "market", "kernel", "initial", "numerics", "uncertainty"}
    _reject_unknown(data, known, "top level")
    name = str(data.get("name", default_name))
    params = _parse_market(_req(data, "market", "top level"))
    kernel = _parse_measure(_req(data, "kernel", "top level"), need_d=True)
    numerics = _parse_numerics(_req(data, "numerics", "top level"))
    initial = _req(data, "initial", "top level")
    _reject_unknown(initial, {"wealth", "history"}, "initial")
    w0 = _number(initial.get("wealth", 0.0), "initial.wealth")
    hist_cfg = initial.get("history", {"shape": "constant", "level": 1.0})
    history = _parse_history(hist_cfg, kernel.d, numerics["h"])
    uncertainty = None
    if "uncertainty" in data and data["uncertainty"] is not None:
        uncertainty = _parse_uncertainty(data["uncertainty"], kernel)
    return Scenario(
        name=name, params=params, kernel=kernel, history=history, w0=w0,
        h=numerics["h"], T=numerics["T"], n_paths=numerics["n_paths"],
        seed=numerics["seed"], n_workers=numerics["n_workers"],
        chunk=numerics["chunk"], uncertainty=uncertainty,
        history_config=dict(hist_cfg),
        T_trunc=numerics["T_trunc"], tolerances=numerics["tolerances"],
        raw_config=copy.deepcopy(data),
    )


# ----------------------------------------------------------------------
# block parsers


def _parse_market(cfg) -> MarketParams:
    if not isinstance(cfg, dict):
        raise ConfigError("market block must be a mapping")
    _reject_unknown(cfg, _MARKET_KEYS, "market")
    mu = np.atleast_1d(np.asarray(cfg.get("mu", 0.07), dtype=float))
    sigma = np.asarray(cfg.get("sigma", 0.2), dtype=float)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1, 1)
    income_vol = np.atleast_1d(
        np.asarray(cfg.get("income_vol", 0.0), dtype=float))
    if income_vol.size == 1 and mu.size > 1:
        income_vol = np.full(mu.size, float(income_vol[0]))
    corr_market = cfg.get("corr_market")
    corr_extra = cfg.get("corr_extra")
    rho1 = cfg.get("rho1")
    if rho1 is not None:
        if mu.size != 1:
            raise ConfigError("market.rho1 shortcut needs a single asset")
        if corr_market is not None or corr_extra is not None:
            raise ConfigError("give either market.rho1 or explicit "
                              "correlation blocks, not both")
        rho1 = _number(rho1, "market.rho1")
        if not -1.0 <= rho1 <= 1.0:
            raise ConfigError("market.rho1 must lie in [-1, 1]")
        corr_market = [[rho1]]
        corr_extra = [[math.sqrt(max(0.0, 1.0 - rho1 * rho1))]]
    try:
        return MarketParams(
            r=_number(cfg.get("r", 0.03), "market.r"),
            mortality=_number(cfg.get("mortality", 0.02), "market.mortality"),
            impatience=_number(cfg.get("impatience", 0.04), "market.impatience"),
            gamma=_number(cfg.get("gamma", 2.0), "market.gamma"),
            bequest_weight=_number(cfg.get("bequest_weight", 1.0),
                                   "market.bequest_weight"),
            mu=mu, sigma=sigma,
            income_drift=_number(cfg.get("income_drift", 0.0),
                                 "market.income_drift"),
            income_vol=income_vol,
            corr_market=None if corr_market is None else np.asarray(
                corr_market, dtype=float),
            corr_extra=None if corr_extra is None else np.asarray(
                corr_extra, dtype=float),
        )
    except StickywageError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed market block: {exc}") from exc


def _parse_measure(cfg, d: float | None = None, need_d: bool = False) -> RadonMeasure:
    if not isinstance(cfg, dict):
        raise ConfigError("kernel block must be a mapping")
    _reject_unknown(cfg, {"d", "atoms", "density"}, "kernel")
    if need_d and "d" not in cfg:
        raise ConfigError("kernel block needs the window length d")
    try:
        return RadonMeasure(cfg.get("d", d), cfg.get("atoms") or (),
                            cfg.get("density") or ())
    except StickywageError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed kernel block: {exc}") from exc


def _parse_numerics(cfg) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("numerics block must be a mapping")
    _reject_unknown(cfg, _NUMERIC_KEYS, "numerics")
    out = {
        "h": _number(_req(cfg, "h", "numerics"), "numerics.h"),
        "T": _number(_req(cfg, "T", "numerics"), "numerics.T"),
        "n_paths": int(cfg.get("n_paths", 1)),
        "seed": int(cfg.get("seed", 0)),
        "n_workers": int(cfg.get("n_workers", 1)),
        "chunk": int(cfg.get("chunk", 2048)),
        "T_trunc": None,
        "tolerances": None,
    }
    if out["h"] <= 0 or out["T"] <= 0:
        raise ConfigError("numerics.h and numerics.T must be positive")
    if out["n_paths"] < 1 or out["n_workers"] < 1 or out["chunk"] < 1:
        raise ConfigError("numerics counts must be positive integers")
    if cfg.get("T_trunc") is not None:
        out["T_trunc"] = _number(cfg["T_trunc"], "numerics.T_trunc")
        if out["T_trunc"] <= 0:
            raise ConfigError("numerics.T_trunc must be positive")
    if cfg.get("tolerances") is not None:
        tol = cfg["tolerances"]
        _reject_unknown(tol, _TOLERANCE_KEYS, "numerics.tolerances")
        out["tolerances"] = {
            k: _number(v, f"numerics.tolerances.{k}") for k, v in tol.items()
        }
    return out


def _parse_history(cfg, d: float, h: float) -> HistorySegment:
    if not isinstance(cfg, dict):
        raise ConfigError("initial.history must be a mapping")
    shape = cfg.get("shape", "constant")
    n_hist = round(d / h)
    if abs(n_hist * h - d) > 1e-9 * max(1.0, d) or n_hist < 1:
        raise ConfigError(
            f"numerics.h={h} must divide the kernel window d={d}"
        )
    try:
        if shape == "constant":
            _reject_unknown(cfg, {"shape", "level"}, "initial.history")
            return HistorySegment.constant(
                d, h, _number(cfg.get("level", 1.0), "history.level"))
        if shape == "linear":
            _reject_unknown(cfg, {"shape", "start", "end"}, "initial.history")
            start = _number(cfg.get("start", 1.0), "history.start")
            end = _number(cfg.get("end", 1.0), "history.end")
            return HistorySegment.from_function(
                d, h, lambda s: start + (end - start) * (s + d) / d)
        if shape == "tent":
            _reject_unknown(cfg, {"shape", "base", "peak", "peak_at"},
                            "initial.history")
            base = _number(cfg.get("base", 1.0), "history.base")
            peak = _number(cfg.get("peak", 1.5), "history.peak")
            peak_at = _number(_req(cfg, "peak_at", "initial.history"),
                              "history.peak_at")
            if not -d < peak_at < 0:
                raise ConfigError("history.peak_at must lie inside (-d, 0)")
            xs = np.array([-d, peak_at, 0.0])
            ys = np.array([base, peak, base])
            return HistorySegment.from_function(
                d, h, lambda s: float(np.interp(s, xs, ys)))
        if shape == "grid":
            _reject_unknown(cfg, {"shape", "values"}, "initial.history")
            values = np.asarray(_req(cfg, "values", "initial.history"),
                                dtype=float)
            if values.size != n_hist + 1:
                raise ConfigError(
                    f"history.values needs {n_hist + 1} samples on the "
                    f"{h}-grid of [-{d}, 0], got {values.size}"
                )
            return HistorySegment(h, values)
    except StickywageError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed history block: {exc}") from exc
    raise ConfigError(
        f"unknown history shape {shape!r}; pick constant, linear, tent or grid"
    )


def _parse_uncertainty(cfg, kernel: RadonMeasure) -> UncertaintySet:
    if not isinstance(cfg, dict):
        raise ConfigError("uncertainty block must be a mapping")
    _reject_unknown(cfg, {"tube", "family"}, "uncertainty")
    if ("tube" in cfg) == ("family" in cfg):
        raise ConfigError("uncertainty needs exactly one of tube/family")
    try:
        if "tube" in cfg:
            tube = cfg["tube"]
            _reject_unknown(tube, {"halfwidth"}, "uncertainty.tube")
            half = _parse_measure(_req(tube, "halfwidth", "uncertainty.tube"),
                                  d=kernel.d)
            return UncertaintySet.tube(kernel, half)
        members = cfg["family"]
        if not isinstance(members, list) or not members:
            raise ConfigError("uncertainty.family must be a nonempty list")
        return UncertaintySet.family(
            [_parse_measure(m, d=kernel.d) for m in members])
    except (DomainError,) as exc:
        raise ConfigError(f"malformed uncertainty block: {exc}") from exc


# ----------------------------------------------------------------------
# small helpers


def _req(d, key, where):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return d[key]


def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in {where}; "
            f"allowed: {sorted(allowed)}"
        )


def _number(x, where) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where} must be a number, got {x!r}")
    x = float(x)
    if not math.isfinite(x):
        raise ConfigError(f"{where} must be finite")
    return x
