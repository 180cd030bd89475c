"""Dynamic spatial panel quantile models with interactive effects."""

import json as _json
import os as _os

from ._dsqp import (
    ConfigError,
    DataError,
    NumericalError,
    SpatialWeights,
    check_stationarity,
    clustered_weights,
    log_det,
    quantile_loss,
    read_weights,
    solve_system,
    tracked_values,
    write_weights,
)
from . import _dsqp

__all__ = [
    "ConfigError", "DataError", "NumericalError", "SpatialWeights", "check_stationarity", "clustered_weights",
    "log_det", "quantile_loss", "read_weights", "solve_system", "tracked_values", "write_weights",
    "simulate", "ingest_panel", "sample", "run", "load_config",
]


def simulate(w, **config):
    """Simulate a panel on weights `w`; keyword arguments follow the DGP config keys."""
    out = _dsqp.simulate(_json.dumps(config), w)
    out["truth"] = _json.loads(out["truth"])
    return out


def ingest_panel(path, **schema):
    return _dsqp.ingest_panel(_os.fspath(path), _json.dumps(schema))


def sample(y, x, w, tau, sampler=None, prior=None, enable_is=False):
    """Run one chain in memory and return posterior summaries."""
    out = _dsqp.sample(y, list(x), w, tau, _json.dumps(sampler or {}), _json.dumps(prior or {}), enable_is)
    out["diagnostics"] = _json.loads(out["diagnostics"])
    return out


def load_config(path):
    return _json.loads(_dsqp.load_config(_os.fspath(path)))


def run(config, base_dir=""):
    """Run every quantile level of a config (path or dict); returns the exit status."""
    if isinstance(config, (str, _os.PathLike)):
        base_dir = _os.path.dirname(_os.path.abspath(config))
        config = load_config(config)
    return _dsqp.run(_json.dumps(config), _os.fspath(base_dir))
