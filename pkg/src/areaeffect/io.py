"""CSV ingestion, run configuration, and deterministic artifact emission.

File dialect
------------
Comma separated, ``.`` decimal point, UTF-8, one mandatory header row.
Lines starting with ``#`` are comments (every file this package writes
begins with one).  The only cells that may be empty are ``y`` and
``weight`` on rows with ``s = 0``.  Required columns: ``area`` (integer or
string labels), ``a`` (0/1 treatment), ``s`` (0/1 sampled indicator) and
``y`` (real outcome, present exactly when ``s = 1``).  An optional
``weight`` column carries positive design weights for sampled rows; when
the column is absent, weights default to the within-area count ratio
N_j^(arm) / n_j^(arm) and the ingestion report says so.  Every remaining
column is a covariate; the run configuration's ``contextual`` list names
the ones that are area-level.  Error messages give the file line number
(the header is row 1) and the column name.

Run configuration (JSON object)
-------------------------------
input          path of the frame CSV (estimate / ci)
contextual     covariate column names that are area-level constants
interactions   treatment-by-covariate terms in outcome designs (default true)
specs          list of estimator objects: {"strategy", "family", "mu",
               "e1", "mu_a", "clip", "folds", "allow_erratic"}; everything
               past the first two is optional
bootstrap      {"B", "C", "alpha", "level1", "scheme"}
sim            synthetic-population settings (SimConfig field names)
replications   Monte Carlo replications for benchmark / coverage
workers        worker processes for replicated runs
seed           master seed
outdir         output directory

The --seed, --out and --workers flags override the matching entries.
Unknown keys anywhere in the configuration are rejected.  Every emitted
CSV starts with a comment line carrying the tool version, the seed and the
SHA-256 of the configuration bytes, and those bytes are copied verbatim
next to the outputs, so a rerun with the same inputs, configuration and
seed reproduces each artifact byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import ConfigError, DataError
from .estimators import EstimatorSpec
from .harness import BootstrapSettings, _fmt
from .learners import NuisanceTriple
from .frames import PopulationFrame
from .simulate import SimConfig

_META_COLUMNS = ("area", "a", "s", "y", "weight")
_SIM_FIELDS = {f.name for f in dataclasses.fields(SimConfig)}
_SPEC_KEYS = {"strategy", "family", "mu", "e1", "mu_a", "clip", "folds",
              "allow_erratic"}
_BOOT_KEYS = {"B", "C", "alpha", "level1", "scheme"}
_CONFIG_KEYS = {"input", "contextual", "interactions", "specs", "bootstrap",
                "sim", "replications", "workers", "seed", "outdir"}
_SCHEMES = ("single", "double")


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    """Parsed and validated run configuration plus its source bytes."""

    specs: tuple = ()
    input: str | None = None
    contextual: tuple = ()
    interactions: bool = True
    bootstrap: BootstrapSettings | None = None
    scheme: str = "double"
    sim: SimConfig | None = None
    replications: int = 200
    workers: int = 1
    seed: int = 0
    outdir: str = "out"
    raw: bytes = b"{}"
    sha256: str = ""

    @property
    def header_comment(self) -> str:
        return (f"areaeffect {__version__} seed={self.seed} "
                f"config=sha256:{self.sha256[:16]}")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _as_int(value, name: str) -> int:
    _require(isinstance(value, int) and not isinstance(value, bool),
             f"{name} must be an integer, got {value!r}")
    return value


def _parse_spec(obj, idx: int) -> EstimatorSpec:
    where = f"specs[{idx}]"
    _require(isinstance(obj, dict), f"{where} must be an object")
    for key in sorted(set(obj) - _SPEC_KEYS):
        raise ConfigError(f"{where}: unknown key {key!r}")
    for key in ("strategy", "family"):
        _require(key in obj, f"{where}: missing {key!r}")
    kinds = {k: obj[k] for k in ("mu", "e1", "mu_a") if k in obj}
    if "clip" in obj:
        clip = obj["clip"]
        _require(isinstance(clip, (list, tuple)) and len(clip) == 2,
                 f"{where}: clip must be a [lo, hi] pair")
        kinds["clip"] = (float(clip[0]), float(clip[1]))
    nuisance = NuisanceTriple(**kinds)
    extra = {}
    if "folds" in obj:
        extra["folds"] = _as_int(obj["folds"], f"{where}.folds")
    if "allow_erratic" in obj:
        _require(isinstance(obj["allow_erratic"], bool),
                 f"{where}.allow_erratic must be a boolean")
        extra["allow_erratic"] = obj["allow_erratic"]
    return EstimatorSpec(obj["strategy"], obj["family"], nuisance=nuisance,
                         **extra)


def _parse_bootstrap(obj) -> tuple[BootstrapSettings, str]:
    _require(isinstance(obj, dict), "bootstrap must be an object")
    for key in sorted(set(obj) - _BOOT_KEYS):
        raise ConfigError(f"bootstrap: unknown key {key!r}")
    scheme = obj.get("scheme", "double")
    _require(scheme in _SCHEMES,
             f"bootstrap.scheme must be one of {_SCHEMES}, got {scheme!r}")
    fields = {}
    for key, name in (("B", "B"), ("C", "C")):
        if key in obj:
            fields[name] = _as_int(obj[key], f"bootstrap.{key}")
    if "alpha" in obj:
        _require(isinstance(obj["alpha"], (int, float)),
                 "bootstrap.alpha must be a number")
        fields["alpha"] = float(obj["alpha"])
    if "level1" in obj:
        fields["level1"] = obj["level1"]
    return BootstrapSettings(**fields), scheme


def _parse_sim(obj) -> SimConfig:
    _require(isinstance(obj, dict), "sim must be an object")
    for key in sorted(set(obj) - _SIM_FIELDS):
        raise ConfigError(f"sim: unknown key {key!r}")
    fields = dict(obj)
    if "segments" in fields:
        segs = fields["segments"]
        _require(isinstance(segs, list) and
                 all(isinstance(s, (list, tuple)) and len(s) == 3 for s in segs),
                 "sim.segments must be a list of [count, lo, hi] triples")
        fields["segments"] = tuple((int(c), float(lo), float(hi))
                                   for c, lo, hi in segs)
    for key in ("c0_range", "c1_range"):
        if key in fields:
            rng = fields[key]
            _require(isinstance(rng, (list, tuple)) and len(rng) == 2,
                     f"sim.{key} must be a [lo, hi] pair")
            fields[key] = (float(rng[0]), float(rng[1]))
    return SimConfig(**fields)


def parse_config(raw: bytes) -> RunConfig:
    """Validate configuration bytes into a RunConfig; rejects unknown keys."""
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    _require(isinstance(obj, dict), "configuration must be a JSON object")
    for key in sorted(set(obj) - _CONFIG_KEYS):
        raise ConfigError(f"unknown config key {key!r}")

    fields: dict = {"raw": raw, "sha256": hashlib.sha256(raw).hexdigest()}
    if "input" in obj:
        _require(isinstance(obj["input"], str), "input must be a path string")
        fields["input"] = obj["input"]
    if "contextual" in obj:
        ctx = obj["contextual"]
        _require(isinstance(ctx, list) and all(isinstance(c, str) for c in ctx),
                 "contextual must be a list of column names")
        fields["contextual"] = tuple(ctx)
    if "interactions" in obj:
        _require(isinstance(obj["interactions"], bool),
                 "interactions must be a boolean")
        fields["interactions"] = obj["interactions"]
    if "specs" in obj:
        _require(isinstance(obj["specs"], list), "specs must be a list")
        fields["specs"] = tuple(_parse_spec(s, i)
                                for i, s in enumerate(obj["specs"]))
    if "bootstrap" in obj:
        fields["bootstrap"], fields["scheme"] = _parse_bootstrap(obj["bootstrap"])
    if "sim" in obj:
        fields["sim"] = _parse_sim(obj["sim"])
    if "replications" in obj:
        k = _as_int(obj["replications"], "replications")
        _require(k >= 1, "replications must be >= 1")
        fields["replications"] = k
    if "workers" in obj:
        w = _as_int(obj["workers"], "workers")
        _require(w >= 1, "workers must be >= 1")
        fields["workers"] = w
    if "seed" in obj:
        fields["seed"] = _as_int(obj["seed"], "seed")
    if "outdir" in obj:
        _require(isinstance(obj["outdir"], str), "outdir must be a path string")
        fields["outdir"] = obj["outdir"]
    return RunConfig(**fields)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# frame ingestion


def _cell_error(line: int, column: str, msg: str) -> DataError:
    return DataError(f"row {line}, column {column!r}: {msg}")


def _parse_binary(value: str, line: int, column: str) -> int:
    if value == "0" or value == "1":
        return int(value)
    raise _cell_error(line, column, f"expected 0 or 1, got {value!r}")


def _parse_float(value: str, line: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise _cell_error(line, column, f"not a number: {value!r}") from None


def ingest(path, contextual=()) -> tuple[PopulationFrame, dict]:
    """Read a frame CSV into a PopulationFrame plus an ingestion report.

    The report records per-area partition counts, covariate descriptives,
    the dense-code-to-label map and whether design weights were defaulted.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = None
        data: list[tuple[int, list[str]]] = []
        for row in reader:
            if row and row[0].startswith("#"):
                continue
            if header is None:
                header = row
                continue
            data.append((reader.line_num, row))
    if header is None:
        raise DataError(f"{path}: no header row")
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise DataError(f"duplicate column name {dup[0]!r}")
    for col in ("area", "a", "s", "y"):
        if col not in header:
            raise DataError(f"missing required column {col!r}")
    if not data:
        raise DataError(f"{path}: no data rows")
    pos = {name: i for i, name in enumerate(header)}
    cov_names = [h for h in header if h not in _META_COLUMNS]
    for name in contextual:
        if name not in cov_names:
            raise ConfigError(
                f"contextual column {name!r} is not a covariate column")
    has_weight = "weight" in pos

    n = len(data)
    area_raw: list[str] = []
    a = np.empty(n, dtype=int)
    s = np.empty(n, dtype=int)
    y = np.empty(n)
    weight = np.full(n, np.nan)
    x = np.empty((n, len(cov_names)))
    for r, (line, row) in enumerate(data):
        if len(row) != len(header):
            raise DataError(
                f"row {line}: expected {len(header)} fields, got {len(row)}")
        label = row[pos["area"]]
        if label == "":
            raise _cell_error(line, "area", "empty label")
        area_raw.append(label)
        a[r] = _parse_binary(row[pos["a"]], line, "a")
        s[r] = _parse_binary(row[pos["s"]], line, "s")
        yv = row[pos["y"]]
        if yv == "":
            if s[r] == 1:
                raise _cell_error(line, "y", "sampled row has no outcome")
            y[r] = np.nan
        else:
            if s[r] == 0:
                raise _cell_error(line, "y", "unsampled row carries an outcome")
            y[r] = _parse_float(yv, line, "y")
        if has_weight and s[r] == 1:
            wv = row[pos["weight"]]
            if wv == "":
                raise _cell_error(line, "weight", "sampled row has no weight")
            weight[r] = _parse_float(wv, line, "weight")
            if not weight[r] > 0 or not np.isfinite(weight[r]):
                raise _cell_error(line, "weight",
                                  f"must be a positive real, got {wv!r}")
        for c, name in enumerate(cov_names):
            cv = row[pos[name]]
            if cv == "":
                raise _cell_error(line, name, "missing covariate value")
            x[r, c] = _parse_float(cv, line, name)

    try:
        area = np.array([int(v) for v in area_raw])
    except ValueError:
        area = np.array(area_raw)
    ctx_idx = [c for c, name in enumerate(cov_names) if name in contextual]
    ind_idx = [c for c, name in enumerate(cov_names) if name not in contextual]
    frame = PopulationFrame(
        area, a, s, y,
        x[:, ind_idx],
        x[:, ctx_idx] if ctx_idx else None,
        weight=weight if has_weight else None,
        w_names=[cov_names[c] for c in ind_idx],
        c_names=[cov_names[c] for c in ctx_idx],
    )
    counts = frame.counts
    report = {
        "rows": n,
        "areas": frame.m,
        "labels": [_json_safe(lab) for lab in frame.area_labels],
        "per_area": [
            {"area": _json_safe(frame.area_labels[j]),
             "N": int(counts.N[j]), "N1": int(counts.N1[j]),
             "N0": int(counts.N0[j]), "n": int(counts.n[j]),
             "n1": int(counts.n1[j]), "n0": int(counts.n0[j])}
            for j in range(frame.m)
        ],
        "covariates": [
            {"name": name, "mean": float(x[:, c].mean()),
             "sd": float(x[:, c].std())}
            for c, name in enumerate(cov_names)
        ],
        "contextual": [cov_names[c] for c in ctx_idx],
        "weights": "given" if has_weight else "defaulted",
    }
    return frame, report


# ---------------------------------------------------------------------------
# artifact emission


def _json_safe(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_json_safe(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def write_csv(path, rows, comment: str) -> None:
    """Write rows with a leading ``# comment`` line and LF line endings."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {comment}\n")
        csv.writer(fh, lineterminator="\n").writerows(rows)


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_safe(payload), fh, indent=2)
        fh.write("\n")


def frame_csv_rows(frame: PopulationFrame) -> list:
    """Round-trippable rows for a frame; the weight column is omitted when
    every sampled weight equals the default N_j^(arm) / n_j^(arm) ratio."""
    c = frame.counts
    Na = np.where(frame.a == 1, c.N1[frame.area], c.N0[frame.area])
    na = np.where(frame.a == 1, c.n1[frame.area], c.n0[frame.area])
    sampled = frame.sampled
    default = Na[sampled] / na[sampled]
    given = frame.weight[sampled]
    canonical = bool(np.all(np.isnan(given) | (given == default)))
    head = ["area", "a", "s", "y"]
    if not canonical:
        head.append("weight")
    head += list(frame.w_names) + list(frame.c_names)
    rows = [head]
    for i in range(frame.n_units):
        row = [str(frame.area_labels[frame.area[i]]),
               str(int(frame.a[i])), str(int(frame.s[i])),
               repr(float(frame.y[i])) if frame.s[i] == 1 else ""]
        if not canonical:
            row.append(repr(float(frame.weight[i])) if frame.s[i] == 1 else "")
        row += [repr(float(v)) for v in frame.w_ind[i]]
        row += [repr(float(v)) for v in frame.w_ctx[i]]
        rows.append(row)
    return rows


def estimate_csv_rows(results) -> list:
    """Rows for per-area point estimates; results is a list of
    (spec label, list of AreaEstimate) pairs."""
    rows = [["estimator", "area", "tau", "tau1", "tau0", "flag"]]
    for label, ests in results:
        for e in ests:
            rows.append([label, str(e.area), _fmt(e.tau), _fmt(e.tau1),
                         _fmt(e.tau0), "" if e.flag is None else str(e.flag)])
    return rows


def interval_csv_rows(results) -> list:
    """Rows for per-area bootstrap intervals; results is a list of
    (spec label, BootstrapResult) pairs.  A double result that carries its
    single-scheme companion emits both, told apart by the scheme column."""
    rows = [["estimator", "scheme", "area", "tau", "bias", "lower", "upper",
             "flag"]]
    for label, res in results:
        parts = [res] + ([res.single] if res.single is not None else [])
        for part in parts:
            for j, est in enumerate(part.estimates):
                flag = part.flags[j]
                rows.append([label, part.scheme, str(est.area),
                             _fmt(part.tau_hat[j]), _fmt(part.bias[j]),
                             _fmt(part.lower[j]), _fmt(part.upper[j]),
                             "" if flag is None else str(flag)])
    return rows
