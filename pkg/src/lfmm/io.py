"""Sample streams, summary tables and run configuration files."""
import configparser
import csv
import json
import math

from .exceptions import DatasetParseError, InvalidArgumentError
from .posterior import SampleStore
from .state import Hyperparameters

__all__ = [
    "write_samples",
    "read_samples",
    "SampleWriter",
    "write_summary",
    "read_config",
    "write_config",
    "RunConfig",
]


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


class SampleWriter:
    """Line-delimited JSON sink: a header record, then one record per draw."""

    def __init__(self, path, meta):
        self.path = path
        try:
            self._handle = open(path, "w", encoding="utf-8", newline="\n")
        except OSError as err:
            raise OSError(f"cannot write samples to {path}: {err.strerror}") from err
        self._handle.write(_dumps({"header": meta}) + "\n")

    def write(self, record):
        self._handle.write(_dumps(record) + "\n")

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_samples(store, path):
    with SampleWriter(path, store.meta) as writer:
        for record in store.records:
            writer.write(record)


def read_samples(path):
    try:
        handle = open(path, encoding="utf-8")
    except OSError as err:
        raise DatasetParseError(f"cannot open sample file: {err.strerror}", path=path) from err
    with handle:
        first = handle.readline()
        try:
            header = json.loads(first)["header"]
        except (ValueError, KeyError, TypeError):
            raise DatasetParseError("missing sample-file header", line=1, path=path) from None
        records = []
        for number, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError as err:
                raise DatasetParseError(f"malformed record ({err.msg})", line=number, path=path) from None
    return SampleStore(header, records)


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_summary(rows, path, columns=("quantity", "k", "level", "mean", "lower", "upper")):
    """Write summary rows (sequences or dicts keyed by ``columns``) as CSV."""
    try:
        handle = open(path, "w", newline="")
    except OSError as err:
        raise OSError(f"cannot write summary to {path}: {err.strerror}") from err
    with handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c, "") for c in columns]
            writer.writerow([_cell(v) for v in row])


class RunConfig:
    """Flat ``key = value`` run settings: hyperparameters plus seed and sampler options."""

    SAMPLER_KEYS = {"seed": int, "hamming_radius": int, "init": str, "alphabet": str,
                    "chains": int, "second_layer": str, "warmup": int}

    def __init__(self, hyperparameters=None, seed=0, hamming_radius=1, init="fused",
                 alphabet=None, chains=1, second_layer=None, warmup=None):
        self.hyperparameters = hyperparameters or Hyperparameters()
        self.seed = seed
        self.hamming_radius = hamming_radius
        self.init = init
        self.alphabet = alphabet
        self.chains = chains
        self.second_layer = second_layer
        self.warmup = warmup

    def items(self):
        out = dict(self.hyperparameters.as_dict())
        out.update(seed=self.seed, hamming_radius=self.hamming_radius, init=self.init,
                   chains=self.chains)
        if self.alphabet is not None:
            out["alphabet"] = list(self.alphabet)
        if self.second_layer is not None:
            out["second_layer"] = self.second_layer
        if self.warmup is not None:
            out["warmup"] = self.warmup
        return out


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_number_list(text):
    values = [float(v) for v in text.split(",")]
    return values[0] if len(values) == 1 else tuple(values)


def write_config(config, path):
    with open(path, "w") as handle:
        for key, value in config.items().items():
            handle.write(f"{key} = {_format_value(value)}\n")


def read_config(path):
    """Parse a run configuration file; unknown keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as handle:
            parser.read_string("[DEFAULT]\n" + handle.read(), source=str(path))
    except OSError as err:
        raise InvalidArgumentError(f"cannot read config {path}: {err.strerror}") from err
    except configparser.Error as err:
        raise InvalidArgumentError(f"malformed config {path}: {err}") from err
    hp_fields = Hyperparameters().as_dict()
    hp_changes, sampler = {}, {}
    for key, raw in parser.defaults().items():
        try:
            if raw.strip().lower() == "none":
                value = None
            elif key in ("random_effects",):
                value = _parse_bool(raw)
            elif key in ("iterations", "burn_in", "thin"):
                value = int(raw)
            elif key in ("a_phi", "b_phi"):
                value = _parse_number_list(raw)
            elif key in hp_fields:
                value = float(raw)
            elif key == "alphabet":
                value = tuple(int(v) for v in raw.split(","))
            elif key == "second_layer":
                value = _parse_bool(raw)
            elif key in RunConfig.SAMPLER_KEYS:
                value = RunConfig.SAMPLER_KEYS[key](raw.strip())
            else:
                raise InvalidArgumentError(f"{path}: unknown config key {key!r}")
        except ValueError as err:
            if isinstance(err, InvalidArgumentError):
                raise
            raise InvalidArgumentError(f"{path}: bad value for {key}: {raw!r}") from None
        if key in hp_fields:
            if value is None and hp_fields[key] is not None:
                raise InvalidArgumentError(f"{path}: {key} cannot be none")
            hp_changes[key] = value
        else:
            sampler[key] = value
    if "prior_mean0" in hp_changes and hp_changes["prior_mean0"] is not None and not math.isfinite(hp_changes["prior_mean0"]):
        raise InvalidArgumentError(f"{path}: prior_mean0 must be finite")
    hp = Hyperparameters(**hp_changes)
    return RunConfig(hyperparameters=hp, **sampler)
