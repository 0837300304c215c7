"""Run configuration, CSV/JSON outputs and manifests."""

from __future__ import annotations

import configparser
import csv
import datetime as _dt
import hashlib
import io
import json
import os
from pathlib import Path

from . import __version__

OUT_DIR_ENV = "VITSCALE_OUT_DIR"
DEFAULT_OUT_DIR = "runs"


class ConfigError(ValueError):
    """Invalid configuration or command-line input."""


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, DEFAULT_OUT_DIR))


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    low = value.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("", "none"):
        return None
    return value


def load_config(path, command: str) -> dict:
    """Options for ``command`` from an INI file (``[global]`` then ``[command]``) or a manifest.

    Keys use the long flag names with dashes or underscores.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    if path.suffix == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        return dict(doc.get("config", doc))
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    out = {}
    for section in ("global", command):
        if parser.has_section(section):
            for key, value in parser.items(section):
                out[key.replace("-", "_")] = _coerce(value)
    return out


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


def csv_text(rows, columns, config: dict | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config, sort_keys=True, default=str) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns, config), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    """Rows of a CSV written by :func:`write_csv`, numbers parsed back."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if not ln.startswith("#")]
    return [{k: _coerce(v) for k, v in row.items()} for row in csv.DictReader(lines)]


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, config: dict, files, started: str, command: str) -> Path:
    doc = {
        "command": command,
        "config": config,
        "tool_version": __version__,
        "started": started,
        "finished": now(),
        "outputs": {Path(f).name: digest(f) for f in files},
    }
    return write_json(Path(out_dir) / "manifest.json", doc)
