import json
import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import h5py
import numpy as np
import pandas as pd

from src.exceptions import ConfigError, DataError, EmptyDatasetError, ParseError

logger = logging.getLogger(__name__)

CONTAINER_FORMAT_VERSION = 1


# ==============================================================================
# 1. RAW INTERACTION LOGS
# ==============================================================================

@dataclass(frozen=True)
class FormatSpec:
    """Layout of a delimited interaction log.

    Column positions are 0-based field indices, so files with extra columns
    (ratings, tags, ...) are read without renaming anything.
    """
    delimiter: str = "\t"
    user_column: int = 0
    item_column: int = 1
    timestamp_column: int = 2
    has_header: bool = False
    timestamp_unit: str = "s"
    allow_fractional: bool = False

    def to_dict(self):
        return asdict(self)


FORMAT_PRESETS = {
    "tsv": FormatSpec(),
    # HetRec 2011 user_taggedbookmarks-timestamps.dat: userID bookmarkID tagID timestamp(ms)
    "delicious": FormatSpec(delimiter="\t", user_column=0, item_column=2, timestamp_column=3,
                            has_header=True, timestamp_unit="ms"),
    # Kaggle subreddit interactions: username,subreddit,utc
    "reddit": FormatSpec(delimiter=",", user_column=0, item_column=1, timestamp_column=2,
                         has_header=True, allow_fractional=True),
}

_INTEGER_TS = re.compile(r"\d+")
_FRACTIONAL_TS = re.compile(r"\d+(\.\d*)?")


def resolve_format(name_or_spec):
    if isinstance(name_or_spec, FormatSpec):
        return name_or_spec
    try:
        return FORMAT_PRESETS[name_or_spec]
    except KeyError:
        raise ConfigError(
            f"unknown input format '{name_or_spec}', expected one of {sorted(FORMAT_PRESETS)}"
        ) from None


def read_interaction_frame(path, format_spec):
    """
    Reads a (possibly gzipped) delimited log into a frame with columns
    user_id, item_id, timestamp (int seconds) and line (1-based file line).
    Malformed rows raise ParseError with the line they came from.
    """
    path = Path(path)
    fmt = resolve_format(format_spec)
    if fmt.timestamp_unit not in ("s", "ms"):
        raise ConfigError(f"timestamp_unit must be 's' or 'ms', got '{fmt.timestamp_unit}'")
    if not path.is_file():
        raise DataError(f"input file not found: {path}")

    header_lines = 1 if fmt.has_header else 0
    try:
        # blank lines are kept so that row positions map 1:1 onto file lines
        raw = pd.read_csv(
            path, sep=fmt.delimiter, header=0 if fmt.has_header else None, dtype=str,
            keep_default_na=False, na_filter=False, skip_blank_lines=False,
            quoting=3, compression="infer", engine="c",
        )
    except pd.errors.EmptyDataError:
        raise EmptyDatasetError(f"input file is empty: {path}") from None
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        line = int(match.group(1)) if match else None
        raise ParseError(f"malformed row in {path}: {exc}", line_number=line) from None

    raw = raw.reset_index(drop=True)
    lines = np.arange(len(raw)) + 1 + header_lines
    columns = (fmt.user_column, fmt.item_column, fmt.timestamp_column)
    if raw.shape[1] <= max(columns):
        raise ParseError(
            f"expected at least {max(columns) + 1} fields, found {raw.shape[1]}",
            line_number=1 + header_lines,
        )

    # --- drop fully blank lines, keep track of where the rest came from ---
    as_text = raw.astype(str)
    blank = (as_text.apply(lambda col: col.str.strip()) == "").all(axis=1)
    frame = pd.DataFrame({
        "user_id": as_text.iloc[:, fmt.user_column].str.strip(),
        "item_id": as_text.iloc[:, fmt.item_column].str.strip(),
        "timestamp": as_text.iloc[:, fmt.timestamp_column].str.strip(),
        "line": lines,
    })[~blank.to_numpy()]

    if frame.empty:
        raise EmptyDatasetError(f"no interactions in {path}")

    missing = (frame["user_id"] == "") | (frame["item_id"] == "") | (frame["timestamp"] == "")
    if missing.any():
        bad = int(frame.loc[missing, "line"].iloc[0])
        raise ParseError("missing user, item or timestamp field", line_number=bad)

    pattern = _FRACTIONAL_TS if fmt.allow_fractional else _INTEGER_TS
    well_formed = frame["timestamp"].str.fullmatch(pattern)
    if not well_formed.all():
        first = frame.loc[~well_formed].iloc[0]
        raise ParseError(
            f"timestamp '{first['timestamp']}' is not a non-negative integer",
            line_number=int(first["line"]),
        )

    if fmt.allow_fractional:
        seconds = np.floor(frame["timestamp"].astype(np.float64)).astype(np.int64)
    else:
        seconds = frame["timestamp"].astype(np.int64)
    if fmt.timestamp_unit == "ms":
        seconds = seconds // 1000
    frame = frame.assign(timestamp=seconds.to_numpy())
    logger.info("Read %d interactions from %s", len(frame), path)
    return frame.reset_index(drop=True)


# ==============================================================================
# 2. HDF5 CONTAINERS (datasets and checkpoints)
# ==============================================================================

def read_hdf5_item(item):
    """
    Recursively reads an item from an HDF5 file loaded with h5py.
    String datasets come back as numpy arrays of python str.
    """
    if isinstance(item, h5py.Group):
        return {key: read_hdf5_item(value) for key, value in item.items()}
    elif isinstance(item, h5py.Dataset):
        if h5py.check_string_dtype(item.dtype) is not None:
            return np.array(item.asstr()[()], dtype=object)
        return item[()]
    else:
        return item


def write_container(path, arrays, manifest):
    """
    Writes flat named arrays plus a JSON manifest attribute.

    Every dataset lives at the root and is created without timestamps, so two
    writes of equal content produce byte-identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"container_format_version": CONTAINER_FORMAT_VERSION, **manifest}
    with h5py.File(path, "w") as f:
        for name in sorted(arrays):
            if "/" in name:
                raise ValueError(f"container names must be flat, got '{name}'")
            data = arrays[name]
            if data.dtype == object:
                f.create_dataset(name, data=data.astype(str).tolist(),
                                 dtype=h5py.string_dtype("utf-8"), track_times=False)
            else:
                f.create_dataset(name, data=data, track_times=False)
        f.attrs["manifest"] = json.dumps(manifest, sort_keys=True)
    logger.debug("Wrote %d arrays to %s", len(arrays), path)


def read_container(path):
    """Inverse of write_container: returns (arrays, manifest)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    try:
        with h5py.File(path, "r") as f:
            arrays = read_hdf5_item(f)
            manifest = json.loads(f.attrs["manifest"])
    except (OSError, KeyError) as exc:
        raise DataError(f"could not read container {path}: {exc}") from None
    return arrays, manifest
