import json
import os
from typing import Any, Dict, Iterable

import pandas as pd


def _make_parent(path: str) -> None:
    parent = os.path.dirname(str(path))
    if parent:
        os.makedirs(parent, exist_ok=True)


def create_and_write(results: Any, path: str, sort_keys: bool = True) -> None:
    """
    Create necessary dirs and files and then json dump the results
    :param results: to dump
    :param sort_keys: sort keys like in json dump: If sort_keys is true,
    then the output of dictionaries will be sorted by key.
    :param path: to save to
    """
    _make_parent(path)
    with open(path, "w", encoding="utf-8") as fout:
        json.dump(results, fout, indent=4, sort_keys=sort_keys)


def read_json(path: str) -> Any:
    """
    Read json from file
    :param path: path to the file
    :return: read contents (json)
    """
    with open(path, "r", encoding="utf-8") as fin:
        return json.load(fin)


def write_jsonl(rows: Iterable[Dict[str, Any]], path: str) -> None:
    """
    Write one json object per line (UTF-8), keys in insertion order
    :param rows: records to write
    :param path: to save to
    """
    _make_parent(path)
    with open(path, "w", encoding="utf-8") as fout:
        for row in rows:
            fout.write(json.dumps(row))
            fout.write("\n")


def read_metrics(path: str) -> pd.DataFrame:
    """
    Parse a metrics file written by `write_jsonl` back into a table
    :param path: path to the .jsonl file
    :return: one row per record
    """
    return pd.read_json(path, lines=True, orient="records", precise_float=True)


def jsonable(value: Any) -> Any:
    """
    Convert dataclass dumps (tuples, enums) into plain json values
    :param value: nested dicts/lists/scalars
    :return: same structure with lists and enum values
    """
    if isinstance(value, dict):
        return {key: jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    return getattr(value, "value", value)
