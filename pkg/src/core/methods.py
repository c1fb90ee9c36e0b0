from src.core.schemas import RunOutput

from pathlib import Path
from typing import List
from functools import wraps

import pandas as pd
import logging

logger = logging.getLogger('root')


# Decorators
def cli_output(func):
    """
    Expects a RunOutput for `func` return value. This decorator prints the stage's message and returns
    the exit status, so a subcommand handler can hand it straight to `sys.exit`.
    """

    @wraps(func)
    def wrapper(*args, **kwargs) -> int:
        data, status, message = func(*args, **kwargs)
        output = RunOutput(data=data, status=status, message=message)

        if isinstance(output.data, str) and output.data:
            print(output.data)
        print(output.message)
        return output.status
    return wrapper


# Metrics files
def read_metrics(path) -> pd.DataFrame:
    """
    Loads a JSON-lines metrics file into one row per record; fields a record type lacks are NaN.

    Args:
        path (str | Path): The metrics file.

    Returns:
        pd.DataFrame: The records in file order, with a `type` column.
    """
    path = Path(path)
    if path.is_dir():
        path = path / 'metrics.jsonl'

    if not path.read_text().strip():
        logger.warning(f"Metrics file <{path}> holds no records.")
        return pd.DataFrame(columns=['type'])
    return pd.read_json(path, lines=True, convert_dates=False, dtype=False)


def records_of(frame: pd.DataFrame, kind: str) -> pd.DataFrame:
    """
    The records of one type, with the columns that type never uses dropped.
    """
    return frame[frame['type'] == kind].dropna(axis=1, how='all').reset_index(drop=True)


def last_record(frame: pd.DataFrame, kind: str) -> dict:
    rows = records_of(frame, kind)
    return rows.iloc[-1].to_dict() if len(rows) else {}


def round_columns(frame: pd.DataFrame, columns: List[str]) -> pd.DataFrame:
    """
    Round records sorted by round, with count columns restored to integers.
    """
    rounds = records_of(frame, 'round')
    if rounds.empty:
        return pd.DataFrame(columns=columns)
    rounds = rounds.sort_values('round')
    for column in ('round', 'param_count', 'bytes_uploaded', 'cumulative_bytes'):
        if column in rounds:
            rounds[column] = rounds[column].astype('int64')
    return rounds[columns]
