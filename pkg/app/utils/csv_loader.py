import os
from typing import List

import pandas as pd


def load_csv(filepath: str) -> pd.DataFrame:
    """Load a CSV file into a pandas DataFrame"""
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"CSV file not found at: {filepath}")

    return pd.read_csv(filepath)


def write_csv(rows: List[dict], filepath: str, columns: List[str]) -> pd.DataFrame:
    """Write rows with a fixed column order; returns the frame written"""
    parent = os.path.dirname(filepath)
    if parent:
        os.makedirs(parent, exist_ok=True)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(filepath, index=False)
    return frame


def append_csv(rows: List[dict], filepath: str, columns: List[str]) -> None:
    """Append rows, writing the header only when the file is new"""
    if not rows:
        return
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(filepath, mode='a', index=False, header=not os.path.exists(filepath))
