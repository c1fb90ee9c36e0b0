"""
Upload-cost accounting: C = R x |θ| x |S_r| x 4 bytes, plus the MB/GB strings used in comparison tables.
"""
from src.core.schemas import RoundReport

from collections import namedtuple
from decimal import Decimal, ROUND_DOWN
from typing import List, Optional, Sequence, Union

BYTES_PER_PARAMETER = 4

CostEntry = namedtuple('CostEntry', ['round', 'param_count', 'sampled', 'bytes'])


def round_cost(param_count: int, sampled: int) -> int:
    if param_count < 0 or sampled < 0:
        raise ValueError("Parameter and client counts cannot be negative.")
    return int(param_count) * int(sampled) * BYTES_PER_PARAMETER


def format_human(num_bytes: int) -> str:
    """
    Decimal megabytes (bytes / 10^6), stepping to gigabytes as MB / 1024 once MB reaches 1024, truncated
    to two decimals: 85,120,000 -> "85.12 MB", 5,527,040,000 -> "5.39 GB".
    """
    megabytes = Decimal(int(num_bytes)) / Decimal(10 ** 6)
    if megabytes >= 1024:
        gigabytes = (megabytes / Decimal(1024)).quantize(Decimal('0.01'), rounding=ROUND_DOWN)
        return f"{gigabytes} GB"
    return f"{megabytes.quantize(Decimal('0.01'), rounding=ROUND_DOWN)} MB"


def rounds_to_target(history: Sequence[Union[RoundReport, float]], target_accuracy: float) -> Optional[int]:
    """
    The first round whose global accuracy reaches the target, or None when it never does.
    """
    for position, item in enumerate(history):
        accuracy = item.accuracy if isinstance(item, RoundReport) else float(item)
        round_index = item.round if isinstance(item, RoundReport) else position
        if accuracy >= target_accuracy:
            return round_index
    return None


class CostLedger():
    """
    Per-round byte counts of client-to-server uploads. With `count_download` the broadcast of the same
    parameters to the sampled clients is counted as well.
    """

    def __init__(self, count_download: bool = False):
        self.count_download = count_download
        self.entries: List[CostEntry] = []

    def __len__(self):
        return len(self.entries)

    def record(self, round_index: int, param_count: int, sampled: int) -> CostEntry:
        cost = round_cost(param_count, sampled)
        if self.count_download:
            cost *= 2
        entry = CostEntry(round_index, param_count, sampled, cost)
        self.entries.append(entry)
        return entry

    @property
    def cumulative(self) -> int:
        return sum(entry.bytes for entry in self.entries)

    def cumulative_until(self, round_index: int) -> int:
        return sum(entry.bytes for entry in self.entries if entry.round <= round_index)

    def to_records(self) -> List[dict]:
        return [entry._asdict() for entry in self.entries]
