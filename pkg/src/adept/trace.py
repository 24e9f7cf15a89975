"""Per-iteration training logs."""

import csv
import io
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


def format_value(v) -> str:
    """Deterministic text form for CSV cells (repr round-trips floats exactly)."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RoundTrace:
    """Ordered rows with a fixed column set; missing cells are NaN."""

    columns: Sequence[str]
    rows: List[dict] = field(default_factory=list)

    def append(self, **row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown trace columns: {sorted(unknown)}")
        self.rows.append({c: row.get(c, float("nan")) for c in self.columns})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path=None, extra: dict = None) -> str:
        """Write (or return) the trace as CSV. ``extra`` adds constant leading columns."""
        extra = extra or {}
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(extra) + list(self.columns))
        for row in self.rows:
            writer.writerow([format_value(v) for v in extra.values()]
                            + [format_value(row[c]) for c in self.columns])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text
