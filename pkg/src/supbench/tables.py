"""Plain TSV tables with a ``#`` metadata header and an optional aggregate block.

```
# title	Threshold sweep
# method	detector
threshold	f1_mean	f1_std	...
0.0	0.53	0.01	...

## aggregate
best_f1_threshold	0.35
```
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

AGGREGATE_MARKER = "## aggregate"


@dataclass
class Table:
    columns: list[str]
    rows: list[list[str]]
    meta: dict[str, str] = field(default_factory=dict)
    aggregate: dict[str, str] = field(default_factory=dict)

    def column(self, name: str) -> list[str]:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def records(self) -> list[dict[str, str]]:
        return [dict(zip(self.columns, r)) for r in self.rows]


def cell(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_table(path: str | Path, columns: Sequence[str], rows: Sequence[Sequence], meta: Mapping | None = None,
                aggregate: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}\t{cell(v)}" for k, v in (meta or {}).items()]
    lines.append("\t".join(columns))
    for r in rows:
        if len(r) != len(columns):
            raise ValueError(f"row has {len(r)} cells, header has {len(columns)}")
        lines.append("\t".join(cell(v) for v in r))
    if aggregate:
        lines += ["", AGGREGATE_MARKER]
        lines += [f"{k}\t{cell(v)}" for k, v in aggregate.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_table(path: str | Path) -> Table:
    meta, aggregate, columns, rows = {}, {}, None, []
    in_aggregate = False
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line == AGGREGATE_MARKER:
            in_aggregate = True
        elif not line:
            continue
        elif in_aggregate:
            k, _, v = line.partition("\t")
            aggregate[k] = v
        elif line.startswith("# "):
            k, _, v = line[2:].partition("\t")
            meta[k] = v
        elif columns is None:
            columns = line.split("\t")
        else:
            rows.append(line.split("\t"))
    return Table(columns or [], rows, meta, aggregate)


def as_float(text: str) -> float:
    return float(text) if text not in ("", "-") else math.nan
