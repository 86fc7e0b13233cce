"""Markdown report and ablation chart built from the ``metrics.tsv`` files.

The report only formats numbers it reads; nothing is recomputed here.
"""
from __future__ import annotations

from pathlib import Path

from .metrics import SUPPRESS_STD_BELOW, RunAggregate, format_aggregate
from .tables import Table, as_float, read_table

RAW_COLUMNS = {"threshold", "fraction", "run", "trial", "n_evaluated", "epochs", "test_tiles", "batch_size",
               "latent_dims", "learning_rate", "positive_class_weight", "reconstruction_weight"}
FLAG_COLUMNS = {"best_f1", "best_dice", "degenerate"}
METHOD_COLORS = {"detector": "tab:blue", "classifier": "tab:orange", "vae": "tab:green"}


def find_metrics(results: str | Path) -> list[Path]:
    results = Path(results)
    found = sorted(results.rglob("metrics.tsv")) if results.exists() else []
    # experiment-level tables first, per-run tables after
    return sorted(found, key=lambda p: (any(part.startswith("run") for part in p.relative_to(results).parts[:-1]), str(p)))


def _number(text: str, digits: int) -> str:
    v = as_float(text)
    if v != v:
        return "-"
    return f"{v:.{digits}f}"


def _aggregate_value(key: str, text: str, digits: int) -> str:
    if key.endswith("_threshold") or (key.startswith("best_") and key[5:] in RAW_COLUMNS | {"optimizer"}):
        return text
    try:
        float(text)
    except ValueError:
        return text
    return _number(text, digits)


def render_table(table: Table, digits: int = 2) -> list[str]:
    header, getters = [], []
    cols = table.columns
    i = 0
    while i < len(cols):
        name = cols[i]
        if name.endswith("_mean") and i + 1 < len(cols) and cols[i + 1] == name[:-5] + "_std":
            header.append(name[:-5])
            getters.append(("agg", i))
            i += 2
            continue
        header.append(name)
        getters.append(("raw" if name in RAW_COLUMNS else "flag" if name in FLAG_COLUMNS else "num", i))
        i += 1
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in table.rows:
        cells = []
        for kind, j in getters:
            text = row[j]
            if kind == "agg":
                mean, std = as_float(text), as_float(row[j + 1])
                cells.append(format_aggregate(RunAggregate(mean, std, not std >= SUPPRESS_STD_BELOW), digits))
            elif kind == "flag":
                cells.append("*" if text == "1" else "")
            elif kind == "raw":
                cells.append("-" if text == "nan" else text)
            else:
                try:
                    float(text)
                except ValueError:
                    cells.append(text)
                else:
                    cells.append(_number(text, digits))
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def ablation_chart(table: Table, out_dir: Path) -> list[Path]:
    """Solid lines for detection F1, dashed lines for localization DICE."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    methods = list(dict.fromkeys(table.column("method")))
    for m in methods:
        rows = [r for r in table.records() if r["method"] == m]
        x = [as_float(r["fraction"]) * 100 for r in rows]
        color = METHOD_COLORS.get(m)
        ax.plot(x, [as_float(r["f1_mean"]) for r in rows], "-o", color=color, label=f"{m} F1")
        ax.plot(x, [as_float(r["dice_mean"]) for r in rows], "--s", color=color, label=f"{m} DICE")
    ax.set_xlabel("training data used (%)")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    paths = [out_dir / "ablation.svg", out_dir / "ablation.png"]
    fig.savefig(paths[0], metadata={"Date": None})
    fig.savefig(paths[1], dpi=120, metadata={"Software": None})
    plt.close(fig)
    return paths


def emit_report(results: str | Path, digits: int = 2) -> Path:
    results = Path(results)
    results.mkdir(parents=True, exist_ok=True)
    lines = ["# Experiment report", ""]
    found = find_metrics(results)
    if not found:
        lines += ["## No experiments found", "", f"No `metrics.tsv` files were found under `{results}`.", ""]
    else:
        lines += [
            f"Means over runs; the sample standard deviation is shown as `(±σ)` only when σ ≥ {SUPPRESS_STD_BELOW}. "
            "`-` marks a value that is absent (for example an empty true-positive set). `*` flags the best row.",
            "",
        ]
    for path in found:
        table = read_table(path)
        rel = path.relative_to(results).as_posix()
        lines += [f"## {table.meta.get('title', rel)}", "", f"Source: `{rel}`", ""]
        extra = {k: v for k, v in table.meta.items() if k != "title"}
        if extra:
            lines += [f"- {k}: {v}" for k, v in extra.items()] + [""]
        lines += render_table(table, digits) + [""]
        if table.aggregate:
            lines += [f"- {k}: {_aggregate_value(k, v, digits)}" for k, v in table.aggregate.items()] + [""]
        if rel == "ablation/metrics.tsv" and table.rows:
            charts = ablation_chart(table, results)
            lines += [f"![Training-set size ablation]({charts[0].name})", "",
                      "Solid lines: detection F1. Dashed lines: localization DICE.", ""]
    out = results / "report.md"
    out.write_text("\n".join(lines), encoding="utf-8")
    return out
