"""Benchmark reporting: result cells, pairwise win matrices, and tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoverageError, StoreFormatError

WIN_RULES = ("opponent-sd", "winner-sd")


@dataclass(frozen=True)
class ResultCell:
    dataset: str
    backbone: str
    method: str
    mean: float
    sd: float
    seeds: int = 5
    metric_name: str = "map"

    def __post_init__(self):
        if self.sd < 0:
            raise ValueError("sd must be >= 0")


@dataclass
class WinMatrix:
    methods: list
    wins: np.ndarray  # wins[i, j]: configurations where method i beats j
    n_configs: int


def _beats(a: ResultCell, b: ResultCell, rule: str) -> bool:
    if rule == "opponent-sd":
        return a.mean > b.mean + b.sd
    if rule == "winner-sd":
        return a.mean - a.sd > b.mean
    raise ValueError(f"unknown win rule '{rule}'; valid: {', '.join(WIN_RULES)}")


def win_matrix(cells, rule: str = "opponent-sd") -> WinMatrix:
    """Count, per method pair, the configurations (dataset x backbone) where
    one method outperforms the other; ties count for neither side.

    Under the default rule a method wins when its mean exceeds the
    opponent's mean plus the opponent's sd; 'winner-sd' instead requires the
    winner's mean minus its own sd to clear the opponent's mean.
    """
    methods = []
    table = {}
    configs = []
    for cell in cells:
        if cell.method not in methods:
            methods.append(cell.method)
        key = (cell.dataset, cell.backbone)
        if key not in configs:
            configs.append(key)
        if (cell.method, *key) in table:
            raise CoverageError(
                f"duplicate cell for method '{cell.method}' on {key}"
            )
        table[(cell.method, *key)] = cell
    for method in methods:
        for key in configs:
            if (method, *key) not in table:
                raise CoverageError(
                    f"method '{method}' has no result for dataset '{key[0]}', "
                    f"backbone '{key[1]}'"
                )
    wins = np.zeros((len(methods), len(methods)), dtype=int)
    for key in configs:
        for i, mi in enumerate(methods):
            for j, mj in enumerate(methods):
                if i != j and _beats(table[(mi, *key)], table[(mj, *key)], rule):
                    wins[i, j] += 1
    return WinMatrix(methods=methods, wins=wins, n_configs=len(configs))


# -- tables -------------------------------------------------------------------

_CSV_HEADER = "dataset,backbone,method,mean,sd,seeds,metric_name"


def emit_table(cells, fmt: str = "csv") -> str:
    if fmt == "csv":
        return _emit_csv(cells)
    if fmt == "markdown":
        return _emit_markdown(cells)
    raise ValueError(f"unknown table format '{fmt}'")


def _emit_csv(cells) -> str:
    lines = [_CSV_HEADER]
    for c in cells:
        lines.append(
            f"{c.dataset},{c.backbone},{c.method},{c.mean!r},{c.sd!r},{c.seeds},{c.metric_name}"
        )
    return "\n".join(lines) + "\n"


def parse_result_csv(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise StoreFormatError(f"unexpected result CSV header: {lines[:1]!r}")
    cells = []
    for ln in lines[1:]:
        dataset, backbone, method, mean, sd, seeds, metric_name = ln.split(",")
        cells.append(
            ResultCell(dataset, backbone, method, float(mean), float(sd), int(seeds), metric_name)
        )
    return cells


def _emit_markdown(cells) -> str:
    """One row per (dataset, backbone), one column per method; the best mean
    in each row is bolded."""
    methods = []
    configs = []
    table = {}
    for c in cells:
        if c.method not in methods:
            methods.append(c.method)
        key = (c.dataset, c.backbone)
        if key not in configs:
            configs.append(key)
        table[(c.method, *key)] = c
    lines = ["| dataset | backbone | " + " | ".join(methods) + " |"]
    lines.append("|---" * (2 + len(methods)) + "|")
    for key in configs:
        present = [m for m in methods if (m, *key) in table]
        best = max(present, key=lambda m: table[(m, *key)].mean) if present else None
        row = [key[0], key[1]]
        for m in methods:
            cell = table.get((m, *key))
            if cell is None:
                row.append("-")
            elif m == best:
                row.append(f"**{cell.mean:.4f} +- {cell.sd:.4f}**")
            else:
                row.append(f"{cell.mean:.4f} +- {cell.sd:.4f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_win_matrix(wm: WinMatrix, fmt: str = "markdown") -> str:
    if fmt == "csv":
        lines = ["method," + ",".join(wm.methods)]
        for i, m in enumerate(wm.methods):
            lines.append(m + "," + ",".join(str(x) for x in wm.wins[i]))
        return "\n".join(lines) + "\n"
    width = max(len(m) for m in wm.methods)
    lines = ["| " + " " * width + " | " + " | ".join(wm.methods) + " |"]
    lines.append("|---" * (1 + len(wm.methods)) + "|")
    for i, m in enumerate(wm.methods):
        cells = [str(wm.wins[i, j]) for j in range(len(wm.methods))]
        lines.append(f"| {m:<{width}} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
