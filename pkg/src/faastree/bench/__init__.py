"""Load generation, reporting and topology launch."""

from faastree.bench.generate import RESULTS_HEADER, ResultRow, generate, read_results, write_results
from faastree.bench.profile import ClosedLoop, LoadProfile, OpenLoop, Phase, arrival_schedule
from faastree.bench.report import RunReport, Stats, nearest_rank, render_table, report

__all__ = [
    "RESULTS_HEADER",
    "ClosedLoop",
    "LoadProfile",
    "OpenLoop",
    "Phase",
    "ResultRow",
    "RunReport",
    "Stats",
    "arrival_schedule",
    "generate",
    "nearest_rank",
    "read_results",
    "render_table",
    "report",
    "write_results",
]
