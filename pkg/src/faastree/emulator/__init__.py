"""Record, fit, evaluate and serve emulated workers."""

from faastree.emulator.evaluate import FidelityReport, evaluate_model
from faastree.emulator.model import FunctionModel, WorkerModel, emulate_invoke, fit_model
from faastree.emulator.record import record_trace
from faastree.emulator.runtime import EmulatedRuntime
from faastree.emulator.trace import TraceRecord, read_trace, write_trace

__all__ = [
    "EmulatedRuntime",
    "FidelityReport",
    "FunctionModel",
    "TraceRecord",
    "WorkerModel",
    "emulate_invoke",
    "evaluate_model",
    "fit_model",
    "read_trace",
    "record_trace",
    "write_trace",
]
