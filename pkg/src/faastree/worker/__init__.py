from faastree.worker.admission import Admit, Queue, Reject, ScaleDown, Scaler, ScaleUp, StartNew, admit
from faastree.worker.node import Instance, Worker, reap_idle
from faastree.worker.runtime import InvokeContext, ProcessRuntime, Runtime

__all__ = [
    "Admit",
    "Instance",
    "InvokeContext",
    "ProcessRuntime",
    "Queue",
    "Reject",
    "Runtime",
    "ScaleDown",
    "ScaleUp",
    "Scaler",
    "StartNew",
    "Worker",
    "admit",
    "reap_idle",
]
