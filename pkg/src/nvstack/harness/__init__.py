"""CAS crash experiment and serializability checking."""

from .verify import Verdict, ValueGraph, build_graph, find_euler_trail, oracle_verify, place_failed_ops, replay_witness, verify
from .workload import CasOp, ExecutionLog, generate_workload
from .schedule import overwrite_then_crash
