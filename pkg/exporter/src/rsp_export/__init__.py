"""torch-to-engine model exporter and numerical oracle."""

from .export import ExportError, ExportReport, export_model, simulate_descriptor
from .oracle import OracleReport, check_pair, oracle_check, run_engine_inspect
from .rspw import read_rspw, write_rspw

__version__ = "0.1.0"
