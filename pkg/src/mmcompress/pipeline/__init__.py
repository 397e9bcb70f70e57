from .checkpoint import load_model, save_model
from .config import RunConfig
from .report import emit_report
