from GFormulaLib.config.settings import AnalysisConfig, DgpConfig, StudyConfig
from GFormulaLib.models.data_classes import AnalysisStage, ClusterRecord, OutcomeDefinition
from GFormulaLib.utils.logging import setup_logger

__version__ = "0.1.0"
__all__ = ["AnalysisConfig", "AnalysisStage", "ClusterRecord", "DgpConfig", "OutcomeDefinition", "StudyConfig", "setup_logger"]
