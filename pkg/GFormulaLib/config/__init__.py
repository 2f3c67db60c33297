"""Configuration models and loaders."""

from .settings import AnalysisConfig, DgpConfig, StudyConfig, load_analysis_config, load_study_config

__all__ = ["AnalysisConfig", "DgpConfig", "StudyConfig", "load_analysis_config", "load_study_config"]
