"""Gaussian prompt tuning for script event prediction."""
from .backbone import BackboneConfig, MaskedLM, Vocabulary
from .data import Event, GeneratorConfig, ScriptInstance, generate_corpus, read_corpus, write_corpus
from .model import AblationFlags, ModelConfig, P2GModel
from .training import RunConfig, evaluate, train

__version__ = "0.1.0"
