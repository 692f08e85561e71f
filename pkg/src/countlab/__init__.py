"""Counting in a toy vision-language transformer: data, model, analyses and interventions."""
from .model import ModelConfig, OverrideSet, Trace, build_sequence, config_for, forward, init_params
from .synth import CanvasSpec, gen_syndot, gen_synpoly, gen_colorshape, make_pair, pair_corpus
from .vocab import Vocab

__version__ = "0.1.0"
