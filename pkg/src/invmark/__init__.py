"""Watermarking transformer checkpoints through functionally invariant weight transforms."""
from .attacks import AttackSpec, add_noise, apply_attack, prune, quantize
from .codec import (ExtractionResult, Message, WatermarkKey, derive_candidate, extract,
                    frobenius_distance, insert)
from .errors import (CodecError, ConfigurationError, CorruptionError, EngineError, FormatError,
                     InvmarkError, MatchError, UnsupportedDTypeError, WriteError)
from .invariants import (TransformCandidate, apply_qk_product, apply_transform, compose_pipeline,
                         invert_candidate)
from .matcher import MatchReport, Registry, chunk_errors, log10_pvalue, match
from .model_graph import (DEFAULT_FAMILIES, FAMILIES, ModelArch, Site, resolve_sites,
                          tensors_for_site, validate_checkpoint)
from .tensor_store import Checkpoint, Tensor, read_checkpoint, tensor_stats, write_checkpoint
from .transformer import distortion, equivalence_check, forward, greedy_next_tokens

__version__ = "0.1.0"
