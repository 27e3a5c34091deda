"""Memory-based face-voice alignment on synthetic paired embeddings."""

from .errors import ArchiveError, ConfigError, MemalignError, NumericError, ShapeError, StorageError
from .mfva import (MemoryBank, MfvaModule, RecallResult, align_loss, attention_weights, init_module,
                   interpolate_recall, recall_face, recall_speaker, store_loss)
from .synth import CorpusSpec, EmbeddingRecord, Modality, SyntheticCorpus, generate_corpus, read_archive, write_archive
from .trainer import TrainConfig, fit, pretrain

__version__ = "0.1.0"
