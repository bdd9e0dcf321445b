"""Long-context inference engine: compress, gather, recompute."""

from .embeddings import EmbeddingStore, HeadSpec, TappedStates, combine, extract
from .errors import (ConfigError, CorruptFileError, DataError, FormatError,
                     InputError, PositionError, QueryError, ReformError,
                     SchemaError, SelectionError, SplitError, UsageError)
from .kvcache import CacheEntry, EvictionPolicy, LayerKVCache, new_cache_set
from .model import (ChunkResult, Model, ModelConfig, ModelWeights, apply_rope,
                    decode_token, forward_chunk, init_random, weight_schema)
from .pipeline import (PipelineConfig, PrefillResult, QuerySplit, WorkStats,
                       generate, reform_prefill, split_query)
from .retrieval import (SelectionSet, SignificanceScores, gather, score,
                        select, sliding_max, sliding_mean, smooth_max)
from .rfwt import load_weights, save_weights
from .tokenizer import BOS, EOS, PAD, SEP, VOCAB_SIZE, ByteTokenizer, VocabTokenizer

__version__ = "0.1.0"
