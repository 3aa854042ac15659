from .features import FEATURE_SIZE, column_embedding, column_feature
from .model import Encoder, EncoderConfig, JoinForest, JoinTree, QueryContext
from .schema import SchemaEmbedConfig, schema_embeddings
from .tree import TreeNodeState, child_sum_unit, leaf_state, nary_unit

__all__ = [
    "FEATURE_SIZE", "column_embedding", "column_feature", "Encoder", "EncoderConfig", "JoinForest", "JoinTree",
    "QueryContext", "SchemaEmbedConfig", "schema_embeddings", "TreeNodeState", "child_sum_unit", "leaf_state",
    "nary_unit",
]
