from .attncore import (AttentionError, HeadConfig, AttentionInstance, AttentionDist, TruncatedDist,
                       softmax, attention_weights, attention_output, truncate, sparse_attention, centroid,
                       as_index_set, l1_distance, total_variation, TOLERANCE)
from .streamgen import (GeneratorKind, SynthGenConfig, DecodeStream, StreamItem, gen_decode_stream,
                        counter_rng, exp_decay_log_weights, normalize, per_layer,
                        STREAM_WALK, STREAM_PROJECTION, STREAM_KEY_UPDATE, STREAM_VALUES, STREAM_SKETCH)
