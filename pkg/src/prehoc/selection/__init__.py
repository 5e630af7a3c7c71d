from .selection import (SelectionError, BudgetSpec, SelectionResult, PsawConfig, EtfConfig,
                        topk_oracle, structured_topk, rank_middle, sink_indices, local_indices, cosine_similarity,
                        default_start_layer, progressive_boundary, psaw_boundary, etf_boundary,
                        psaw_visible_set, psaw_masked_set, etf_frozen_set, compose_cpe)
from .selection import SIM_THRESHOLD, PHI, ALPHA, PSI, GAMMA
from .cis import SimilaritySource, CisConfig, CisState, CisSource, cis_select, neighborhood, retrieve_dilated
from .posthoc import TdoState, tdo_select, QaaConfig, qaa_select, sketch_matrix
