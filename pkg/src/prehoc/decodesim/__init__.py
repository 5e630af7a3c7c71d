from .decodesim import (SimulationError, SelectorKind, SimConfig, StepMetrics, PrefillMetrics, FlopCounts, DecodeTrace,
                        DecodeSimulator, run_decode, perturbation_report, flops_proxy, metrics_row, COMPARED_SELECTORS,
                        compare_selectors, comparison_report)
