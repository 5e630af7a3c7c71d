from .config import ConfigError, ExperimentConfig, FIELDS, PER_LAYER_KEYS, describe_fields, flatten, coerce, toml_literal
from .suites import SUITES, Suite, SuiteContext, SuiteResult, run_suite, SUITE_STREAM
from .report import (TRACE_COLUMNS, PREFILL_COLUMNS, STEP_DOCS, PREFILL_DOCS, SUMMARY_DOCS, schema_text, dumps,
                     write_json, write_rows, report_rows, jsonable)
