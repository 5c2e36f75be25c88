"""Python bindings for the decomp library."""

from ._core import (
    fisher_exact_two_sided,
    inverse_perplexity,
    keyword_decision_tree,
    normalize_answer,
    query_functions,
    recipe_names,
    run_cli,
    token_f1,
)

__all__ = [
    "fisher_exact_two_sided",
    "inverse_perplexity",
    "keyword_decision_tree",
    "normalize_answer",
    "query_functions",
    "recipe_names",
    "run_cli",
    "token_f1",
]
