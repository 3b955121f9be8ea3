"""Generation of attribute-structured, action-conditioned prompts with an LLM."""

from .bank import PromptBank, default_timestamp, expected_prompt_count, generate_bank
from .llm import LlmClient, LlmConfig, cache_key, request_descriptions
from .parsing import extract_json_object, parse_response, serialize_descriptions
from .postprocess import DEFAULT_TOKENIZER, ActionConditionedPrompt, WhitespaceTokenizer, postprocess
from .taxonomy import DEFAULT_TAXONOMY, Attribute, AttributeTaxonomy
from .templates import DEFAULT_TEMPLATE_IDS, TEMPLATES, LlmPromptTemplate, build_query, get_template

__all__ = [
    "ActionConditionedPrompt",
    "Attribute",
    "AttributeTaxonomy",
    "DEFAULT_TAXONOMY",
    "DEFAULT_TEMPLATE_IDS",
    "DEFAULT_TOKENIZER",
    "LlmClient",
    "LlmConfig",
    "LlmPromptTemplate",
    "PromptBank",
    "TEMPLATES",
    "WhitespaceTokenizer",
    "build_query",
    "cache_key",
    "default_timestamp",
    "expected_prompt_count",
    "extract_json_object",
    "generate_bank",
    "get_template",
    "parse_response",
    "postprocess",
    "request_descriptions",
    "serialize_descriptions",
]
