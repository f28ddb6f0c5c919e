"""Five-shot prompting harness for generative vision-language models."""
from .client import (Completion, GenerativeClient, HttpTransport, MockTransport, SamplingParams,
                     TokenBucket)
from .harness import PromptEvalResult, prompt_eval
from .parsing import (ErrorCategory, ErrorHistogram, GenerationResult, Outcome, categorize_errors,
                      parse_output, text_informative)
from .prompt import (DEFAULT_INSTRUCTION, MODES, OUTPUT_DIRECTIVE, Exemplar, PromptBundle,
                     TestInstance, build_prompt, query_for_mode, select_exemplars)

__all__ = [
    "Completion", "GenerativeClient", "HttpTransport", "MockTransport", "SamplingParams",
    "TokenBucket", "PromptEvalResult", "prompt_eval", "ErrorCategory", "ErrorHistogram",
    "GenerationResult", "Outcome", "categorize_errors", "parse_output", "text_informative",
    "DEFAULT_INSTRUCTION", "MODES", "OUTPUT_DIRECTIVE", "Exemplar", "PromptBundle",
    "TestInstance", "build_prompt", "query_for_mode", "select_exemplars",
]
