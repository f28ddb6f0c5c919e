"""Few-shot evaluation of a generative client over a manifest split."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..core import DatasetManifest
from ..errors import ContractError, DeliveryError
from ..evaluation import MetricsReport, score
from .client import GenerativeClient, SamplingParams
from .parsing import (ErrorHistogram, categorize_errors, delivery_failure, is_error, parse_output,
                      text_informative)
from .prompt import DEFAULT_INSTRUCTION, build_prompt, query_for_mode, select_exemplars

ERROR_SAMPLE_SIZE = 250


@dataclass
class PromptEvalResult:
    records: list[dict]
    report: MetricsReport
    histogram: ErrorHistogram
    delivery_failures: int = 0
    exemplar_labels: list[str] = field(default_factory=list)

    @property
    def delivery_failure_rate(self) -> float:
        return self.delivery_failures / len(self.records) if self.records else 0.0


def prompt_eval(manifest: DatasetManifest, mode: str, client: GenerativeClient,
                params: SamplingParams | None = None, exemplar_seed: int = 0,
                split: str = "test", instruction: str = DEFAULT_INSTRUCTION,
                error_sample_size: int = ERROR_SAMPLE_SIZE, error_seed: int = 0) -> PromptEvalResult:
    """Prompt the client once per instance in ``split`` and score the parsed answers.

    Requests that never return count as abstentions in the metrics but are left
    out of the error histogram, which only describes what the model produced.
    """
    params = params or SamplingParams()
    rows = manifest.split(split)
    if not rows:
        raise ContractError(f"manifest has no {split!r} rows")
    if mode != "text-only":
        missing = [r.id for r in rows if r.image_ref is None]
        if missing:
            raise ContractError(f"mode {mode} needs images; rows without one: {missing[:5]}")
    exemplars = select_exemplars(manifest, exemplar_seed, mode)

    jobs = [(r.id, build_prompt(instruction, exemplars,
                                query_for_mode(r, mode, manifest.resolve_image(r)), mode))
            for r in rows]
    completions = client.complete_many(jobs, params)

    records, results, pairs, failures = [], [], [], 0
    for r, comp in zip(rows, completions):
        if isinstance(comp, DeliveryError):
            res, attempts = delivery_failure(str(comp)), comp.attempts
            failures += 1
        else:
            res, attempts = parse_output(comp.text), comp.attempts
            results.append((res, r.label, mode != "image-only" and text_informative(r.text)))
        pairs.append((res.parsed_label, r.label))
        records.append({"id": r.id, "gold": r.label.display,
                        "predicted": res.parsed_label.display if res.parsed_label else None,
                        "attempts": attempts, **res.to_dict()})

    available = sum(1 for res, gold, _ in results if is_error(res, gold))
    hist = categorize_errors(results, min(error_sample_size, available), error_seed)
    return PromptEvalResult(records, score(pairs), hist, failures,
                            [e.label.display for e in exemplars])



