import json
from pathlib import Path

import httpx
import pytest
from hypothesis import given, strategies as st

from mmevent.core import LABELS, DatasetManifest, EventLabel, Instance
from mmevent.errors import ConfigurationError, ContractError, DeliveryError, RateLimitError
from mmevent.genai import (ErrorCategory, Exemplar, GenerativeClient, HttpTransport, MockTransport,
                           Outcome, SamplingParams, TestInstance, TokenBucket, build_prompt,
                           categorize_errors, parse_output, prompt_eval, select_exemplars,
                           text_informative)
from prompt_fixture import EXEMPLARS, INSTRUCTION, TEST

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = (FIXTURES / "prompt_golden.txt").read_bytes()
CORPUS = [json.loads(line) for line in (FIXTURES / "parser_corpus.jsonl").read_text().splitlines()]


# --- prompt ---------------------------------------------------------------------

def test_golden_prompt_bytes():
    bundle = build_prompt(INSTRUCTION, EXEMPLARS, TEST, "multimodal")
    assert bundle.serialize().encode("utf-8") == GOLDEN
    assert bundle.attachments == [e.image_ref for e in EXEMPLARS] + [TEST.image_ref]


def test_reversed_exemplars_change_bytes():
    rev = build_prompt(INSTRUCTION, EXEMPLARS[::-1], TEST, "multimodal").serialize()
    assert rev.encode() != GOLDEN


def test_text_only_has_no_attachments():
    bundle = build_prompt(INSTRUCTION, EXEMPLARS, TestInstance(TEST.text, None), "text-only")
    text = bundle.serialize()
    assert "<attachment" not in text and "Image:" not in text and bundle.attachments == []


def test_image_only_has_no_text_lines():
    bundle = build_prompt(INSTRUCTION, EXEMPLARS, TestInstance(None, "img/t.jpg"), "image-only")
    assert "Text:" not in bundle.serialize() and len(bundle.attachments) == 6


def test_prompt_ends_with_directive():
    text = build_prompt(INSTRUCTION, EXEMPLARS, TEST).serialize()
    assert text.endswith('Respond with JSON: {"event_class": "<one of 6 labels>"}\n')


def test_prompt_contract_errors():
    with pytest.raises(ContractError):
        build_prompt(INSTRUCTION, EXEMPLARS[:4], TEST)
    with pytest.raises(ContractError):
        build_prompt(INSTRUCTION, EXEMPLARS, TestInstance("t", None), "multimodal")
    with pytest.raises(ContractError):
        build_prompt(INSTRUCTION, EXEMPLARS, TEST, "text-only")
    with pytest.raises(ContractError):
        build_prompt(INSTRUCTION, EXEMPLARS, TEST, "audio")
    with pytest.raises(ContractError):
        build_prompt(INSTRUCTION, EXEMPLARS[:4] + (Exemplar(None, "t", EventLabel.Flood),), TEST)


def test_prompt_accepts_tuples():
    tuples = [(e.image_ref, e.text, e.label) for e in EXEMPLARS]
    assert build_prompt(INSTRUCTION, tuples, TEST).serialize().encode() == GOLDEN


@given(st.lists(st.text(max_size=15), min_size=2, max_size=2, unique=True))
def test_prompt_injective_on_test_text(pair):
    a, b = (build_prompt(INSTRUCTION, EXEMPLARS, TestInstance(t, None), "text-only").serialize()
            for t in pair)
    assert a != b


def test_prompt_hash_covers_attachments():
    a = build_prompt(INSTRUCTION, EXEMPLARS, TEST)
    b = build_prompt(INSTRUCTION, EXEMPLARS, TestInstance(TEST.text, "img/other.jpg"))
    assert a.serialize() == b.serialize() and a.sha256 != b.sha256


def _train_manifest(counts):
    rows, k = [], 0
    for lab, n in counts.items():
        for _ in range(n):
            rows.append(Instance(f"r{k}", f"text {k}", f"img/{k}.png", lab, "train"))
            k += 1
    return DatasetManifest(tuple(rows), "/data/m.csv")


def test_select_exemplars_top_five_labels():
    m = _train_manifest({lab: 10 + i for i, lab in enumerate(LABELS)})
    ex = select_exemplars(m, seed=0)
    assert [e.label for e in ex] == list(LABELS[1:])  # NonDamage has the fewest rows here
    assert ex[0].image_ref.startswith("/data/img/")
    assert select_exemplars(m, seed=0) == ex
    assert select_exemplars(m, seed=1) != ex


def test_select_exemplars_fills_when_few_labels():
    m = _train_manifest({EventLabel.Flood: 4, EventLabel.Fires: 3})
    ex = select_exemplars(m, seed=0, mode="text-only")
    assert len(ex) == 5 and all(e.image_ref is None for e in ex)
    with pytest.raises(ContractError):
        select_exemplars(_train_manifest({EventLabel.Flood: 3}), seed=0)


# --- parser ---------------------------------------------------------------------

def test_documented_example_outputs():
    r = parse_output("The input shows a flooding event")
    assert (r.outcome, r.parsed_label, r.error_category) == (
        Outcome.recovered, EventLabel.Flood, ErrorCategory.InformationFabrication)
    r = parse_output("There are no events in the input.")
    assert (r.outcome, r.parsed_label, r.error_category) == (
        Outcome.unparseable, None, ErrorCategory.InformationFabrication)
    r = parse_output('{"event_class": "Fires"}')
    assert (r.outcome, r.parsed_label, r.error_category) == (Outcome.clean, EventLabel.Fires, None)
    r = parse_output('{"event_class": "Tsunami"}')
    assert (r.outcome, r.parsed_label, r.error_category) == (
        Outcome.unparseable, None, ErrorCategory.UndefinedClass)


@pytest.mark.parametrize("case", CORPUS, ids=[c["raw"][:30] for c in CORPUS])
def test_parser_corpus(case):
    r = parse_output(case["raw"])
    assert r.tier == case["tier"]
    assert (r.parsed_label.display if r.parsed_label else None) == case["label"]
    assert r.outcome.value == case["outcome"]
    assert (r.error_category.value if r.error_category else None) == case["category"]


def test_corpus_covers_every_tier():
    assert len(CORPUS) == 40
    assert {c["tier"] for c in CORPUS} == {1, 2, 3, 4, 5}


@given(st.text())
def test_parser_total(raw):
    r = parse_output(raw)
    assert r.tier in (1, 2, 3, 4, 5)
    assert (r.outcome is Outcome.unparseable) == (r.parsed_label is None)
    assert (r.outcome is Outcome.clean) == (r.tier == 1)


def test_parser_non_string():
    assert parse_output(None).outcome is Outcome.unparseable


# --- error categorization -------------------------------------------------------------

def _wrong(raw='{"event_class": "Fires"}'):
    return parse_output(raw)


def test_text_informative():
    assert not text_informative(None)
    assert not text_informative("so it is")
    assert not text_informative("wow")
    assert text_informative("bridge collapsed downtown")


def test_all_text_errors():
    results = [(_wrong(), EventLabel.Flood, True)] * 250
    h = categorize_errors(results, 250, seed=0)
    assert h.percentages()[ErrorCategory.TextMisinterpretation] == 100.0
    assert sum(h.counts.values()) == 250


def _mixed(n_img, n_txt, n_undef, n_fab):
    return ([(_wrong(), EventLabel.Flood, False)] * n_img + [(_wrong(), EventLabel.Flood, True)] * n_txt
            + [(_wrong('{"event_class": "Tsunami"}'), EventLabel.Flood, True)] * n_undef
            + [(_wrong("no events here at all"), EventLabel.Flood, True)] * n_fab
            + [(_wrong('{"event_class": "Flood"}'), EventLabel.Flood, True)] * 50)


def test_mixed_fixture_exact_when_sampling_everything():
    results = _mixed(38, 27, 20, 15)
    for seed in range(3):
        pct = categorize_errors(results, 100, seed).percentages()
        assert pct[ErrorCategory.ImageCueError] == 38.0
        assert pct[ErrorCategory.TextMisinterpretation] == 27.0
        assert sum(pct.values()) == pytest.approx(100.0, abs=1e-9)


def test_mixed_fixture_sampled_250():
    pct = categorize_errors(_mixed(380, 270, 200, 150), 250, seed=0).percentages()
    assert abs(pct[ErrorCategory.ImageCueError] - 38) <= 6.5
    assert abs(pct[ErrorCategory.TextMisinterpretation] - 27) <= 6.5


def test_too_few_errors():
    with pytest.raises(ContractError, match="only 1 available"):
        categorize_errors([(_wrong(), EventLabel.Flood, True)], 2)


# --- client ---------------------------------------------------------------------

BUNDLE = build_prompt(INSTRUCTION, EXEMPLARS, TEST)


def _client(script, **kw):
    sleeps = []
    c = GenerativeClient(MockTransport(script), sleep=sleeps.append, **kw)
    return c, sleeps


def test_mock_passthrough():
    c, _ = _client([{"response": '{"event_class": "Flood"}'}])
    assert c.generate(BUNDLE, SamplingParams()) == '{"event_class": "Flood"}'


def test_fail_twice_then_succeed(tmp_path):
    c, sleeps = _client([{"error": "transport"}, {"error": "transport"}, {"response": "ok"}],
                        backoff=0.5, audit_log=tmp_path / "audit.jsonl")
    comp = c.complete(BUNDLE, SamplingParams(), "i1")
    assert (comp.text, comp.attempts) == ("ok", 3)
    assert sleeps == [0.5, 1.0]
    rec = json.loads((tmp_path / "audit.jsonl").read_text())
    assert rec["attempts"] == 3 and rec["raw_response"] == "ok"
    assert rec["prompt_sha256"] == BUNDLE.sha256 and rec["params"]["temperature"] == 0.7
    assert {"started_at", "finished_at"} <= set(rec)


def test_rate_limit_waits_retry_after():
    c, sleeps = _client([{"error": "rate_limit", "retry_after": 7}, {"response": "x"}], backoff=0.1)
    assert c.complete(BUNDLE, SamplingParams()).attempts == 2
    assert sleeps == [7.0]


def test_retries_exhausted(tmp_path):
    c, sleeps = _client([{"default": True, "error": "transport"}], max_retries=2,
                        audit_log=tmp_path / "a.jsonl")
    with pytest.raises(DeliveryError) as e:
        c.complete(BUNDLE, SamplingParams())
    assert e.value.attempts == 3 and len(sleeps) == 2
    assert json.loads((tmp_path / "a.jsonl").read_text())["raw_response"] is None


def test_fatal_error_not_retried():
    c, sleeps = _client([{"error": "fatal"}, {"response": "never"}])
    with pytest.raises(DeliveryError) as e:
        c.complete(BUNDLE, SamplingParams())
    assert e.value.attempts == 1 and sleeps == []


def test_keyed_script_and_order():
    t = MockTransport([{"id": "b", "response": "B"}, {"id": "a", "response": "A"},
                       {"default": True, "response": "D"}])
    assert not t.order_sensitive
    c = GenerativeClient(t, max_in_flight=4)
    out = c.complete_many([(iid, BUNDLE) for iid in "abcab"], SamplingParams())
    assert [o.text for o in out] == ["A", "B", "D", "D", "D"]


def test_exhausted_mock_is_delivery_failure():
    c, _ = _client([])
    assert isinstance(c.complete_many([("x", BUNDLE)], SamplingParams())[0], DeliveryError)


def test_sampling_params_validation():
    with pytest.raises(ConfigurationError):
        SamplingParams(temperature=-0.1)
    assert (SamplingParams().temperature, SamplingParams().nucleus_or_topk) == (0.7, 0.8)


def test_token_bucket_paces():
    now = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        now[0] += s

    b = TokenBucket(2.0, capacity=1.0, clock=lambda: now[0], sleep=sleep)
    for _ in range(3):
        b.acquire()
    assert waits == pytest.approx([0.5, 0.5])


def _http_transport(handler):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return HttpTransport("https://api.example.test/v1", "sk-test", "gpt-4o", http_client=client)


def test_http_request_shape(tmp_path):
    img = tmp_path / "a.png"
    img.write_bytes(b"\x89PNG fake")
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"event_class": "Flood"}'}}]})

    bundle = build_prompt(INSTRUCTION, [Exemplar(str(img), e.text, e.label) for e in EXEMPLARS],
                          TestInstance(TEST.text, str(img)))
    c = GenerativeClient(_http_transport(handler))
    assert c.generate(bundle, SamplingParams()) == '{"event_class": "Flood"}'
    body = seen["body"]
    assert seen["url"] == "https://api.example.test/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert body["temperature"] == 0.7 and body["top_p"] == 0.8 and body["max_tokens"] == 64
    content = body["messages"][0]["content"]
    assert content[0]["text"] == bundle.serialize()
    assert len(content) == 7 and content[1]["image_url"]["url"].startswith("data:image/png;base64,")


@pytest.mark.parametrize("status,exc_type,retryable", [(429, RateLimitError, True),
                                                        (503, None, True), (400, None, False)])
def test_http_status_mapping(status, exc_type, retryable):
    from mmevent.errors import TransportError

    t = _http_transport(lambda r: httpx.Response(status, headers={"retry-after": "2"}, text="no"))
    with pytest.raises(TransportError) as e:
        t.send({"prompt": "p", "attachments": [], "params": vars(SamplingParams())})
    assert e.value.retryable is retryable
    if exc_type:
        assert isinstance(e.value, exc_type) and e.value.retry_after == 2.0


def test_http_from_env_requires_base():
    with pytest.raises(ConfigurationError):
        HttpTransport.from_env(env={})
    t = HttpTransport.from_env(env={"MED_API_BASE": "http://x/", "MED_API_KEY": "k"})
    assert t.base_url == "http://x" and t.model == "gpt-4o"


# --- harness --------------------------------------------------------------------

def _eval_manifest(n_test=12, with_images=True):
    rows = []
    for i, lab in enumerate(LABELS):
        for j in range(3):
            rows.append(Instance(f"tr-{i}-{j}", f"train post about {lab.display}",
                                 f"img/{i}{j}.png" if with_images else None, lab, "train"))
    for k in range(n_test):
        lab = LABELS[k % 6]
        rows.append(Instance(f"te-{k}", f"test post number {k}",
                             f"img/t{k}.png" if with_images else None, lab, "test"))
    return DatasetManifest(tuple(rows), "/data/m.csv")


def test_prompt_eval_all_correct():
    m = _eval_manifest()
    script = [{"id": r.id, "response": json.dumps({"event_class": r.label.display})}
              for r in m.split("test")]
    res = prompt_eval(m, "multimodal", GenerativeClient(MockTransport(script)))
    assert res.report.f1 == 1.0 and res.histogram.sample_size == 0
    assert len(res.exemplar_labels) == 5


def test_prompt_eval_text_only_without_images():
    m = _eval_manifest(with_images=False)
    client = GenerativeClient(MockTransport([{"default": True, "response": '{"event_class": "Flood"}'}]))
    res = prompt_eval(m, "text-only", client)
    assert res.report.n == 12
    with pytest.raises(ContractError):
        prompt_eval(m, "multimodal", client)


def test_prompt_eval_fabrication_and_delivery_failures():
    m = _eval_manifest()
    test_ids = [r.id for r in m.split("test")]
    script = [{"id": test_ids[0], "response": "There are no events in the input."},
              {"id": test_ids[1], "default": False, "error": "fatal"},
              {"default": True, "response": '{"event_class": "Tsunami"}'}]
    res = prompt_eval(m, "multimodal", GenerativeClient(MockTransport(script), sleep=lambda s: None))
    assert res.delivery_failures == 1
    assert res.histogram.counts[ErrorCategory.InformationFabrication] >= 1
    assert res.histogram.counts[ErrorCategory.UndefinedClass] == 10
    assert sum(res.histogram.counts.values()) == res.histogram.available == 11
    assert res.report.n == 12 and res.report.abstained.sum() == 12
