import json

import httpx
import pytest

from vprefine.clients import MockClient, MockScript, MockUnmatched, ModelError, OpenAICompatClient

from conftest import scripted


def user(text):
    return [{"role": "system", "content": "sys"}, {"role": "user", "content": text}]


def test_mock_pops_in_order_and_falls_through_to_later_rules():
    c = scripted({"alpha": ["a1", "a2"], "alp": ["b1"]})
    assert [c.complete(user("alpha beta")) for _ in range(3)] == ["a1", "a2", "b1"]
    assert c.calls == 3


def test_mock_exhausted_vs_unmatched():
    c = scripted({"alpha": ["a1"]})
    c.complete(user("alpha"))
    with pytest.raises(ModelError, match="exhausted"):
        c.complete(user("alpha"))
    with pytest.raises(MockUnmatched) as exc:
        c.complete(user("gamma " * 50))
    assert exc.value.prefix == ("gamma " * 50)[:120]


def test_mock_matches_last_user_message_only():
    c = scripted({"needle": ["x"]})
    msgs = [{"role": "user", "content": "needle"}, {"role": "user", "content": "hay"}]
    with pytest.raises(MockUnmatched):
        c.complete(msgs)


def test_mock_script_validation():
    with pytest.raises(ValueError):
        MockScript.from_dict({"rules": [{"match": 1, "responses": []}]})


def test_openai_wire_format():
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": "1. find it"}}]})

    c = OpenAICompatClient("http://model.test/v1/", "k3y", "m-1", transport=httpx.MockTransport(handler))
    assert c.complete(user("hi"), temperature=0.0, max_tokens=64) == "1. find it"
    assert seen["url"] == "http://model.test/v1/chat/completions"
    assert seen["auth"] == "Bearer k3y"
    assert seen["body"] == {"model": "m-1", "messages": user("hi"), "temperature": 0.0, "max_tokens": 64}


@pytest.mark.parametrize(
    "response",
    [httpx.Response(500, text="boom"), httpx.Response(200, json={"choices": []}), httpx.Response(200, text="not json")],
)
def test_openai_failures_become_model_errors(response):
    c = OpenAICompatClient("http://x", "k", "m", transport=httpx.MockTransport(lambda r: response))
    with pytest.raises(ModelError):
        c.complete(user("hi"))


def test_from_env(monkeypatch):
    for k in ("MODEL_API_BASE", "MODEL_API_KEY", "MODEL_NAME"):
        monkeypatch.delenv(k, raising=False)
    with pytest.raises(ModelError, match="MODEL_API_BASE"):
        OpenAICompatClient.from_env()
    monkeypatch.setenv("MODEL_API_BASE", "http://h")
    monkeypatch.setenv("MODEL_API_KEY", "k")
    monkeypatch.setenv("MODEL_NAME", "m")
    c = OpenAICompatClient.from_env()
    assert (c.base_url, c.model) == ("http://h", "m")
