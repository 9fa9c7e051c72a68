import json
import logging
import socket

import httpx
import pytest

from adaptrules.llm import (
    API_KEY_ENV,
    Cassette,
    CassetteExhausted,
    ChatClient,
    ChatRequest,
    ChatResponse,
    LLMConfig,
    LLMConfigError,
    LLMMalformedResponse,
    LLMRetriesExhausted,
    LLMStatusError,
    LLMTimeoutError,
    Message,
    ReplayMismatch,
    ReplayMismatchWarning,
    replay_match,
)

SECRET = "sk-super-secret-value-123"


def completion(content, prompt_tokens=11, completion_tokens=7):
    return httpx.Response(200, json={
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    })


class Scripted:
    """Mock transport answering from a list of responses or exceptions."""

    def __init__(self, *replies):
        self.replies = list(replies)
        self.requests = []

    def __call__(self, request):
        self.requests.append(request)
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def live_client(transport, mode="live", **config):
    sleeps = []
    client = ChatClient(
        LLMConfig(base_url="https://llm.invalid/v1", mode=mode, **config),
        transport=httpx.MockTransport(transport),
        sleep=sleeps.append,
        api_key=SECRET,
    )
    return client, sleeps


def ask(client, text="hello"):
    return client.chat(client.request([Message("user", text)]))


def test_request_payload_and_digest():
    r = ChatRequest("m", (Message("system", "s"), Message("user", "u")), temperature=0.2, max_tokens=10)
    assert r.payload() == {
        "model": "m",
        "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
        "temperature": 0.2,
        "max_tokens": 10,
    }
    assert ChatRequest.from_payload(r.payload()) == r
    assert r.digest() == ChatRequest.from_payload(r.payload()).digest()
    assert r.digest() != ChatRequest("m", (Message("user", "u"),)).digest()


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", (Message("tool", "x"),))


def test_live_success_sends_wire_format():
    transport = Scripted(completion("hi there"))
    client, _ = live_client(transport)
    response = ask(client)
    assert response == ChatResponse("hi there", 11, 7)
    sent = transport.requests[0]
    assert sent.url == "https://llm.invalid/v1/chat/completions"
    assert sent.headers["authorization"] == f"Bearer {SECRET}"
    assert json.loads(sent.content)["messages"] == [{"role": "user", "content": "hello"}]
    assert client.calls == 1


def test_retries_with_exponential_backoff():
    transport = Scripted(httpx.Response(429), httpx.Response(503), completion("ok"))
    client, sleeps = live_client(transport)
    assert ask(client).content == "ok"
    assert sleeps == [2.0, 4.0]


def test_retries_exhausted():
    transport = Scripted(httpx.Response(500), httpx.Response(502), httpx.Response(503))
    client, sleeps = live_client(transport)
    with pytest.raises(LLMRetriesExhausted, match="HTTP 503"):
        ask(client)
    assert len(transport.requests) == 3
    assert sleeps == [2.0, 4.0]


def test_non_retryable_status():
    transport = Scripted(httpx.Response(401, json={"error": f"bad key {SECRET}"}))
    client, sleeps = live_client(transport)
    with pytest.raises(LLMStatusError) as info:
        ask(client)
    assert info.value.status == 401 and sleeps == []
    assert SECRET not in str(info.value)


def test_timeout():
    client, _ = live_client(Scripted(httpx.ReadTimeout("slow")), timeout_s=5)
    with pytest.raises(LLMTimeoutError, match="timed out after 5"):
        ask(client)


@pytest.mark.parametrize("body", [b"not json", b'{"choices": []}', b'{"choices": [{"message": {"content": null}}]}'])
def test_malformed_body(body):
    client, _ = live_client(Scripted(httpx.Response(200, content=body)))
    with pytest.raises(LLMMalformedResponse):
        ask(client)


@pytest.mark.parametrize("mode", ["live", "record"])
def test_missing_key_fails_before_any_request(monkeypatch, mode, tmp_path):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    transport = Scripted()
    with pytest.raises(LLMConfigError, match=API_KEY_ENV):
        ChatClient(LLMConfig(mode=mode, cassette=str(tmp_path / "c.yaml")), transport=httpx.MockTransport(transport))
    assert transport.requests == []


def test_key_read_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, SECRET)
    transport = Scripted(completion("x"))
    client = ChatClient(LLMConfig(mode="live"), transport=httpx.MockTransport(transport))
    ask(client)
    assert transport.requests[0].headers["authorization"] == f"Bearer {SECRET}"


def test_record_then_replay(tmp_path):
    path = tmp_path / "run.yaml"
    transport = Scripted(completion("first\nline two"), completion("second"))
    client, _ = live_client(transport, mode="record", cassette=str(path))
    ask(client, "a")
    ask(client, "b")
    text = path.read_text()
    assert SECRET not in text
    assert "content: |" in text  # multi-line text stays readable

    replay = ChatClient(LLMConfig(mode="replay", cassette=str(path), strict=True))
    assert ask(replay, "a").content == "first\nline two"
    assert ask(replay, "b").content == "second"
    with pytest.raises(CassetteExhausted, match="cassette exhausted at call 3"):
        ask(replay, "c")


def test_replay_never_opens_sockets(tmp_path):
    cassette = Cassette()
    req = ChatRequest("gpt-4", (Message("user", "q"),))
    cassette.append(req, ChatResponse("a"))
    client = ChatClient(LLMConfig(mode="replay"), cassette=cassette)
    assert client.chat(req).content == "a"
    with pytest.raises(RuntimeError, match="network access"):
        socket.create_connection(("example.com", 443))


def test_replay_needs_cassette():
    with pytest.raises(LLMConfigError, match="cassette"):
        ChatClient(LLMConfig(mode="replay"))


def make_cassette(*prompts):
    c = Cassette()
    for i, p in enumerate(prompts):
        c.append(ChatRequest("gpt-4", (Message("user", p),)), ChatResponse(f"answer {i}"))
    return c


def test_replay_matching_digests_do_not_warn(recwarn):
    c = make_cassette("a", "b")
    for p in ("a", "b"):
        replay_match(c, ChatRequest("gpt-4", (Message("user", p),)))
    assert not [w for w in recwarn if issubclass(w.category, ReplayMismatchWarning)]


def test_replay_mismatch_warns_when_tolerant():
    c = make_cassette("a", "b")
    with pytest.warns(ReplayMismatchWarning, match="call 1"):
        response = replay_match(c, ChatRequest("gpt-4", (Message("user", "reworded a"),)))
    assert response.content == "answer 0"


def test_replay_mismatch_fails_when_strict():
    c = make_cassette("a", "b")
    replay_match(c, ChatRequest("gpt-4", (Message("user", "a"),)), strict=True)
    with pytest.raises(ReplayMismatch, match="call 2"):
        replay_match(c, ChatRequest("gpt-4", (Message("user", "changed"),)), strict=True)


def test_cassette_file_round_trip(tmp_path):
    c = make_cassette("x\ny", "z")
    c.metadata = {"model": "gpt-4"}
    c.save(tmp_path / "c.yaml")
    loaded = Cassette.load(tmp_path / "c.yaml")
    assert loaded.entries == c.entries
    assert loaded.metadata == c.metadata


def test_config_from_mapping():
    cfg = LLMConfig.from_mapping({"llm.model": "ds-coder", "llm.temperature": "0.2", "llm.mode": "live", "llm.strict": "true"})
    assert (cfg.model, cfg.temperature, cfg.mode, cfg.strict) == ("ds-coder", 0.2, "live", True)
    assert cfg.timeout_s == 120.0
    with pytest.raises(ValueError):
        LLMConfig(mode="offline")


def test_secret_never_logged(caplog):
    transport = Scripted(httpx.Response(429), httpx.Response(500), httpx.Response(500))
    client, _ = live_client(transport)
    with caplog.at_level(logging.DEBUG):
        with pytest.raises(LLMRetriesExhausted) as info:
            ask(client)
    assert SECRET not in caplog.text
    assert SECRET not in str(info.value)
    assert SECRET not in repr(client.config)
