"""One chat-completion interface over HTTP and scripted backends, plus prompts and parsers."""

from billp.gateway.backends import (
    AuditLog,
    AuthenticationError,
    ChatBackend,
    ChatRequest,
    ContextLengthError,
    FailingBackend,
    HTTPChatBackend,
    LLMError,
    LocalServerBackend,
    Message,
    OpenAIBackend,
    RetriesExhaustedError,
    StubBackend,
    StubRule,
    StubScript,
    complete,
    mix_seed,
)
from billp.gateway.parsing import ParseError, parse_action, parse_value
from billp.gateway.prompts import (
    HistoryStep,
    PromptRenderError,
    PromptTemplate,
    load_template,
    render_prompt,
)

__all__ = [
    "AuditLog",
    "AuthenticationError",
    "ChatBackend",
    "ChatRequest",
    "ContextLengthError",
    "FailingBackend",
    "HTTPChatBackend",
    "HistoryStep",
    "LLMError",
    "LocalServerBackend",
    "Message",
    "OpenAIBackend",
    "ParseError",
    "PromptRenderError",
    "PromptTemplate",
    "RetriesExhaustedError",
    "StubBackend",
    "StubRule",
    "StubScript",
    "complete",
    "load_template",
    "mix_seed",
    "parse_action",
    "parse_value",
    "render_prompt",
]
